"""
Mutual scoring between unlabeled samples.

Every patch of a query sample is scored against every other sample of its
gallery by the distance to its nearest patch there; the per-gallery scores
are reduced by an interval average over the lowest X percent, averaged over
stages, and optionally enhanced with the other modality's aligned scores.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyScoreSet,
    LengthMismatch,
    NoAlignmentRoute,
    TooManySubsets,
)
from .types import (
    MODALITY_CLOUD,
    MODALITY_IMAGE,
    Intrinsics,
    OrganizedPointCloud,
    PatchFeatureStack,
    ProjectionMap,
    ScoreSet,
)

logger = logging.getLogger(__name__)

# Query rows per block in the distance computation
QUERY_CHUNK = 1024
# Expanded-form candidates re-checked with exact distances
EXACT_CANDIDATES = 4

ScoresLike = Union[ScoreSet, np.ndarray]


def pairwise_min_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """For each query row, the L2 distance to its nearest gallery row.

    Candidates come from the |q|^2 + |g|^2 - 2 q.g expansion; the few best
    are re-measured directly so the returned minimum is an exact distance.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.shape[1] != gallery.shape[1]:
        raise DimensionMismatch(f"Feature widths differ: {query.shape[1]} vs {gallery.shape[1]}")

    k = min(EXACT_CANDIDATES, len(gallery))
    gallery_sq = (gallery ** 2).sum(axis=1)
    result = np.empty(len(query))

    for start in range(0, len(query), QUERY_CHUNK):
        block = query[start:start + QUERY_CHUNK]
        expanded = (block ** 2).sum(axis=1)[:, None] + gallery_sq[None, :] - 2.0 * block @ gallery.T
        if k < len(gallery):
            candidates = np.argpartition(expanded, k - 1, axis=1)[:, :k]
        else:
            candidates = np.broadcast_to(np.arange(len(gallery)), (len(block), len(gallery)))
        exact = np.linalg.norm(block[:, None, :] - gallery[candidates], axis=2)
        result[start:start + len(block)] = exact.min(axis=1)

    return result


@dataclass
class MutualScores:
    """Scores of one query against its gallery: values[s, m, j] for stage s, patch m, gallery j."""
    values: np.ndarray
    source_ids: List[str]

    @property
    def num_stages(self) -> int:
        return self.values.shape[0]

    def score_set(self, stage: int, patch: int) -> ScoreSet:
        return ScoreSet(scores=self.values[stage, patch].copy(), source_ids=list(self.source_ids))


def _check_compatible(query: PatchFeatureStack, other: PatchFeatureStack):
    if query.num_stages != other.num_stages:
        raise DimensionMismatch(f"Stage counts differ: {query.num_stages} vs {other.num_stages}")
    if query.stage_dims != other.stage_dims:
        raise DimensionMismatch(f"Stage widths differ: {query.stage_dims} vs {other.stage_dims}")


def mutual_score(query: PatchFeatureStack, gallery: Sequence[PatchFeatureStack],
                 source_ids: Optional[Sequence[str]] = None) -> MutualScores:
    """Minimum patch distance of every query patch to every gallery sample, per stage."""
    if source_ids is None:
        source_ids = [str(j) for j in range(len(gallery))]
    if len(source_ids) != len(gallery):
        raise LengthMismatch("every gallery stack needs a source id")

    values = np.zeros((query.num_stages, query.num_patches, len(gallery)))
    for j, other in enumerate(gallery):
        _check_compatible(query, other)
        for s in range(query.num_stages):
            values[s, :, j] = pairwise_min_distances(query.stages[s], other.stages[s])

    return MutualScores(values=values, source_ids=list(source_ids))


def interval_size(count: int, percent: float) -> int:
    return max(1, int(np.floor(percent / 100.0 * count)))


def interval_average(score_set: ScoresLike, percent: float) -> float:
    """Mean of the lowest `percent` of a score set."""
    if isinstance(score_set, ScoreSet):
        scores = score_set.scores
        order = sorted(range(len(scores)), key=lambda j: (scores[j], score_set.source_ids[j]))
        ranked = scores[order]
    else:
        ranked = np.sort(np.asarray(score_set, dtype=np.float64))
    if ranked.size == 0:
        raise EmptyScoreSet("Interval average of an empty score set")
    return float(ranked[:interval_size(ranked.size, percent)].mean())


def interval_average_array(values: np.ndarray, percent: float) -> np.ndarray:
    """Interval average along the last axis."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == 0:
        raise EmptyScoreSet("Interval average of an empty score set")
    k = interval_size(values.shape[-1], percent)
    return np.sort(values, axis=-1)[..., :k].mean(axis=-1)


def fuse_stages(per_stage_scores: np.ndarray) -> np.ndarray:
    """Mean over stages of an S x M score matrix."""
    return np.asarray(per_stage_scores, dtype=np.float64).mean(axis=0)


# Cross-modal alignment

def _patch_of_pixel(rows: np.ndarray, cols: np.ndarray, grid_side: int, height: int, width: int) -> np.ndarray:
    return (rows * grid_side // height) * grid_side + cols * grid_side // width


def project_points(points: np.ndarray, intrinsics: Intrinsics,
                   image_size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection to (row, col) pixels with round-to-nearest, plus an inside-image mask."""
    points = np.asarray(points, dtype=np.float64)
    height, width = int(image_size[0]), int(image_size[1])
    z = points[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    cols = np.floor(intrinsics.fx * points[:, 0] / safe_z + intrinsics.cx + 0.5).astype(np.int64)
    rows = np.floor(intrinsics.fy * points[:, 1] / safe_z + intrinsics.cy + 0.5).astype(np.int64)
    inside = in_front & (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return rows, cols, inside


def nearest_center(points: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest center per point, ties by smallest index."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    owner = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        dist = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        owner[start:start + len(block)] = np.argmin(dist, axis=1)
    return owner


def build_projection_map(grid_side: int, group_centers: np.ndarray,
                         organized: Optional[OrganizedPointCloud] = None,
                         points: Optional[np.ndarray] = None,
                         intrinsics: Optional[Intrinsics] = None,
                         image_size: Optional[Tuple[int, int]] = None) -> ProjectionMap:
    """Associate 2D patches with 3D points, by pixel layout or by camera projection.

    Organized route: point order is the row-major order of valid pixels.
    Intrinsics route: points are projected with round-to-nearest; points
    outside the image or behind the camera belong to no patch.
    """
    if organized is not None:
        height, width = organized.shape
        rows, cols = np.nonzero(organized.valid_mask)
        cloud = organized.unorganized()
        point_patch = _patch_of_pixel(rows, cols, grid_side, height, width)
    elif points is not None and intrinsics is not None and image_size is not None:
        height, width = int(image_size[0]), int(image_size[1])
        cloud = np.asarray(points, dtype=np.float64)
        point_patch = np.full(len(cloud), -1, dtype=np.int64)
        rows, cols, inside = project_points(cloud, intrinsics, (height, width))
        point_patch[inside] = _patch_of_pixel(rows[inside], cols[inside], grid_side, height, width)
    else:
        raise NoAlignmentRoute("Projection needs an organized XYZ map or intrinsics with an image size")

    centers = np.asarray(group_centers, dtype=np.float64)
    point_owner = nearest_center(cloud, centers) if len(cloud) else np.zeros(0, dtype=np.int64)

    num_patches = grid_side * grid_side
    order = np.argsort(point_patch, kind="stable")
    bounds = np.searchsorted(point_patch[order], np.arange(num_patches + 1))
    patch_points = [order[bounds[m]:bounds[m + 1]] for m in range(num_patches)]

    return ProjectionMap(
        patch_points=patch_points,
        point_patch=point_patch.astype(np.int64),
        point_owner=point_owner,
        grid_side=grid_side,
        num_groups=len(centers),
    )


def alignment_matrices(projection: ProjectionMap) -> Tuple[np.ndarray, np.ndarray]:
    """Averaging matrices (M_I x M_P, M_P x M_I) between patch and group scores.

    Row m of the first averages owning-group scores over the points of
    patch m; row g of the second averages patch scores over the projected
    points group g owns. Rows without points are zero.
    """
    num_patches = projection.grid_side * projection.grid_side
    counts = np.zeros((num_patches, projection.num_groups))
    projected = projection.point_patch >= 0
    np.add.at(counts, (projection.point_patch[projected], projection.point_owner[projected]), 1.0)

    patch_totals = counts.sum(axis=1, keepdims=True)
    group_totals = counts.sum(axis=0, keepdims=True)
    to_image = np.divide(counts, patch_totals, out=np.zeros_like(counts), where=patch_totals > 0)
    to_cloud = np.divide(counts, group_totals, out=np.zeros_like(counts), where=group_totals > 0).T
    return to_image, to_cloud


def cae_align(projection: ProjectionMap, group_scores: np.ndarray) -> np.ndarray:
    """Per-2D-patch mean of owning-group scores; 0 for patches without points.

    group_scores may carry trailing axes (e.g. one column per gallery sample).
    """
    to_image, _ = alignment_matrices(projection)
    return np.tensordot(to_image, np.asarray(group_scores, dtype=np.float64), axes=(1, 0))


def cae_align_to_groups(projection: ProjectionMap, patch_scores: np.ndarray) -> np.ndarray:
    """Per-group mean of 2D patch scores over the projected points each group owns."""
    _, to_cloud = alignment_matrices(projection)
    return np.tensordot(to_cloud, np.asarray(patch_scores, dtype=np.float64), axes=(1, 0))


def _rescale_array(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    src_min = source.min(axis=-1, keepdims=True)
    src_max = source.max(axis=-1, keepdims=True)
    tgt_min = target.min(axis=-1, keepdims=True)
    tgt_max = target.max(axis=-1, keepdims=True)
    span = src_max - src_min
    unit = np.divide(source - src_min, span, out=np.zeros_like(source), where=span > 0)
    return tgt_min + unit * (tgt_max - tgt_min)


def rescale_to_range(source: ScoresLike, target: ScoresLike) -> ScoresLike:
    """Affine map of source onto [min(target), max(target)], along the last axis.

    A constant source maps every element to min(target).
    """
    if isinstance(source, ScoreSet):
        tgt = target.scores if isinstance(target, ScoreSet) else np.asarray(target, dtype=np.float64)
        if source.scores.size == 0 or tgt.size == 0:
            raise EmptyScoreSet("Cannot rescale an empty score set")
        return ScoreSet(scores=_rescale_array(source.scores, tgt), source_ids=list(source.source_ids))

    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target.scores if isinstance(target, ScoreSet) else target, dtype=np.float64)
    if source.shape[-1] == 0 or target.shape[-1] == 0:
        raise EmptyScoreSet("Cannot rescale an empty score set")
    return _rescale_array(source, target)


def confidence_weight(aligned: np.ndarray, clamp: bool = True) -> np.ndarray:
    """1 - population std of the aligned scores along the last axis, clamped to [0, 1]."""
    weight = 1.0 - np.asarray(aligned, dtype=np.float64).std(axis=-1, keepdims=True)
    return np.clip(weight, 0.0, 1.0) if clamp else weight


def cae_enhance(a_2d: ScoresLike, aligned: ScoresLike, clamp: bool = True,
                weighted: bool = True) -> ScoresLike:
    """a + lambda * max(aligned, a), with lambda from the spread of the aligned set.

    With weighted=False lambda is 1 for every patch.
    """
    if isinstance(a_2d, ScoreSet):
        if not isinstance(aligned, ScoreSet) or len(aligned) != len(a_2d):
            raise LengthMismatch("CAE needs aligned score sets of equal length")
        if list(aligned.source_ids) != list(a_2d.source_ids):
            raise LengthMismatch("CAE score sets must be aligned by gallery sample id")
        enhanced = cae_enhance(a_2d.scores, aligned.scores, clamp=clamp, weighted=weighted)
        return ScoreSet(scores=enhanced, source_ids=list(a_2d.source_ids))

    base = np.asarray(a_2d, dtype=np.float64)
    other = np.asarray(aligned, dtype=np.float64)
    if base.shape != other.shape:
        raise LengthMismatch(f"CAE inputs differ in shape: {base.shape} vs {other.shape}")
    weight = confidence_weight(other, clamp=clamp) if weighted else 1.0
    return base + weight * np.maximum(other, base)


# Sample scoring

@dataclass
class ScoringDataset:
    """Aggregated stacks of a gallery, keyed by sample id, plus alignment maps."""
    sample_ids: List[str]
    image_stacks: Dict[str, PatchFeatureStack] = field(default_factory=dict)
    cloud_stacks: Dict[str, PatchFeatureStack] = field(default_factory=dict)
    projections: Dict[str, ProjectionMap] = field(default_factory=dict)


def _enhance_pair(image_scores: MutualScores, cloud_scores: MutualScores,
                  projection: ProjectionMap, clamp: bool,
                  weighted: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """CAE of both modalities' S x M x J score arrays from each other's raw scores."""
    to_image, to_cloud = alignment_matrices(projection)
    image_out = np.empty_like(image_scores.values)
    cloud_out = np.empty_like(cloud_scores.values)
    for s in range(image_scores.num_stages):
        a_img = image_scores.values[s]
        a_pc = cloud_scores.values[s]
        img_aligned = rescale_to_range(to_image @ a_pc, a_img)
        pc_aligned = rescale_to_range(to_cloud @ a_img, a_pc)
        image_out[s] = cae_enhance(a_img, img_aligned, clamp=clamp, weighted=weighted)
        cloud_out[s] = cae_enhance(a_pc, pc_aligned, clamp=clamp, weighted=weighted)
    return image_out, cloud_out


def score_sample(query_id: str, dataset: ScoringDataset, config: Dict) -> Dict[str, np.ndarray]:
    """Patch scores of one sample per modality, using every other sample as gallery."""
    scoring = config["scoring"]
    gallery_ids = [sid for sid in dataset.sample_ids if sid != query_id]
    if not gallery_ids:
        raise EmptyScoreSet(f"Sample {query_id} has no gallery to be scored against")

    raw: Dict[str, MutualScores] = {}
    if query_id in dataset.image_stacks:
        raw[MODALITY_IMAGE] = mutual_score(
            dataset.image_stacks[query_id], [dataset.image_stacks[j] for j in gallery_ids], gallery_ids)
    if query_id in dataset.cloud_stacks:
        raw[MODALITY_CLOUD] = mutual_score(
            dataset.cloud_stacks[query_id], [dataset.cloud_stacks[j] for j in gallery_ids], gallery_ids)

    values = {modality: scores.values for modality, scores in raw.items()}
    if scoring.get("cae_enabled", True) and len(raw) == 2:
        projection = dataset.projections.get(query_id)
        if projection is None:
            logger.warning(f"No projection map for {query_id}; cross-modal enhancement skipped")
        elif raw[MODALITY_IMAGE].num_stages != raw[MODALITY_CLOUD].num_stages:
            logger.warning(f"Stage counts differ for {query_id}; cross-modal enhancement skipped")
        else:
            values[MODALITY_IMAGE], values[MODALITY_CLOUD] = _enhance_pair(
                raw[MODALITY_IMAGE], raw[MODALITY_CLOUD], projection,
                clamp=scoring.get("lambda_clamp", True),
                weighted=scoring.get("confidence_weight", True))

    percent = scoring["interval_percent"]
    return {modality: fuse_stages(interval_average_array(v, percent)) for modality, v in values.items()}


def partition_subsets(sample_ids: Sequence[str], g: int, seed: int = 0) -> List[List[str]]:
    """Split samples into g near-equal random subsets; each keeps dataset order."""
    sample_ids = list(sample_ids)
    if g < 1 or g > len(sample_ids):
        raise TooManySubsets(f"Cannot split {len(sample_ids)} samples into {g} subsets")
    permutation = np.random.Generator(np.random.Philox(seed)).permutation(len(sample_ids))
    subsets = []
    for part in np.array_split(permutation, g):
        subsets.append([sample_ids[i] for i in sorted(part)])
    return subsets
