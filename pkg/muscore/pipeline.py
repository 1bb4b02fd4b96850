"""
End-to-end zero-shot scoring of a dataset.

Stages run in order with a barrier between them: grouping, aggregation,
scoring, maps, rescon. Within a stage samples are processed by a thread
pool whose ordered map keeps results independent of the worker count.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .anomaly_maps import classify, fuse_maps, idw_interpolate, point_map, render_3d_to_pixels, upsample_2d
from .cache import ArtifactCache
from .config import config_echo, validate_config
from .errors import CountExceedsCloud, InvalidConfig, ShapeMismatch, StageCountTooSmall, ValidationFailed
from .geometry3d import build_groups
from .ids import array_sha256
from .msm import ScoringDataset, build_projection_map, partition_subsets, score_sample
from .paths import ensure_run_directories, get_absolute_path, map_path, png_path, point_map_path
from .plot import write_heatmap
from .rescon import build_graph, combine_salient, diagnostics, rescore, salient_feature
from .snamd import aggregate_stack
from .synth_bench import geometric_descriptor, stage_member_count
from .tensor_io import load_tensor, load_xyz_map, save_tensor, validate_dataset
from .types import (
    MODALITY_CLOUD,
    MODALITY_IMAGE,
    AnomalyMap,
    DatasetManifest,
    GroupSet,
    OrganizedPointCloud,
    PatchFeatureStack,
    ProjectionMap,
    SampleManifest,
    StageTimings,
)

logger = logging.getLogger(__name__)


@dataclass
class LoadedSample:
    """Raw inputs of one sample for the modalities in use."""
    manifest: SampleManifest
    image_stages: Optional[List[np.ndarray]] = None
    organized: Optional[OrganizedPointCloud] = None
    points: Optional[np.ndarray] = None
    cloud_stages: Optional[List[np.ndarray]] = None

    @property
    def sample_id(self) -> str:
        return self.manifest.sample_id


@dataclass
class PreparedSample:
    """A sample after grouping and aggregation."""
    loaded: LoadedSample
    groups: Optional[GroupSet] = None
    image_stack: Optional[PatchFeatureStack] = None
    cloud_stack: Optional[PatchFeatureStack] = None
    projection: Optional[ProjectionMap] = None

    @property
    def sample_id(self) -> str:
        return self.loaded.sample_id


@dataclass
class SampleResult:
    sample_id: str
    subset: int
    patch_scores: Dict[str, np.ndarray]
    anomaly_map: AnomalyMap
    point_scores: Optional[np.ndarray] = None
    score: float = 0.0
    score_rescored: float = 0.0
    isolated: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "subset": self.subset,
            "score": self.score,
            "score_rescored": self.score_rescored,
            "map_space": self.anomaly_map.space,
            "isolated": self.isolated,
        }


@dataclass
class RunResult:
    dataset: str
    modality: str
    samples: List[SampleResult]
    subsets: List[List[str]]
    timings: StageTimings
    rescon: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    cache_stats: Dict[str, Any] = field(default_factory=dict)

    def by_id(self) -> Dict[str, SampleResult]:
        return {r.sample_id: r for r in self.samples}

    def summary(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset,
            "modality": self.modality,
            "num_samples": len(self.samples),
            "subsets": self.subsets,
            "timings": self.timings.to_dict(),
            "cache": self.cache_stats,
            "config": config_echo(self.config),
        }


def _pool_map(fn: Callable, items: Sequence, workers: int, progress: bool, desc: str) -> List:
    """Ordered map over items, threaded when workers > 1."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not progress))
    return [fn(item) for item in tqdm(items, desc=desc, disable=not progress)]


def modalities_in_use(config: Dict[str, Any]) -> Tuple[bool, bool]:
    modality = config["run"]["modality"]
    return modality in ("2d", "multimodal"), modality in ("3d", "multimodal")


def _check_modalities(samples: List[SampleManifest], use_image: bool, use_cloud: bool) -> Tuple[bool, bool]:
    """Narrow the requested modalities to those every sample provides."""
    has_image = [s.has_image for s in samples]
    has_cloud = [s.has_cloud for s in samples]
    if use_image and any(has_image) and not all(has_image):
        raise InvalidConfig("Some samples lack image features; every sample must share the same modalities")
    if use_cloud and any(has_cloud) and not all(has_cloud):
        raise InvalidConfig("Some samples lack a point cloud; every sample must share the same modalities")
    use_image = use_image and all(has_image)
    use_cloud = use_cloud and all(has_cloud)
    if not use_image and not use_cloud:
        raise InvalidConfig("The selected modality is not available in this dataset")
    return use_image, use_cloud


def _check_subsets(num_samples: int, g: int) -> None:
    """Every subset needs at least one other sample to score against."""
    if num_samples // g < 2:
        raise InvalidConfig(f"{num_samples} samples cannot form {g} subsets of at least 2 samples each; "
                            f"use subsets.g <= {max(num_samples // 2, 1)}")


def load_sample(manifest: SampleManifest, dataset_dir: Path, config: Dict[str, Any],
                use_image: bool = True, use_cloud: bool = True) -> LoadedSample:
    """Read a sample's feature tensors and point cloud."""
    loaded = LoadedSample(manifest=manifest)
    if use_image and manifest.has_image:
        loaded.image_stages = [
            load_tensor(get_absolute_path(p, dataset_dir)).data.astype(np.float64)
            for p in manifest.image_feature_paths
        ]
    if use_cloud and manifest.has_cloud:
        cloud_path = get_absolute_path(manifest.cloud_path, dataset_dir)
        if manifest.xyz_map_shape is not None:
            loaded.organized = load_xyz_map(cloud_path, manifest.xyz_map_shape)
            loaded.points = loaded.organized.unorganized()
        else:
            loaded.points = load_tensor(cloud_path).data.astype(np.float64)
        if loaded.points.shape[0] == 0:
            raise CountExceedsCloud(f"Sample {manifest.sample_id} has an empty point cloud")
        if manifest.cloud_feature_paths:
            loaded.cloud_stages = [
                load_tensor(get_absolute_path(p, dataset_dir)).data.astype(np.float64)
                for p in manifest.cloud_feature_paths
            ]
    return loaded


def descriptor_stages(groups: GroupSet, points: np.ndarray, config: Dict[str, Any]) -> List[np.ndarray]:
    """Built-in 3D features: the geometric descriptor over nested member prefixes per stage."""
    desc = config["descriptor"]
    num_stages = desc["stages"]
    stages = []
    for s in range(num_stages):
        count = stage_member_count(groups.group_size, s, num_stages)
        stages.append(np.stack([
            geometric_descriptor(g, points, radius=desc["radius"], bins=desc["bins"], num_members=count)
            for g in groups.groups
        ]))
    return stages


def _round_f32(stages: List[np.ndarray]) -> List[np.ndarray]:
    # aggregated stacks are kept at the cache's storage precision
    return [np.asarray(s, dtype=np.float32).astype(np.float64) for s in stages]


class Pipeline:
    """Runs every stage for one dataset under one effective configuration."""

    def __init__(self, config: Dict[str, Any], cache: Optional[ArtifactCache] = None):
        if not validate_config(config):
            raise InvalidConfig("Configuration failed validation; see log for details")
        self.config = config
        run = config["run"]
        self.workers = int(run["workers"])
        self.progress = bool(run.get("progress", True))
        self.cache = cache or ArtifactCache(config["paths"]["cache"], enabled=bool(run.get("cache", True)))

    # grouping

    def _group(self, loaded: LoadedSample) -> PreparedSample:
        prepared = PreparedSample(loaded=loaded)
        if loaded.points is None:
            return prepared

        grouping = self.config["grouping"]
        params = {k: grouping[k] for k in ("num_groups", "group_size", "k_iter",
                                            "curvature_threshold", "ipg_enabled")}
        key = self.cache.key(array_sha256(loaded.points), params=params)
        groups = self.cache.get_groups(key)
        if groups is None:
            groups = build_groups(
                loaded.points,
                num_groups=grouping["num_groups"],
                group_size=grouping["group_size"],
                k_iter=grouping["k_iter"],
                curvature_threshold=grouping["curvature_threshold"],
                ipg_enabled=grouping["ipg_enabled"],
            )
            self.cache.put_groups(key, groups)
        prepared.groups = groups
        return prepared

    # aggregation

    def _aggregate(self, stack: PatchFeatureStack, kind: str) -> PatchFeatureStack:
        aggregation = self.config["aggregation"]
        params = {"kind": kind, "degrees": list(aggregation["degrees"]), "pooling": aggregation["pooling"]}
        parts = [array_sha256(s) for s in stack.stages]
        if stack.group_centers is not None:
            parts += [array_sha256(stack.group_centers), array_sha256(stack.high_curvature_flags)]
        key = self.cache.key(*parts, params=params)

        stages = self.cache.get_stages(key, stack.num_stages)
        if stages is None:
            aggregated = aggregate_stack(stack, aggregation["degrees"], pooling=aggregation["pooling"])
            stages = _round_f32(aggregated.stages)
            self.cache.put_stages(key, stages)
        return stack.with_stages(stages)

    def _prepare(self, prepared: PreparedSample) -> PreparedSample:
        loaded = prepared.loaded
        if loaded.image_stages is not None:
            num_patches = loaded.image_stages[0].shape[0]
            grid_side = int(round(math.sqrt(num_patches)))
            raw = PatchFeatureStack(modality=MODALITY_IMAGE, stages=loaded.image_stages, grid_side=grid_side)
            prepared.image_stack = self._aggregate(raw, "image")

        if prepared.groups is not None:
            groups = prepared.groups
            if loaded.cloud_stages is not None:
                stages = loaded.cloud_stages
                if any(s.shape[0] != groups.num_groups for s in stages):
                    raise ShapeMismatch(f"Cloud features of {loaded.sample_id} must have one row per group")
            else:
                stages = descriptor_stages(groups, loaded.points, self.config)
            raw = PatchFeatureStack(
                modality=MODALITY_CLOUD,
                stages=stages,
                group_centers=groups.centers(loaded.points),
                high_curvature_flags=groups.high_curvature_flags(),
            )
            prepared.cloud_stack = self._aggregate(raw, "cloud")

        if prepared.image_stack is not None and prepared.cloud_stack is not None:
            manifest = loaded.manifest
            prepared.projection = build_projection_map(
                prepared.image_stack.grid_side,
                prepared.cloud_stack.group_centers,
                organized=loaded.organized,
                points=loaded.points,
                intrinsics=manifest.intrinsics,
                image_size=manifest.image_size,
            )
        return prepared

    # maps

    def _map_size(self, prepared: PreparedSample) -> Tuple[int, int]:
        manifest = prepared.loaded.manifest
        if manifest.image_size is not None:
            return int(manifest.image_size[0]), int(manifest.image_size[1])
        if manifest.xyz_map_shape is not None:
            return int(manifest.xyz_map_shape[0]), int(manifest.xyz_map_shape[1])
        side = prepared.image_stack.grid_side
        return side, side

    def _build_maps(self, prepared: PreparedSample, patch_scores: Dict[str, np.ndarray]
                    ) -> Tuple[AnomalyMap, Optional[np.ndarray]]:
        maps_cfg = self.config["maps"]
        loaded = prepared.loaded
        manifest = loaded.manifest
        image_map = cloud_map = None
        point_scores = None

        if MODALITY_IMAGE in patch_scores:
            height, width = self._map_size(prepared)
            image_map = upsample_2d(patch_scores[MODALITY_IMAGE], prepared.image_stack.grid_side, height, width)

        if MODALITY_CLOUD in patch_scores:
            point_scores = idw_interpolate(
                prepared.cloud_stack.group_centers, patch_scores[MODALITY_CLOUD], loaded.points,
                power=maps_cfg["idw_power"], k_nn=maps_cfg["idw_neighbors"], eps=maps_cfg["idw_eps"])
            if loaded.organized is not None:
                cloud_map = render_3d_to_pixels(point_scores, organized=loaded.organized)
            elif manifest.intrinsics is not None and manifest.image_size is not None:
                cloud_map = render_3d_to_pixels(point_scores, points=loaded.points,
                                                intrinsics=manifest.intrinsics, image_size=manifest.image_size)
            else:
                cloud_map = point_map(point_scores)

        if image_map is not None and cloud_map is not None:
            return fuse_maps(image_map, cloud_map), point_scores
        return (image_map if image_map is not None else cloud_map), point_scores

    # rescon

    def _rescon(self, subset_ids: List[str], prepared: Dict[str, PreparedSample],
                results: Dict[str, SampleResult]) -> List[Dict[str, Any]]:
        rescon_cfg = self.config["rescon"]
        scores = np.array([results[sid].score for sid in subset_ids])

        def _skip(reason: str) -> List[Dict[str, Any]]:
            logger.warning(f"Re-scoring skipped: {reason}")
            for sid in subset_ids:
                results[sid].score_rescored = results[sid].score
            return []

        if not rescon_cfg["enabled"]:
            for sid in subset_ids:
                results[sid].score_rescored = results[sid].score
            return []
        if len(subset_ids) < 2:
            return _skip("subset has a single sample")

        features = []
        try:
            for sid in subset_ids:
                parts = []
                sample = prepared[sid]
                if sample.image_stack is not None:
                    parts.append(salient_feature(sample.image_stack, results[sid].patch_scores[MODALITY_IMAGE]))
                if sample.cloud_stack is not None:
                    parts.append(salient_feature(sample.cloud_stack, results[sid].patch_scores[MODALITY_CLOUD]))
                features.append(combine_salient(parts))
        except StageCountTooSmall as e:
            return _skip(str(e))

        window = int(rescon_cfg["window"])
        if window > len(subset_ids) - 1:
            logger.warning(f"RsCon window {window} clipped to {len(subset_ids) - 1} for a subset of "
                           f"{len(subset_ids)} samples")
            window = len(subset_ids) - 1

        graph = build_graph(np.stack(features), window, use_window_mask=rescon_cfg["window_mask"])
        result = rescore(scores, graph.weights, graph.mask)
        for i, sid in enumerate(subset_ids):
            results[sid].score_rescored = float(result.scores[i])
            results[sid].isolated = i in result.isolated
        return diagnostics(subset_ids, scores, result, graph)

    # driver

    def run(self, dataset: DatasetManifest) -> RunResult:
        """Score every sample of a dataset; raises ValidationFailed on a defective dataset."""
        report = validate_dataset(dataset.samples, dataset.root)
        if not report.ok:
            raise ValidationFailed(report)

        use_image, use_cloud = _check_modalities(dataset.samples, *modalities_in_use(self.config))
        _check_subsets(len(dataset.samples), self.config["subsets"]["g"])
        timings = StageTimings()
        sample_ids = [s.sample_id for s in dataset.samples]
        logger.info(f"Running {self.config['run']['modality']} on {len(sample_ids)} samples "
                    f"(image={use_image}, cloud={use_cloud}, workers={self.workers})")

        start = time.perf_counter()
        loaded = _pool_map(lambda s: load_sample(s, Path(dataset.root), self.config, use_image, use_cloud),
                           dataset.samples, self.workers, self.progress, "load")
        grouped = _pool_map(self._group, loaded, self.workers, self.progress, "grouping")
        timings.grouping = time.perf_counter() - start

        start = time.perf_counter()
        prepared_list = _pool_map(self._prepare, grouped, self.workers, self.progress, "aggregation")
        prepared = {p.sample_id: p for p in prepared_list}
        timings.aggregation = time.perf_counter() - start

        subsets_cfg = self.config["subsets"]
        subsets = partition_subsets(sample_ids, subsets_cfg["g"], subsets_cfg["seed"])
        cae = self.config["scoring"].get("cae_enabled", True)

        start = time.perf_counter()
        patch_scores: Dict[str, Dict[str, np.ndarray]] = {}
        subset_of: Dict[str, int] = {}
        for index, subset_ids in enumerate(subsets):
            scoring = ScoringDataset(
                sample_ids=subset_ids,
                image_stacks={sid: prepared[sid].image_stack for sid in subset_ids
                              if prepared[sid].image_stack is not None},
                cloud_stacks={sid: prepared[sid].cloud_stack for sid in subset_ids
                              if prepared[sid].cloud_stack is not None},
                projections={sid: prepared[sid].projection for sid in subset_ids
                             if cae and prepared[sid].projection is not None},
            )
            scored = _pool_map(lambda sid: score_sample(sid, scoring, self.config),
                               subset_ids, self.workers, self.progress, f"scoring subset {index}")
            for sid, scores in zip(subset_ids, scored):
                patch_scores[sid] = scores
                subset_of[sid] = index
        timings.scoring = time.perf_counter() - start

        start = time.perf_counter()
        built = _pool_map(lambda sid: self._build_maps(prepared[sid], patch_scores[sid]),
                          sample_ids, self.workers, self.progress, "maps")
        results: Dict[str, SampleResult] = {}
        for sid, (anomaly_map, point_scores) in zip(sample_ids, built):
            results[sid] = SampleResult(
                sample_id=sid,
                subset=subset_of[sid],
                patch_scores=patch_scores[sid],
                anomaly_map=anomaly_map,
                point_scores=point_scores,
                score=classify(anomaly_map),
            )
        timings.maps = time.perf_counter() - start

        start = time.perf_counter()
        records = []
        for subset_ids in subsets:
            records.extend(self._rescon(subset_ids, prepared, results))
        timings.rescon = time.perf_counter() - start

        logger.info("Stage times: " + ", ".join(f"{k}={v:.2f}s" for k, v in timings.to_dict().items()))
        return RunResult(
            dataset=dataset.name,
            modality=self.config["run"]["modality"],
            samples=[results[sid] for sid in sample_ids],
            subsets=subsets,
            timings=timings,
            rescon=records,
            config=self.config,
            cache_stats=self.cache.get_stats(),
        )


def write_run(result: RunResult, output_dir: str, dataset_dir: Optional[str] = None,
              write_png: bool = False, colormap: str = "turbo") -> Dict[str, Path]:
    """Write maps, scores, RsCon diagnostics and the run summary."""
    paths = ensure_run_directories(output_dir, with_png=write_png)

    for sample in result.samples:
        save_tensor(map_path(output_dir, sample.sample_id), sample.anomaly_map.values.astype(np.float32))
        if sample.point_scores is not None:
            save_tensor(point_map_path(output_dir, sample.sample_id), sample.point_scores.astype(np.float32))
        if write_png and sample.anomaly_map.values.ndim == 2:
            write_heatmap(png_path(output_dir, sample.sample_id), sample.anomaly_map.values, mode=colormap)

    with open(paths["scores"], "w", encoding="utf-8") as f:
        json.dump({"samples": [s.to_dict() for s in result.samples]}, f, indent=2)
    with open(paths["rescon"], "w", encoding="utf-8") as f:
        json.dump({"samples": result.rescon}, f, indent=2)

    summary = result.summary()
    summary["dataset_dir"] = str(Path(dataset_dir).resolve()) if dataset_dir else None
    with open(paths["summary"], "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, default=str)

    logger.info(f"Run written to {paths['root']}")
    return paths


def run_pipeline(dataset: DatasetManifest, config: Dict[str, Any],
                 output_dir: Optional[str] = None) -> RunResult:
    """Run the full pipeline and, when output_dir is given, write its artifacts."""
    result = Pipeline(config).run(dataset)
    if output_dir:
        write_run(result, output_dir, dataset_dir=str(dataset.root),
                  write_png=config["run"].get("write_png", False),
                  colormap=config["run"].get("colormap", "turbo"))
    return result
