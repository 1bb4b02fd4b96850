"""
Dense anomaly maps from patch scores, modality fusion and sample scores.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyMap, NoAlignmentRoute, ShapeMismatch, SpaceMismatch
from .geometry3d import smallest_k
from .msm import project_points
from .types import SPACE_PIXEL, SPACE_POINT, AnomalyMap, Intrinsics, OrganizedPointCloud

logger = logging.getLogger(__name__)


def _corner_aligned(size: int, grid_side: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower source index, upper source index and weight for each output row or column."""
    if size == 1 or grid_side == 1:
        pos = np.zeros(size)
    else:
        pos = np.arange(size) * (grid_side - 1) / (size - 1)
    lower = np.floor(pos).astype(np.int64)
    upper = np.minimum(lower + 1, grid_side - 1)
    return lower, upper, pos - lower


def upsample_2d(patch_scores: np.ndarray, grid_side: int, height: int, width: int) -> AnomalyMap:
    """Reshape patch scores to the grid and upsample bilinearly with corner alignment."""
    scores = np.asarray(patch_scores, dtype=np.float64).ravel()
    if scores.size != grid_side * grid_side:
        raise ShapeMismatch(f"{scores.size} patch scores do not fill a {grid_side} x {grid_side} grid")
    if height < grid_side or width < grid_side:
        raise ShapeMismatch(f"Map {height} x {width} is smaller than the {grid_side} patch grid")

    grid = scores.reshape(grid_side, grid_side)
    y0, y1, wy = _corner_aligned(height, grid_side)
    x0, x1, wx = _corner_aligned(width, grid_side)

    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bottom = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    values = top * (1 - wy)[:, None] + bottom * wy[:, None]
    return AnomalyMap.create(SPACE_PIXEL, values)


def idw_interpolate(group_centers: np.ndarray, group_scores: np.ndarray, points: np.ndarray,
                    power: float = 2.0, k_nn: int = 3, eps: float = 1e-12,
                    chunk: int = 2048) -> np.ndarray:
    """Inverse-distance-weighted scores over the k_nn nearest group centers.

    A point that coincides with a center takes that center's score.
    """
    centers = np.asarray(group_centers, dtype=np.float64)
    scores = np.asarray(group_scores, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    k = min(k_nn, len(centers))

    result = np.empty(len(points))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        dist = np.sqrt(((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        nearest = np.stack([smallest_k(row, k) for row in dist])
        near_dist = np.take_along_axis(dist, nearest, axis=1)
        weights = 1.0 / (near_dist ** power + eps)
        values = (weights * scores[nearest]).sum(axis=1) / weights.sum(axis=1)
        exact = near_dist[:, 0] == 0.0
        values[exact] = scores[nearest[exact, 0]]
        result[start:start + len(block)] = values
    return result


def render_3d_to_pixels(point_scores: np.ndarray, organized: Optional[OrganizedPointCloud] = None,
                        points: Optional[np.ndarray] = None, intrinsics: Optional[Intrinsics] = None,
                        image_size: Optional[Tuple[int, int]] = None) -> AnomalyMap:
    """Place per-point scores on the pixel grid; pixels without a point are 0.

    With intrinsics several points can land on one pixel; it keeps the largest.
    """
    point_scores = np.asarray(point_scores, dtype=np.float64)
    if organized is not None:
        if point_scores.size != organized.num_valid:
            raise ShapeMismatch(f"{point_scores.size} point scores for {organized.num_valid} valid pixels")
        values = np.zeros(organized.shape)
        values[organized.valid_mask] = point_scores
        return AnomalyMap.create(SPACE_PIXEL, values)

    if points is not None and intrinsics is not None and image_size is not None:
        rows, cols, inside = project_points(points, intrinsics, image_size)
        values = np.zeros((int(image_size[0]), int(image_size[1])))
        np.maximum.at(values, (rows[inside], cols[inside]), point_scores[inside])
        return AnomalyMap.create(SPACE_PIXEL, values)

    raise NoAlignmentRoute("Rendering to pixels needs an organized XYZ map or intrinsics with an image size")


def point_map(point_scores: np.ndarray) -> AnomalyMap:
    return AnomalyMap.create(SPACE_POINT, point_scores)


def fuse_maps(a_img: AnomalyMap, a_cloud: AnomalyMap) -> AnomalyMap:
    """Elementwise sum of two maps of the same space and shape."""
    if a_img.space != a_cloud.space or a_img.values.shape != a_cloud.values.shape:
        raise SpaceMismatch(
            f"Cannot fuse {a_img.space} {a_img.values.shape} with {a_cloud.space} {a_cloud.values.shape}")
    return AnomalyMap.create(a_img.space, a_img.values + a_cloud.values)


def classify(anomaly_map: AnomalyMap) -> float:
    """Sample-level score: the maximum of the map."""
    if anomaly_map.values.size == 0:
        raise EmptyMap("Cannot classify an empty anomaly map")
    return float(anomaly_map.values.max())
