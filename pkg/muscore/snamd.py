"""
Similarity-weighted multi-degree neighborhood aggregation of patch features.

Each patch feature is replaced by a pooled feature of its neighborhood at
every degree r (an r x r window on the 2D grid, the r nearest group centers
in 3D); the per-degree results are fused by an elementwise mean.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np

from .errors import DegreeExceedsGroups, EvenDegree, InvalidConfig
from .geometry3d import nearest_with_self
from .types import MODALITY_IMAGE, PatchFeatureStack

logger = logging.getLogger(__name__)

POOL_SIMILARITY = "similarity"
POOL_AVERAGE = "average"


def neighborhood_2d(grid_side: int, m: int, r: int) -> List[int]:
    """Row-major indices of the r x r window centered at patch m, clipped at borders."""
    if r < 1 or r % 2 == 0:
        raise EvenDegree(f"2D aggregation degree must be odd and positive, got {r}")
    half = r // 2
    row, col = divmod(m, grid_side)
    rows = range(max(0, row - half), min(grid_side, row + half + 1))
    cols = range(max(0, col - half), min(grid_side, col + half + 1))
    return [y * grid_side + x for y in rows for x in cols]


def neighborhood_3d(group_centers: np.ndarray, m: int, r: int) -> List[int]:
    """The r group centers nearest to center m, itself included."""
    centers = np.asarray(group_centers, dtype=np.float64)
    if r < 1 or r > len(centers):
        raise DegreeExceedsGroups(f"Degree {r} exceeds the {len(centers)} available groups")
    dist = np.sqrt(((centers - centers[m]) ** 2).sum(axis=1))
    return [int(i) for i in nearest_with_self(dist, r, m)]


def swpool(center_feature: np.ndarray, neighbor_features: np.ndarray) -> np.ndarray:
    """Mean of neighbor features weighted by exp(-distance to the center feature)."""
    center = np.asarray(center_feature, dtype=np.float64)
    neighbors = np.atleast_2d(np.asarray(neighbor_features, dtype=np.float64))
    weights = np.exp(-np.linalg.norm(neighbors - center, axis=1))
    return (weights[:, None] * neighbors).mean(axis=0)


def average_pool(neighbor_features: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(neighbor_features, dtype=np.float64)).mean(axis=0)


def _pool_grid(features: np.ndarray, grid_side: int, r: int, pooling: str) -> np.ndarray:
    """Pool every patch of a grid over its clipped r x r window."""
    channels = features.shape[1]
    grid = features.reshape(grid_side, grid_side, channels)
    half = r // 2
    total = np.zeros_like(grid)
    count = np.zeros((grid_side, grid_side, 1))

    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            # output window [y0:y1, x0:x1] reads neighbors at offset (dy, dx)
            y0, y1 = max(0, -dy), min(grid_side, grid_side - dy)
            x0, x1 = max(0, -dx), min(grid_side, grid_side - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            neighbor = grid[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            if pooling == POOL_SIMILARITY:
                center = grid[y0:y1, x0:x1]
                weight = np.exp(-np.linalg.norm(neighbor - center, axis=2, keepdims=True))
                total[y0:y1, x0:x1] += weight * neighbor
            else:
                total[y0:y1, x0:x1] += neighbor
            count[y0:y1, x0:x1] += 1

    return (total / count).reshape(-1, channels)


def _nearest_groups(centers: np.ndarray, r: int) -> np.ndarray:
    """M_P x r neighbor indices, nearest first."""
    if r > len(centers):
        raise DegreeExceedsGroups(f"Degree {r} exceeds the {len(centers)} available groups")
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    return np.stack([nearest_with_self(row, r, m) for m, row in enumerate(dist)])


def _pool_groups(features: np.ndarray, neighbors: np.ndarray, pooling: str) -> np.ndarray:
    gathered = features[neighbors]  # M_P x r x C
    if pooling == POOL_SIMILARITY:
        weight = np.exp(-np.linalg.norm(gathered - features[:, None, :], axis=2))
        return (weight[:, :, None] * gathered).mean(axis=1)
    return gathered.mean(axis=1)


def _check_degrees(degrees: Sequence[int]) -> List[int]:
    degrees = [int(r) for r in degrees]
    if not degrees or degrees[0] != 1 or degrees != sorted(set(degrees)):
        raise InvalidConfig(f"Degrees must be ascending, unique and start at 1, got {degrees}")
    return degrees


def aggregate_stack(stack: PatchFeatureStack, degrees: Sequence[int],
                    pooling: str = POOL_SIMILARITY, workers: int = 1) -> PatchFeatureStack:
    """Aggregate every stage of a stack at each degree and fuse the degrees by their mean.

    Flagged high-curvature 3D patches only use r=1, whose result is the
    patch's own feature, for every degree.
    """
    degrees = _check_degrees(degrees)
    if pooling not in (POOL_SIMILARITY, POOL_AVERAGE):
        raise InvalidConfig(f"Unknown pooling: {pooling}")

    if stack.modality == MODALITY_IMAGE:
        for r in degrees:
            if r % 2 == 0:
                raise EvenDegree(f"2D aggregation degree must be odd, got {r}")
        neighbor_sets = None
    else:
        neighbor_sets = {r: _nearest_groups(stack.group_centers, r) for r in degrees if r > 1}
        flags = np.asarray(stack.high_curvature_flags, dtype=bool)

    def _aggregate(features: np.ndarray) -> np.ndarray:
        pooled = []
        for r in degrees:
            if r == 1:
                # self-only window; both pooling rules return the feature itself
                pooled.append(features.copy())
            elif neighbor_sets is None:
                pooled.append(_pool_grid(features, stack.grid_side, r, pooling))
            else:
                result = _pool_groups(features, neighbor_sets[r], pooling)
                result[flags] = features[flags]
                pooled.append(result)
        return np.mean(pooled, axis=0)

    if workers > 1 and stack.num_stages > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stages = list(pool.map(_aggregate, stack.stages))
    else:
        stages = [_aggregate(stage) for stage in stack.stages]

    logger.debug(f"Aggregated {stack.modality} stack of {stack.num_patches} patches "
                 f"at degrees {degrees} with {pooling} pooling")
    return stack.with_stages(stages)
