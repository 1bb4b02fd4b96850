"""
Point-cloud sampling, KNN grouping, curvature and iterative point grouping.

Every selection breaks distance ties by the smallest point index, so the
same cloud always yields the same groups.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from .errors import CountExceedsCloud, DegenerateNeighborhood, InvalidConfig, ShapeMismatch
from .types import GroupSet, PointGroup

logger = logging.getLogger(__name__)

# Centers per batch when computing KNN groups
KNN_CHUNK = 64


def _as_cloud(cloud: np.ndarray) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise ShapeMismatch(f"Point cloud must be M x 3 with M >= 1, got {cloud.shape}")
    return cloud


def _distances(cloud: np.ndarray, point: np.ndarray) -> np.ndarray:
    return np.sqrt(((cloud - point) ** 2).sum(axis=1))


def default_seed_index(cloud: np.ndarray) -> int:
    """Index of the lexicographically smallest (x, y, z) point."""
    cloud = _as_cloud(cloud)
    # lexsort keys are given last-primary; it is stable so equal points keep index order
    return int(np.lexsort((cloud[:, 2], cloud[:, 1], cloud[:, 0]))[0])


def farthest_point_sample(cloud: np.ndarray, m: int, seed_index: Optional[int] = None) -> List[int]:
    """Greedy farthest point sampling starting at seed_index."""
    cloud = _as_cloud(cloud)
    if m < 1 or m > len(cloud):
        raise CountExceedsCloud(f"Cannot sample {m} centers from {len(cloud)} points")
    if seed_index is None:
        seed_index = default_seed_index(cloud)

    chosen = [int(seed_index)]
    min_dist = _distances(cloud, cloud[seed_index])
    min_dist[seed_index] = -1.0

    for _ in range(m - 1):
        # argmax returns the first maximum, i.e. the smallest index on ties
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        np.minimum(min_dist, _distances(cloud, cloud[nxt]), out=min_dist)
        min_dist[chosen] = -1.0

    return chosen


def smallest_k(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ties by index."""
    if k >= len(dist):
        return np.argsort(dist, kind="stable")
    kth = np.partition(dist, k - 1)[k - 1]
    candidates = np.flatnonzero(dist <= kth)
    order = np.lexsort((candidates, dist[candidates]))
    return candidates[order[:k]]


def nearest_with_self(dist: np.ndarray, k: int, own_index: int) -> np.ndarray:
    """The k smallest entries with own_index always first, even next to duplicate points."""
    dist = np.array(dist, dtype=np.float64)
    dist[own_index] = -np.inf
    return smallest_k(dist, k)


def knn_group(cloud: np.ndarray, center_index: int, k: int) -> List[int]:
    """The k nearest points of a center, the center itself first."""
    cloud = _as_cloud(cloud)
    if k < 1 or k > len(cloud):
        raise CountExceedsCloud(f"Cannot group {k} points from {len(cloud)}")
    dist = _distances(cloud, cloud[center_index])
    return [int(i) for i in nearest_with_self(dist, k, center_index)]


def knn_batch(cloud: np.ndarray, center_indices: Sequence[int], k: int) -> List[np.ndarray]:
    """KNN groups for many centers, computed in chunks of KNN_CHUNK."""
    cloud = _as_cloud(cloud)
    if k < 1 or k > len(cloud):
        raise CountExceedsCloud(f"Cannot group {k} points from {len(cloud)}")

    groups = []
    centers = np.asarray(center_indices, dtype=np.int64)
    for start in range(0, len(centers), KNN_CHUNK):
        chunk = centers[start:start + KNN_CHUNK]
        diff = cloud[None, :, :] - cloud[chunk][:, None, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        for center, row in zip(chunk, dist):
            groups.append(nearest_with_self(row, k, int(center)))
    return groups


def surface_variation_of(points: np.ndarray) -> float:
    """Smallest covariance eigenvalue over the eigenvalue sum, in [0, 1/3]."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    eigvals = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = float(eigvals.sum())
    if total <= 0.0:
        logger.debug("Degenerate neighborhood: all points coincide")
        return 0.0
    return float(eigvals[0] / total)


def surface_variation(cloud: np.ndarray, center_index: int, k_nbr: int) -> float:
    """Surface variation of the k_nbr-neighborhood of a center point."""
    if k_nbr < 4:
        raise DegenerateNeighborhood(f"Curvature needs at least 4 neighbors, got {k_nbr}")
    members = knn_group(cloud, center_index, k_nbr)
    return surface_variation_of(np.asarray(cloud, dtype=np.float64)[members])


def ipg_regroup(cloud: np.ndarray, center_index: int, group_size: int, k_iter: int,
                curvature: float = 0.0) -> PointGroup:
    """Grow a group from its center's k_iter nearest points, k_iter points at a time.

    Each step adds the non-members closest to any current member; the
    last step is truncated so the group holds exactly group_size points.
    """
    cloud = _as_cloud(cloud)
    if group_size > len(cloud):
        raise CountExceedsCloud(f"Cannot group {group_size} points from {len(cloud)}")
    if not (1 <= k_iter < group_size):
        raise InvalidConfig(f"k_iter must satisfy 1 <= k_iter < group_size, got {k_iter} and {group_size}")

    dist_center = _distances(cloud, cloud[center_index])
    members = [int(i) for i in nearest_with_self(dist_center, k_iter, center_index)]

    # min distance from every point to the group
    to_group = np.full(len(cloud), np.inf)
    for idx in members:
        np.minimum(to_group, _distances(cloud, cloud[idx]), out=to_group)
    is_member = np.zeros(len(cloud), dtype=bool)
    is_member[members] = True

    while len(members) < group_size:
        n_add = min(k_iter, group_size - len(members))
        candidates = np.where(is_member, np.inf, to_group)
        added = smallest_k(candidates, n_add)
        members.extend(int(i) for i in added)
        is_member[added] = True
        for idx in added:
            np.minimum(to_group, _distances(cloud, cloud[idx]), out=to_group)

    return PointGroup(
        center_index=int(center_index),
        member_indices=np.asarray(members, dtype=np.int64),
        curvature=float(curvature),
        regrouped=True,
    )


def build_groups(cloud: np.ndarray, num_groups: int, group_size: int, k_iter: int,
                 curvature_threshold: float, ipg_enabled: bool = True,
                 seed_index: Optional[int] = None, workers: int = 1) -> GroupSet:
    """FPS centers, KNN groups, curvature gate and IPG regrouping of flagged groups."""
    cloud = _as_cloud(cloud)
    if num_groups > len(cloud):
        raise CountExceedsCloud(f"Cannot pick {num_groups} groups from {len(cloud)} points")
    if group_size > len(cloud):
        raise CountExceedsCloud(f"Cannot group {group_size} points from {len(cloud)}")

    centers = farthest_point_sample(cloud, num_groups, seed_index)
    member_lists = knn_batch(cloud, centers, group_size)

    def _curvature(members: np.ndarray) -> float:
        return surface_variation_of(cloud[members]) if len(members) >= 4 else 0.0

    def _finish(i: int) -> PointGroup:
        members = member_lists[i]
        curvature = _curvature(members)
        if ipg_enabled and curvature > curvature_threshold:
            return ipg_regroup(cloud, centers[i], group_size, k_iter, curvature=curvature)
        return PointGroup(center_index=centers[i], member_indices=members,
                          curvature=curvature, regrouped=False)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(_finish, range(num_groups)))
    else:
        groups = [_finish(i) for i in range(num_groups)]

    regrouped = sum(g.regrouped for g in groups)
    logger.debug(f"Built {num_groups} groups of {group_size} points, {regrouped} regrouped")

    return GroupSet(
        groups=groups,
        num_groups=num_groups,
        group_size=group_size,
        k_iter=k_iter,
        curvature_threshold=curvature_threshold,
    )
