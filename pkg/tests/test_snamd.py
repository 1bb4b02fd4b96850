"""
Tests for neighborhoods, similarity-weighted pooling and multi-degree aggregation.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from muscore.errors import DegreeExceedsGroups, EvenDegree, InvalidConfig
from muscore.snamd import (
    POOL_AVERAGE,
    POOL_SIMILARITY,
    aggregate_stack,
    average_pool,
    neighborhood_2d,
    neighborhood_3d,
    swpool,
)
from muscore.types import MODALITY_CLOUD, MODALITY_IMAGE, PatchFeatureStack


def _image_stack(features, grid_side):
    return PatchFeatureStack(modality=MODALITY_IMAGE, stages=[features], grid_side=grid_side)


def swpool_oracle(center, neighbors):
    """Scalar loops: weight exp(-distance) per neighbor, weighted features averaged per channel."""
    weights = []
    for row in neighbors:
        squared = 0.0
        for a, b in zip(row, center):
            squared += (float(a) - float(b)) ** 2
        weights.append(math.exp(-math.sqrt(squared)))
    out = []
    for c in range(len(center)):
        total = 0.0
        for w, row in zip(weights, neighbors):
            total += w * float(row[c])
        out.append(total / len(neighbors))
    return np.array(out)


def aggregate_oracle_2d(features, grid_side, degrees, pooling=POOL_SIMILARITY):
    out = np.zeros_like(features)
    for m in range(len(features)):
        pooled = []
        for r in degrees:
            nb = neighborhood_2d(grid_side, m, r)
            if pooling == POOL_SIMILARITY:
                pooled.append(swpool_oracle(features[m], features[nb]))
            else:
                pooled.append(average_pool(features[nb]))
        out[m] = np.mean(pooled, axis=0)
    return out


class TestNeighborhoods:
    """Grid windows and nearest group centers."""

    def test_corner_window(self):
        assert sorted(neighborhood_2d(4, 0, 3)) == [0, 1, 4, 5]

    def test_degree_one_is_self(self):
        assert neighborhood_2d(5, 12, 1) == [12]

    def test_chebyshev_ball(self):
        side = 6
        for r in (1, 3, 5):
            for m in range(side * side):
                row, col = divmod(m, side)
                expected = {
                    y * side + x
                    for y in range(side) for x in range(side)
                    if max(abs(y - row), abs(x - col)) <= r // 2
                }
                assert set(neighborhood_2d(side, m, r)) == expected

    def test_even_degree(self):
        with pytest.raises(EvenDegree):
            neighborhood_2d(4, 0, 2)

    def test_line_of_centers(self):
        centers = np.array([[float(i), 0.0, 0.0] for i in range(5)])
        assert neighborhood_3d(centers, 2, 3) == [2, 1, 3]

    def test_coincident_centers_keep_self(self):
        centers = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        assert neighborhood_3d(centers, 1, 1) == [1]
        assert neighborhood_3d(centers, 1, 2) == [1, 0]

    def test_degree_exceeds_groups(self):
        with pytest.raises(DegreeExceedsGroups):
            neighborhood_3d(np.zeros((3, 3)), 0, 4)


class TestSwpool:
    """Similarity-weighted pooling of one window."""

    def test_self_only(self):
        f = np.array([1.0, -2.0, 3.0])
        assert np.allclose(swpool(f, f[None, :]), f)

    def test_identical_neighbors(self):
        f = np.array([0.5, 0.5])
        assert np.allclose(swpool(f, np.tile(f, (4, 1))), f)

    def test_hand_example(self):
        center = np.array([0.0])
        neighbors = np.array([[0.0], [1.0]])
        assert swpool(center, neighbors)[0] == pytest.approx(np.exp(-1.0) / 2)

    def test_matches_scalar_loops(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            center = rng.normal(size=8)
            neighbors = center + rng.normal(scale=0.5, size=(9, 8))
            assert np.allclose(swpool(center, neighbors), swpool_oracle(center, neighbors),
                               rtol=1e-12, atol=1e-12)

    def test_far_neighbor_vanishes(self):
        out = swpool(np.array([0.0]), np.array([[0.0], [50.0]]))
        assert abs(out[0]) < 1e-6


class TestAggregateImage:
    """Aggregation on the 2D patch grid."""

    def test_degree_one_is_identity(self, rng):
        features = rng.normal(size=(25, 4))
        out = aggregate_stack(_image_stack(features, 5), [1])
        assert np.array_equal(out.stages[0], features)

    def test_constant_field(self):
        features = np.tile(np.array([0.3, -1.2, 2.0]), (36, 1))
        for pooling in (POOL_SIMILARITY, POOL_AVERAGE):
            out = aggregate_stack(_image_stack(features, 6), [1, 3, 5], pooling)
            assert np.allclose(out.stages[0], features)

    @pytest.mark.parametrize("pooling", [POOL_SIMILARITY, POOL_AVERAGE])
    def test_matches_literal_oracle(self, rng, pooling):
        features = rng.normal(size=(36, 5))
        out = aggregate_stack(_image_stack(features, 6), [1, 3, 5], pooling)
        expected = aggregate_oracle_2d(features, 6, [1, 3, 5], pooling)
        assert np.allclose(out.stages[0], expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("r", [3, 5])
    def test_outlier_is_not_diluted(self, r):
        prototype = np.zeros(4)
        prototype[0] = 1.0
        features = np.tile(prototype, (49, 1))
        features[24, 1] = 5.0
        sim = aggregate_stack(_image_stack(features, 7), [1, r], POOL_SIMILARITY).stages[0][24]
        avg = aggregate_stack(_image_stack(features, 7), [1, r], POOL_AVERAGE).stages[0][24]
        assert np.linalg.norm(sim - prototype) > np.linalg.norm(avg - prototype)

    def test_locality(self, rng):
        features = rng.normal(size=(81, 3))
        changed = features.copy()
        changed[0] += 10.0
        a = aggregate_stack(_image_stack(features, 9), [1, 3, 5]).stages[0]
        b = aggregate_stack(_image_stack(changed, 9), [1, 3, 5]).stages[0]
        for m in range(81):
            row, col = divmod(m, 9)
            if max(row, col) > 2:
                assert np.array_equal(a[m], b[m])
        assert not np.allclose(a[10], b[10])

    def test_workers_and_stages(self, rng):
        stages = [rng.normal(size=(16, 3)) for _ in range(3)]
        stack = PatchFeatureStack(modality=MODALITY_IMAGE, stages=stages, grid_side=4)
        single = aggregate_stack(stack, [1, 3])
        pooled = aggregate_stack(stack, [1, 3], workers=3)
        for a, b in zip(single.stages, pooled.stages):
            assert np.array_equal(a, b)

    def test_bad_degrees(self, rng):
        stack = _image_stack(rng.normal(size=(16, 2)), 4)
        with pytest.raises(InvalidConfig):
            aggregate_stack(stack, [3, 5])
        with pytest.raises(EvenDegree):
            aggregate_stack(stack, [1, 2])
        with pytest.raises(InvalidConfig):
            aggregate_stack(stack, [1, 3], pooling="max")


class TestAggregateCloud:
    """Aggregation over nearest group centers."""

    def test_matches_literal_oracle(self, rng):
        centers = rng.normal(size=(20, 3))
        features = rng.normal(size=(20, 4))
        stack = PatchFeatureStack(modality=MODALITY_CLOUD, stages=[features], group_centers=centers)
        out = aggregate_stack(stack, [1, 3, 5]).stages[0]
        for m in range(20):
            pooled = [features[m]]
            for r in (3, 5):
                nb = neighborhood_3d(centers, m, r)
                pooled.append(swpool(features[m], features[nb]))
            assert np.allclose(out[m], np.mean(pooled, axis=0), rtol=1e-12, atol=1e-12)

    def test_flagged_groups_keep_their_feature(self, rng):
        centers = rng.normal(size=(12, 3))
        features = rng.normal(size=(12, 4))
        flags = np.zeros(12, dtype=bool)
        flags[[2, 7]] = True
        stack = PatchFeatureStack(modality=MODALITY_CLOUD, stages=[features],
                                  group_centers=centers, high_curvature_flags=flags)
        out = aggregate_stack(stack, [1, 3, 5]).stages[0]
        assert np.array_equal(out[flags], features[flags])
        assert not np.allclose(out[~flags], features[~flags])

    def test_permutation_equivariance(self, rng):
        centers = rng.normal(size=(15, 3))
        features = rng.normal(size=(15, 3))
        perm = rng.permutation(15)
        a = aggregate_stack(PatchFeatureStack(modality=MODALITY_CLOUD, stages=[features],
                                              group_centers=centers), [1, 3]).stages[0]
        b = aggregate_stack(PatchFeatureStack(modality=MODALITY_CLOUD, stages=[features[perm]],
                                              group_centers=centers[perm]), [1, 3]).stages[0]
        assert np.allclose(a[perm], b)

    def test_degree_exceeds_groups(self, rng):
        stack = PatchFeatureStack(modality=MODALITY_CLOUD, stages=[rng.normal(size=(4, 2))],
                                  group_centers=rng.normal(size=(4, 3)))
        with pytest.raises(DegreeExceedsGroups):
            aggregate_stack(stack, [1, 5])
