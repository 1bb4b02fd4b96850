"""
Tests for salient features, the similarity graph, window masks and re-scoring.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from muscore.errors import LengthMismatch, StageCountTooSmall, WindowTooLarge
from muscore.metrics import auroc
from muscore.rescon import (
    build_graph,
    combine_salient,
    diagnostics,
    full_mask,
    rescore,
    salient_feature,
    similarity_graph,
    window_mask,
)
from muscore.synth_bench import oracle_rescore
from muscore.types import MODALITY_IMAGE, LabeledScores, PatchFeatureStack


def _stack(rng, stages=3, patches=9):
    return PatchFeatureStack(modality=MODALITY_IMAGE, stages=[rng.normal(size=(patches, 4)) for _ in range(stages)],
                             grid_side=3)


@pytest.fixture
def clustered(rng):
    """20 normal and 5 anomalous samples; normal 0 has a noisy high score."""
    e1, e2 = np.eye(8)[0], np.eye(8)[1]
    normals = [e1 + rng.normal(0.0, 0.01, size=8) for _ in range(20)]
    anomalies = [e2 + 0.5 * e1 + rng.normal(0.0, 0.01, size=8) for _ in range(5)]
    features = np.stack([combine_salient([f]) for f in normals + anomalies])
    scores = np.array([0.9] + [0.1] * 19 + [0.6, 0.65, 0.7, 0.75, 0.8])
    labels = np.array([0] * 20 + [1] * 5)
    return features, scores, labels


class TestSalientFeature:
    """Penultimate-stage feature of the top patch."""

    def test_clear_max(self, rng):
        stack = _stack(rng)
        scores = np.zeros(9)
        scores[5] = 1.0
        assert np.array_equal(salient_feature(stack, scores), stack.stages[1][5])

    def test_tie_takes_first(self, rng):
        stack = _stack(rng)
        assert np.array_equal(salient_feature(stack, np.ones(9)), stack.stages[1][0])

    def test_matches_scan(self, rng):
        stack = _stack(rng)
        for _ in range(20):
            scores = rng.uniform(size=9)
            best = max(range(9), key=lambda m: (scores[m], -m))
            assert np.array_equal(salient_feature(stack, scores), stack.stages[-2][best])

    def test_single_stage(self, rng):
        with pytest.raises(StageCountTooSmall):
            salient_feature(_stack(rng, stages=1), np.zeros(9))

    def test_wrong_length(self, rng):
        with pytest.raises(LengthMismatch):
            salient_feature(_stack(rng), np.zeros(4))

    def test_combined_halves(self):
        combined = combine_salient([np.array([3.0, 4.0]), np.array([0.0, 2.0])])
        assert np.linalg.norm(combined) == pytest.approx(1.0)
        assert np.allclose(combined, np.array([0.6, 0.8, 0.0, 1.0]) / np.sqrt(2))


class TestGraph:
    """Similarity weights and window masks."""

    def test_identical_features(self):
        weights = similarity_graph(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert weights.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_orthogonal_and_negative(self):
        weights = similarity_graph(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
        assert np.all(weights == 0.0)

    def test_double_loop(self, rng):
        features = np.stack([combine_salient([f]) for f in rng.normal(size=(6, 5))])
        weights = similarity_graph(features)
        for i in range(6):
            for j in range(6):
                expected = 0.0 if i == j else max(0.0, float(features[i] @ features[j]))
                assert weights[i, j] == pytest.approx(expected)

    def test_full_window(self, rng):
        weights = similarity_graph(rng.uniform(size=(5, 3)))
        assert np.array_equal(window_mask(weights, 4), full_mask(5))

    def test_window_one(self):
        weights = np.array([[0.0, 0.2, 0.9], [0.2, 0.0, 0.5], [0.9, 0.5, 0.0]])
        assert window_mask(weights, 1).tolist() == [[0, 0, 1], [0, 0, 1], [1, 0, 0]]

    def test_sort_oracle(self, rng):
        features = np.stack([combine_salient([f]) for f in rng.normal(size=(15, 6))])
        weights = similarity_graph(features)
        mask = window_mask(weights, 7)
        for i in range(15):
            others = sorted((j for j in range(15) if j != i), key=lambda j: (-weights[i, j], j))[:7]
            assert set(np.flatnonzero(mask[i]).tolist()) == set(others)
            assert mask[i, i] == 0

    def test_ties_by_index(self):
        weights = np.zeros((4, 4))
        assert np.flatnonzero(window_mask(weights, 2)[3]).tolist() == [0, 1]

    def test_window_too_large(self, rng):
        with pytest.raises(WindowTooLarge):
            window_mask(np.zeros((4, 4)), 4)
        with pytest.raises(WindowTooLarge):
            window_mask(np.zeros((4, 4)), 0)


class TestRescore:
    """One round of half-own, half-neighborhood re-scoring."""

    def test_fixed_point(self):
        weights = full_mask(4)
        result = rescore(np.full(4, 0.3), weights, full_mask(4))
        assert np.allclose(result.scores, 0.3)

    def test_hand_example(self):
        weights = np.array([[0.0, 0.5, 0.2], [0.5, 0.0, 0.1], [0.2, 0.1, 0.0]])
        mask = np.array([[0, 1, 0], [1, 0, 0], [1, 0, 0]])
        result = rescore(np.array([0.4, 0.8, 0.1]), weights, mask)
        assert result.scores[0] == pytest.approx(0.6)

    def test_matrix_form_matches_per_sample(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(3, 11))
            features = np.stack([combine_salient([f]) for f in rng.normal(size=(n, 4))])
            weights = similarity_graph(features)
            mask = window_mask(weights, int(rng.integers(1, n)))
            scores = rng.uniform(size=n)
            result = rescore(scores, weights, mask)
            assert np.allclose(result.scores, oracle_rescore(scores, weights, mask), rtol=0, atol=1e-9)

    def test_convex_and_anchored(self, rng):
        for _ in range(100):
            features = np.stack([combine_salient([f]) for f in rng.normal(size=(8, 3))])
            graph = build_graph(features, 3)
            scores = rng.uniform(size=8)
            rescored = rescore(scores, graph.weights, graph.mask).scores
            assert np.all(rescored >= scores.min() - 1e-12)
            assert np.all(rescored <= scores.max() + 1e-12)
            assert np.all(rescored >= scores / 2 - 1e-12)

    def test_isolated_rows_keep_score(self):
        graph = build_graph(np.eye(3), 1)
        scores = np.array([0.2, 0.5, 0.9])
        result = rescore(scores, graph.weights, graph.mask)
        assert np.array_equal(result.scores, scores)
        assert result.isolated == [0, 1, 2]

    def test_improves_separation(self, clustered):
        features, scores, labels = clustered
        graph = build_graph(features, 3)
        rescored = rescore(scores, graph.weights, graph.mask).scores
        before = auroc(LabeledScores(scores, labels))
        after = auroc(LabeledScores(rescored, labels))
        assert before < 1.0
        assert after >= before
        assert after == 1.0

    def test_window_mask_beats_full_mask(self, clustered):
        features, scores, labels = clustered
        masked = build_graph(features, 3)
        unmasked = build_graph(features, 3, use_window_mask=False)
        with_mask = auroc(LabeledScores(rescore(scores, masked.weights, masked.mask).scores, labels))
        without = auroc(LabeledScores(rescore(scores, unmasked.weights, unmasked.mask).scores, labels))
        assert without < with_mask


class TestDiagnostics:
    """Per-sample audit records."""

    def test_records(self):
        features = np.stack([combine_salient([f]) for f in np.array([[1.0, 0.1], [1.0, 0.2], [0.1, 1.0]])])
        graph = build_graph(features, 1)
        scores = np.array([0.1, 0.3, 0.8])
        result = rescore(scores, graph.weights, graph.mask)
        records = diagnostics(["a", "b", "c"], scores, result, graph)
        assert [r["sample_id"] for r in records] == ["a", "b", "c"]
        assert records[0]["neighbors"] == ["b"]
        assert records[0]["weights"] == [1.0]
        assert records[0]["score_rescored"] == pytest.approx(0.2)
        assert not any(r["isolated"] for r in records)
