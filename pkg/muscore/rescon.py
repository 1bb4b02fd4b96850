"""
Sample-level re-scoring over a window-masked similarity graph.

Each sample is described by the penultimate-stage feature of its most
anomalous patch. Its classification score is then averaged half-and-half
with the similarity-weighted scores of its k most similar samples.
"""

import logging
from typing import Any, Dict, List, Sequence

import numpy as np

from .errors import LengthMismatch, StageCountTooSmall, WindowTooLarge
from .geometry3d import smallest_k
from .types import PatchFeatureStack, RescoreResult, SimilarityGraph

logger = logging.getLogger(__name__)


def salient_feature(stack: PatchFeatureStack, patch_scores: np.ndarray) -> np.ndarray:
    """Penultimate-stage feature row of the highest-scoring patch (first on ties)."""
    if stack.num_stages < 2:
        raise StageCountTooSmall(f"Salient features need at least 2 stages, got {stack.num_stages}")
    scores = np.asarray(patch_scores, dtype=np.float64).ravel()
    if scores.size != stack.num_patches:
        raise LengthMismatch(f"{scores.size} patch scores for {stack.num_patches} patches")
    return stack.stages[-2][int(np.argmax(scores))].copy()


def combine_salient(parts: Sequence[np.ndarray]) -> np.ndarray:
    """L2-normalize each modality's feature and concatenate them with equal weight."""
    normalized = []
    for part in parts:
        part = np.asarray(part, dtype=np.float64)
        norm = np.linalg.norm(part)
        normalized.append(part / norm if norm > 0 else part)
    return np.concatenate(normalized) / np.sqrt(len(normalized))


def similarity_graph(features: np.ndarray) -> np.ndarray:
    """Dot-product weights between salient features, negatives clamped and self-loops removed."""
    features = np.asarray(features, dtype=np.float64)
    weights = np.clip(features @ features.T, 0.0, None)
    np.fill_diagonal(weights, 0.0)
    return weights


def window_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the k most similar other samples per row (ties by smallest index)."""
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    if not (1 <= k <= n - 1):
        raise WindowTooLarge(f"Window size {k} outside [1, {n - 1}]")

    mask = np.zeros((n, n))
    for i in range(n):
        ranked = -weights[i]
        ranked[i] = np.inf
        mask[i, smallest_k(ranked, k)] = 1.0
    return mask


def full_mask(n: int) -> np.ndarray:
    """All-neighbors mask, used when the window mask is switched off."""
    mask = np.ones((n, n))
    np.fill_diagonal(mask, 0.0)
    return mask


def build_graph(features: np.ndarray, window: int, use_window_mask: bool = True) -> SimilarityGraph:
    features = np.asarray(features, dtype=np.float64)
    weights = similarity_graph(features)
    mask = window_mask(weights, window) if use_window_mask else full_mask(len(features))
    return SimilarityGraph(features=features, weights=weights, mask=mask, window=window)


def rescore(scores: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> RescoreResult:
    """Half the own score plus half the row-normalized masked neighbor average.

    Rows with no masked similarity keep their score and are reported as isolated.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masked = np.asarray(mask, dtype=np.float64) * np.asarray(weights, dtype=np.float64)
    degree = masked.sum(axis=1)
    isolated = np.flatnonzero(degree <= 0)

    propagated = np.divide(masked @ scores, degree, out=scores.copy(), where=degree > 0)
    rescored = np.where(degree > 0, 0.5 * (propagated + scores), scores)

    if isolated.size:
        logger.warning(f"{isolated.size} sample(s) have no similar neighbors and keep their score")
    return RescoreResult(scores=rescored, isolated=[int(i) for i in isolated])


def diagnostics(sample_ids: Sequence[str], scores: np.ndarray, result: RescoreResult,
                graph: SimilarityGraph) -> List[Dict[str, Any]]:
    """Per-sample audit record: score before and after, neighbors and their normalized weights."""
    masked = graph.mask * graph.weights
    records = []
    for i, sid in enumerate(sample_ids):
        neighbors = np.flatnonzero(graph.mask[i] > 0)
        total = masked[i].sum()
        records.append({
            "sample_id": sid,
            "score": float(scores[i]),
            "score_rescored": float(result.scores[i]),
            "neighbors": [sample_ids[j] for j in neighbors],
            "weights": [float(masked[i, j] / total) if total > 0 else 0.0 for j in neighbors],
            "isolated": i in result.isolated,
        })
    return records
