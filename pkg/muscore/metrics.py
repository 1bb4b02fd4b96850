"""
Classification and segmentation metrics: AUROC, AP, F1-max and PRO at a FPR limit.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from sklearn.metrics import auc, average_precision_score, precision_recall_curve, roc_auc_score

from .errors import NoPositives, NoRegions, ShapeMismatch, SingleClass
from .types import LabeledScores, RegionSet

logger = logging.getLogger(__name__)

PRO_LIMIT = 0.3
PRO_GRID_STEPS = 333

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


def _require_both_classes(data: LabeledScores):
    positives = int(data.labels.sum())
    if positives == 0 or positives == data.labels.size:
        raise SingleClass("AUROC needs both normal and anomalous labels")


def _require_positives(data: LabeledScores):
    if data.labels.size == 0 or int(data.labels.sum()) == 0:
        raise NoPositives("Metric needs at least one positive label")


def auroc(data: LabeledScores) -> float:
    """Area under the ROC curve; tied scores count one half."""
    _require_both_classes(data)
    return float(roc_auc_score(data.labels, data.scores))


def average_precision(data: LabeledScores) -> float:
    """Sum of (R_n - R_{n-1}) P_n over descending distinct-score thresholds."""
    _require_positives(data)
    return float(average_precision_score(data.labels, data.scores))


def f1_max(data: LabeledScores) -> float:
    """Best F1 over thresholds at every distinct score (predict positive when score >= threshold)."""
    _require_positives(data)
    precision, recall, _ = precision_recall_curve(data.labels, data.scores)
    # the final (precision=1, recall=0) point has no threshold
    precision, recall = precision[:-1], recall[:-1]
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    return float(f1.max())


def connected_regions(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Label the 4-connected components of a binary mask."""
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_CROSS)
    return labels, int(count)


def _pixel_weights(regions: RegionSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened scores, per-region overlap weights of positive pixels and a negative flag."""
    if len(regions.masks) != len(regions.score_maps):
        raise ShapeMismatch("Every score map needs a ground-truth mask")

    scores, weights, negatives = [], [], []
    sizes: List[np.ndarray] = []
    labelled = []
    total_regions = 0
    for mask, score_map in zip(regions.masks, regions.score_maps):
        mask = np.asarray(mask, dtype=bool)
        score_map = np.asarray(score_map, dtype=np.float64)
        if mask.shape != score_map.shape:
            raise ShapeMismatch(f"Mask {mask.shape} and score map {score_map.shape} differ")
        labels, count = connected_regions(mask)
        labelled.append((labels, score_map, mask))
        sizes.append(np.bincount(labels.ravel(), minlength=count + 1))
        total_regions += count

    if total_regions == 0:
        raise NoRegions("PRO needs at least one ground-truth region")

    for (labels, score_map, mask), size in zip(labelled, sizes):
        flat = labels.ravel()
        pixel_weight = np.zeros(flat.size)
        positive = flat > 0
        pixel_weight[positive] = 1.0 / (size[flat[positive]] * total_regions)
        scores.append(score_map.ravel())
        weights.append(pixel_weight)
        negatives.append(~mask.ravel())

    return np.concatenate(scores), np.concatenate(weights), np.concatenate(negatives)


def _integrate(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    """Area under PRO(FPR) on [0, limit], interpolated at the limit, divided by limit."""
    keep = fpr <= limit
    x, y = list(fpr[keep]), list(pro[keep])
    beyond = np.flatnonzero(~keep)
    if beyond.size and x[-1] < limit:
        j = beyond[0]
        x0, y0, x1, y1 = x[-1], y[-1], fpr[j], pro[j]
        y.append(y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        x.append(limit)
    if len(x) < 2:
        return 0.0
    return float(auc(np.asarray(x), np.asarray(y)) / limit)


def pro_curve(regions: RegionSet, thresholds: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(FPR, PRO) points, starting at (0, 0), for descending thresholds.

    Without explicit thresholds every distinct score is one.
    """
    scores, weights, negatives = _pixel_weights(regions)
    num_negative = max(int(negatives.sum()), 1)

    if thresholds is None:
        order = np.argsort(-scores, kind="stable")
        sorted_scores = scores[order]
        cum_pro = np.cumsum(weights[order])
        cum_fp = np.cumsum(negatives[order])
        # last index of each run of equal scores
        ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
        pro, fpr = cum_pro[ends], cum_fp[ends] / num_negative
    else:
        thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
        pro = np.array([weights[scores >= t].sum() for t in thresholds])
        fpr = np.array([negatives[scores >= t].sum() / num_negative for t in thresholds])

    return np.r_[0.0, fpr], np.r_[0.0, pro]


def pro_at_fpr(regions: RegionSet, limit: float = PRO_LIMIT, exact: bool = True,
               steps: int = PRO_GRID_STEPS) -> float:
    """Normalized area under the per-region overlap curve up to a false positive rate.

    exact=False evaluates `steps` thresholds at evenly spaced quantiles of the
    pooled scores instead of every distinct score.
    """
    thresholds = None
    if not exact:
        all_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in regions.score_maps])
        thresholds = np.quantile(all_scores, np.linspace(0.0, 1.0, steps))
    fpr, pro = pro_curve(regions, thresholds)
    return _integrate(fpr, pro, limit)
