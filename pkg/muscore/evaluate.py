"""
Evaluation of run directories against ground truth, and aggregation over repeated runs.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import MissingArtifacts, NoPositives, NoRegions, SingleClass
from .metrics import auroc, average_precision, f1_max, pro_at_fpr
from .paths import get_absolute_path, get_run_paths, map_path, point_map_path
from .tensor_io import load_manifest, load_mask, load_tensor
from .types import LABEL_ANOMALOUS, LABEL_UNKNOWN, LabeledScores, RegionSet

logger = logging.getLogger(__name__)

FIELDS = ["dataset", "modality", "metric", "value"]
SUMMARY_FIELDS = FIELDS + ["std", "runs"]


def load_run(run_dir: str) -> Dict[str, Any]:
    """Read scores.json and summary.json of a run directory."""
    paths = get_run_paths(run_dir)
    for name in ("scores", "summary"):
        if not paths[name].exists():
            raise MissingArtifacts(f"{paths[name]} not found; is {run_dir} a run directory?")
    with open(paths["scores"], "r", encoding="utf-8") as f:
        scores = json.load(f)["samples"]
    with open(paths["summary"], "r", encoding="utf-8") as f:
        summary = json.load(f)
    return {"scores": scores, "summary": summary}


def _metric_rows(prefix: str, data: LabeledScores, suffix: str = "") -> Dict[str, float]:
    rows = {}
    try:
        rows[f"AUROC-{prefix}{suffix}"] = auroc(data)
    except SingleClass as e:
        logger.warning(f"AUROC-{prefix}{suffix} skipped: {e}")
    try:
        rows[f"F1-max-{prefix}{suffix}"] = f1_max(data)
        rows[f"AP-{prefix}{suffix}"] = average_precision(data)
    except NoPositives as e:
        logger.warning(f"F1-max/AP-{prefix}{suffix} skipped: {e}")
    return rows


def evaluate_run(run_dir: str, dataset_dir: Optional[str] = None) -> List[Dict[str, Any]]:
    """Classification and segmentation metrics of one run, one row per metric."""
    run = load_run(run_dir)
    summary = run["summary"]
    dataset_dir = dataset_dir or summary.get("dataset_dir")
    if not dataset_dir:
        raise MissingArtifacts("No dataset directory given and none recorded in the run summary")
    dataset = load_manifest(dataset_dir)
    samples = dataset.by_id()

    metrics: Dict[str, float] = {}

    # classification
    labelled = [s for s in run["scores"] if samples[s["sample_id"]].label != LABEL_UNKNOWN]
    if labelled:
        labels = [samples[s["sample_id"]].label == LABEL_ANOMALOUS for s in labelled]
        metrics.update(_metric_rows("cls", LabeledScores([s["score_rescored"] for s in labelled], labels)))
        metrics.update(_metric_rows("cls", LabeledScores([s["score"] for s in labelled], labels), "-raw"))

    # segmentation
    seg_scores, seg_labels = [], []
    masks, maps = [], []
    for entry in run["scores"]:
        sample = samples[entry["sample_id"]]
        pixel_file = map_path(run_dir, sample.sample_id)
        if not pixel_file.exists():
            raise MissingArtifacts(f"Map for {sample.sample_id} not found: {pixel_file}")
        values = load_tensor(pixel_file).data.astype(np.float64)

        if values.ndim == 2 and sample.mask_path:
            mask = load_mask(get_absolute_path(sample.mask_path, dataset.root))
            masks.append(mask)
            maps.append(values)
            seg_scores.append(values.ravel())
            seg_labels.append(mask.ravel())
        elif sample.point_labels_path and point_map_path(run_dir, sample.sample_id).exists():
            points = load_tensor(point_map_path(run_dir, sample.sample_id)).data.astype(np.float64)
            point_labels = load_tensor(get_absolute_path(sample.point_labels_path, dataset.root)).data
            seg_scores.append(points.ravel())
            seg_labels.append(point_labels.ravel() > 0)

    if seg_scores:
        data = LabeledScores(np.concatenate(seg_scores), np.concatenate(seg_labels))
        metrics.update(_metric_rows("seg", data))
    if masks:
        try:
            metrics["PRO@30%"] = pro_at_fpr(RegionSet(masks=masks, score_maps=maps))
        except NoRegions as e:
            logger.warning(f"PRO@30% skipped: {e}")

    modality = summary.get("modality", "")
    name = summary.get("dataset", dataset.name)
    return [{"dataset": name, "modality": modality, "metric": k, "value": v} for k, v in metrics.items()]


def write_metrics(rows: List[Dict[str, Any]], path, fields: Sequence[str] = FIELDS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"Metrics saved to: {path}")


def summarize_runs(run_dirs: Sequence[str], dataset_dir: Optional[str] = None) -> List[Dict[str, Any]]:
    """Mean and population std of every metric over repeated runs."""
    collected: Dict[tuple, List[float]] = {}
    for run_dir in run_dirs:
        for row in evaluate_run(run_dir, dataset_dir):
            collected.setdefault((row["dataset"], row["modality"], row["metric"]), []).append(row["value"])

    rows = []
    for (dataset, modality, metric), values in collected.items():
        values = np.asarray(values, dtype=np.float64)
        rows.append({
            "dataset": dataset,
            "modality": modality,
            "metric": metric,
            "value": float(values.mean()),
            "std": float(values.std()),
            "runs": len(values),
        })
    return rows


def format_rows(rows: List[Dict[str, Any]]) -> str:
    """Plain-text table, percent values with one decimal, mean±std when present."""
    lines = []
    for row in rows:
        value = f"{100 * row['value']:.1f}"
        if "std" in row:
            value += f"±{100 * row['std']:.1f}"
        lines.append(f"{row['metric']:<16} {value}")
    return "\n".join(lines)
