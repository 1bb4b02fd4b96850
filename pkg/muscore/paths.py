"""
Constants and utilities for run directory layout.
"""

from pathlib import Path
from typing import Dict

MAPS_DIR = "maps"
PNG_DIR = "png"
SCORES_FILE = "scores.json"
RESCON_FILE = "rescon.json"
SUMMARY_FILE = "summary.json"
METRICS_FILE = "metrics.csv"
DATASET_FILE = "dataset.json"
GROUND_TRUTH_FILE = "ground_truth.json"


def get_run_paths(output_dir: str) -> Dict[str, Path]:
    """Get all paths of a run directory."""
    root = Path(output_dir)
    return {
        "root": root,
        "maps": root / MAPS_DIR,
        "png": root / PNG_DIR,
        "scores": root / SCORES_FILE,
        "rescon": root / RESCON_FILE,
        "summary": root / SUMMARY_FILE,
        "metrics": root / METRICS_FILE,
    }


def ensure_run_directories(output_dir: str, with_png: bool = False) -> Dict[str, Path]:
    """Ensure all run directories exist and return their paths."""
    paths = get_run_paths(output_dir)

    for name in ("root", "maps"):
        paths[name].mkdir(parents=True, exist_ok=True)
    if with_png:
        paths["png"].mkdir(parents=True, exist_ok=True)

    return paths


def map_path(output_dir: str, sample_id: str) -> Path:
    """Pixel-space map of a sample, or its point map when no pixel space exists."""
    return get_run_paths(output_dir)["maps"] / f"{sanitize_id(sample_id)}.mt"


def point_map_path(output_dir: str, sample_id: str) -> Path:
    """Per-point 3D scores of a sample."""
    return get_run_paths(output_dir)["maps"] / f"{sanitize_id(sample_id)}_points.mt"


def png_path(output_dir: str, sample_id: str) -> Path:
    return get_run_paths(output_dir)["png"] / f"{sanitize_id(sample_id)}.png"


def get_absolute_path(relative_path: str, root: Path) -> Path:
    """Convert a manifest-relative path to an absolute path under root."""
    if Path(relative_path).is_absolute():
        return Path(relative_path)
    return Path(root) / relative_path


def sanitize_id(sample_id: str) -> str:
    """Sanitize a sample id for use as a file name."""
    import re
    sanitized = re.sub(r'[<>:"/\\|?*]', '_', sample_id)
    sanitized = sanitized.strip(' .')
    return sanitized or "_"
