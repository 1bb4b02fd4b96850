"""
PNG heatmaps of anomaly maps, with an optional ground-truth contour.
"""

import json
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

from .errors import MissingArtifacts
from .paths import get_absolute_path, get_run_paths, map_path, png_path
from .tensor_io import load_manifest, load_mask, load_tensor

logger = logging.getLogger(__name__)

MODES = ("gray", "turbo")


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask)


def render_heatmap(values: np.ndarray, mode: str = "turbo", mask: Optional[np.ndarray] = None) -> np.ndarray:
    """8-bit image of a 2D map: H x W for grayscale, H x W x 3 otherwise or with a contour."""
    if mode not in MODES:
        raise ValueError(f"Unknown heatmap mode {mode!r}; expected one of {MODES}")
    unit = normalize(values)

    if mode == "gray":
        image = np.round(unit * 255).astype(np.uint8)
        if mask is None:
            return image
        image = np.repeat(image[:, :, None], 3, axis=2)
    else:
        image = (colormaps["turbo"](unit)[:, :, :3] * 255).round().astype(np.uint8)

    if mask is not None:
        image[mask_contour(mask)] = 255
    return image


def write_heatmap(path, values: np.ndarray, mode: str = "turbo", mask: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_heatmap(values, mode, mask)).save(path)
    return path


def plot_run(run_dir: str, mode: str = "turbo", overlay: bool = False,
             dataset_dir: Optional[str] = None) -> List[Path]:
    """Write one PNG per pixel-space map of a run."""
    paths = get_run_paths(run_dir)
    if not paths["scores"].exists():
        raise MissingArtifacts(f"{paths['scores']} not found; is {run_dir} a run directory?")
    with open(paths["scores"], "r", encoding="utf-8") as f:
        entries = json.load(f)["samples"]

    dataset = None
    if overlay:
        if dataset_dir is None and paths["summary"].exists():
            with open(paths["summary"], "r", encoding="utf-8") as f:
                dataset_dir = json.load(f).get("dataset_dir")
        if dataset_dir:
            dataset = load_manifest(dataset_dir)
        else:
            logger.warning("No dataset directory known; contours are not drawn")

    written = []
    for entry in entries:
        sid = entry["sample_id"]
        source = map_path(run_dir, sid)
        if not source.exists():
            raise MissingArtifacts(f"Map for {sid} not found: {source}")
        values = load_tensor(source).data
        if values.ndim != 2:
            logger.debug(f"Skipping point-space map of {sid}")
            continue

        mask = None
        if dataset is not None:
            sample = dataset.by_id().get(sid)
            if sample is not None and sample.mask_path:
                mask = load_mask(get_absolute_path(sample.mask_path, dataset.root))
        written.append(write_heatmap(png_path(run_dir, sid), values, mode, mask))

    logger.info(f"Wrote {len(written)} heatmaps to {paths['png']}")
    return written
