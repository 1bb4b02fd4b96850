"""
Tensor container, XYZ maps, dataset manifests and dataset validation.

`.mt` layout: 8-byte magic ``MUSCTENS``, a little-endian uint32 header
length, a UTF-8 JSON header ``{"dtype": ..., "shape": [...]}`` and the
little-endian row-major payload.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Any, List, Optional, Tuple, Union

import numpy as np

from .errors import MagicMismatch, ShapeOverflow, NonFiniteValue, ShapeMismatch, TensorFormatError
from .paths import get_absolute_path
from .types import (
    DatasetManifest,
    Intrinsics,
    LABELS,
    OrganizedPointCloud,
    SampleManifest,
    TensorFile,
    ValidationReport,
)

logger = logging.getLogger(__name__)

MAGIC = b"MUSCTENS"
_LENGTH = struct.Struct("<I")
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

PathLike = Union[str, Path]


def _dtype_code(array: np.ndarray) -> str:
    if array.dtype == np.uint8 or array.dtype == np.bool_:
        return "u8"
    return "f32"


def save_tensor(path: PathLike, array: np.ndarray, dtype: Optional[str] = None) -> TensorFile:
    """Write an array as a `.mt` tensor file and return what was written."""
    array = np.asarray(array)
    code = dtype or _dtype_code(array)
    if code not in DTYPES:
        raise TensorFormatError(f"Unsupported dtype: {code}")
    if any(int(d) < 1 for d in array.shape):
        raise ShapeOverflow(f"Tensor dimensions must be positive, got {array.shape}")

    payload = np.ascontiguousarray(array.astype(DTYPES[code], copy=False))
    header = json.dumps({"dtype": code, "shape": [int(d) for d in array.shape]}).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        f.write(payload.tobytes())

    return TensorFile(dtype=code, shape=tuple(payload.shape), data=payload)


def _read_header(f, path: PathLike) -> Tuple[str, Tuple[int, ...], int]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise MagicMismatch(f"{path}: not a tensor file (magic {magic!r})")

    raw_len = f.read(_LENGTH.size)
    if len(raw_len) != _LENGTH.size:
        raise TensorFormatError(f"{path}: truncated header length")
    (header_len,) = _LENGTH.unpack(raw_len)

    raw_header = f.read(header_len)
    if len(raw_header) != header_len:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
        code = header["dtype"]
        shape = tuple(int(d) for d in header["shape"])
    except (ValueError, KeyError, TypeError) as e:
        raise TensorFormatError(f"{path}: malformed header: {e}") from e

    if code not in DTYPES:
        raise TensorFormatError(f"{path}: unsupported dtype {code!r}")
    if any(d < 1 for d in shape):
        raise ShapeOverflow(f"{path}: non-positive dimension in shape {shape}")

    return code, shape, len(MAGIC) + _LENGTH.size + header_len


def read_header(path: PathLike) -> Tuple[str, Tuple[int, ...]]:
    """Read dtype and shape, checking the payload size without loading it."""
    path = Path(path)
    with open(path, "rb") as f:
        code, shape, offset = _read_header(f, path)
    expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[code].itemsize
    actual = path.stat().st_size - offset
    if actual != expected:
        raise ShapeOverflow(f"{path}: header declares {expected} payload bytes, file holds {actual}")
    return code, shape


def load_tensor(path: PathLike, allow_non_finite: bool = False) -> TensorFile:
    """Load a `.mt` tensor, verifying magic, payload size and finiteness."""
    path = Path(path)
    with open(path, "rb") as f:
        code, shape, _ = _read_header(f, path)
        payload = f.read()

    dtype = DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != count * dtype.itemsize:
        held = len(payload) / dtype.itemsize
        raise ShapeOverflow(f"{path}: header declares {count} values, file holds {held:g}")

    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if code == "f32" and not allow_non_finite and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{path}: payload contains NaN or infinity")

    return TensorFile(dtype=code, shape=shape, data=data)


def organize_xyz(points: np.ndarray) -> OrganizedPointCloud:
    """Wrap an H x W x 3 array as an organized cloud with its validity mask."""
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[2] != 3:
        raise ShapeMismatch(f"XYZ map must be H x W x 3, got {points.shape}")
    valid = ~np.all(points == 0, axis=2)
    empty = not bool(valid.any())
    if empty:
        logger.warning("XYZ map has no valid points")
    return OrganizedPointCloud(points=points.astype(np.float64), valid_mask=valid, empty=empty)


def load_xyz_map(path: PathLike, shape: Optional[Tuple[int, int]] = None) -> OrganizedPointCloud:
    """Load an organized XYZ map; (0,0,0) pixels are marked invalid."""
    tensor = load_tensor(path)
    if shape is not None and tuple(tensor.shape) != (int(shape[0]), int(shape[1]), 3):
        raise ShapeMismatch(f"{path}: expected XYZ map {tuple(shape)} x 3, got {tensor.shape}")
    return organize_xyz(tensor.data)


def load_mask(path: PathLike) -> np.ndarray:
    """Load a u8 mask (0 normal, 255 anomalous) as booleans."""
    tensor = load_tensor(path)
    return tensor.data > 0


def save_mask(path: PathLike, mask: np.ndarray) -> TensorFile:
    return save_tensor(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), dtype="u8")


# Manifest handling

def _parse_sample(entry: Dict[str, Any]) -> SampleManifest:
    intrinsics = entry.get("intrinsics")
    return SampleManifest(
        sample_id=str(entry["sample_id"]),
        image_feature_paths=entry.get("image_feature_paths"),
        cloud_path=entry.get("cloud_path"),
        cloud_feature_paths=entry.get("cloud_feature_paths"),
        xyz_map_shape=tuple(entry["xyz_map_shape"]) if entry.get("xyz_map_shape") else None,
        intrinsics=Intrinsics(**{k: float(v) for k, v in intrinsics.items()}) if intrinsics else None,
        image_size=tuple(entry["image_size"]) if entry.get("image_size") else None,
        label=entry.get("label", "unknown"),
        mask_path=entry.get("mask_path"),
        point_labels_path=entry.get("point_labels_path"),
    )


def load_manifest(path: PathLike) -> DatasetManifest:
    """Load `dataset.json`; sample paths stay relative to its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    samples = [_parse_sample(entry) for entry in data.get("samples", [])]
    logger.info(f"Loaded manifest {path} with {len(samples)} samples")
    return DatasetManifest(name=data.get("name", path.parent.name), root=path.parent, samples=samples)


def save_manifest(path: PathLike, manifest: DatasetManifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"name": manifest.name, "samples": [s.to_dict() for s in manifest.samples]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


# Validation

def _check_tensor(report: ValidationReport, sample_id: str, root: Path, rel: str,
                  what: str) -> Optional[Tuple[str, Tuple[int, ...]]]:
    full = get_absolute_path(rel, root)
    if not full.exists():
        report.add(sample_id, "missing-path", f"{what} not found: {rel}")
        return None
    try:
        return read_header(full)
    except (TensorFormatError, OSError) as e:
        report.add(sample_id, "unreadable-tensor", f"{what} {rel}: {e}")
        return None


def _check_stage_files(report: ValidationReport, sample: SampleManifest, root: Path,
                       paths: List[str], what: str,
                       reference: Dict[str, Any], square: bool) -> Optional[int]:
    dims = []
    rows = set()
    for s, rel in enumerate(paths):
        header = _check_tensor(report, sample.sample_id, root, rel, f"{what} stage {s}")
        if header is None:
            return None
        _, shape = header
        if len(shape) != 2:
            report.add(sample.sample_id, "bad-shape", f"{what} stage {s} must be M x C, got {shape}")
            return None
        rows.add(shape[0])
        dims.append(shape[1])

    if len(rows) != 1:
        report.add(sample.sample_id, "patch-count-mismatch", f"{what} stages disagree on patch count {sorted(rows)}")
        return None
    num_patches = rows.pop()
    if square and int(round(np.sqrt(num_patches))) ** 2 != num_patches:
        report.add(sample.sample_id, "not-square", f"{what} patch count {num_patches} is not a square grid")

    if reference.get("stages") is None:
        reference["stages"] = len(dims)
        reference["dims"] = dims
        reference["first"] = sample.sample_id
    elif reference["stages"] != len(dims):
        report.add(sample.sample_id, "stage-count-mismatch",
                   f"{what} has S={len(dims)} stages, {reference['first']} has S={reference['stages']}")
    elif reference["dims"] != dims:
        report.add(sample.sample_id, "feature-dim-mismatch",
                   f"{what} stage widths {dims} differ from {reference['first']} {reference['dims']}")
    return num_patches


def validate_dataset(manifests: List[SampleManifest], root: Optional[PathLike] = None) -> ValidationReport:
    """Check a dataset for defects; never raises, every defect is a report entry."""
    report = ValidationReport()
    root = Path(root) if root is not None else Path(".")

    if not manifests:
        report.add(None, "empty-dataset", "dataset lists no samples")
        return report

    image_ref: Dict[str, Any] = {}
    cloud_ref: Dict[str, Any] = {}
    seen = set()

    for sample in manifests:
        sid = sample.sample_id
        try:
            if sid in seen:
                report.add(sid, "duplicate-id", f"sample id {sid!r} appears more than once")
            seen.add(sid)

            if sample.label not in LABELS:
                report.add(sid, "bad-label", f"label {sample.label!r} not in {LABELS}")

            if not sample.has_image and not sample.has_cloud:
                report.add(sid, "no-modality", "sample has neither image features nor a cloud")
                continue
            if sample.has_image and sample.has_cloud and not sample.has_alignment:
                report.add(sid, "no-alignment", "image and cloud present but no xyz_map_shape or intrinsics")

            if sample.has_image:
                _check_stage_files(report, sample, root, sample.image_feature_paths,
                                   "image features", image_ref, square=True)

            if sample.has_cloud:
                header = _check_tensor(report, sid, root, sample.cloud_path, "cloud")
                if header is not None:
                    _, shape = header
                    if sample.xyz_map_shape is not None:
                        expected = (int(sample.xyz_map_shape[0]), int(sample.xyz_map_shape[1]), 3)
                        if shape != expected:
                            report.add(sid, "bad-shape", f"xyz map is {shape}, manifest says {expected}")
                    elif len(shape) != 2 or shape[1] != 3:
                        report.add(sid, "bad-shape", f"unorganized cloud must be M x 3, got {shape}")
                    if sample.intrinsics is not None and sample.xyz_map_shape is None and sample.image_size is None:
                        report.add(sid, "no-image-size", "intrinsics route needs image_size")
                if sample.cloud_feature_paths:
                    _check_stage_files(report, sample, root, sample.cloud_feature_paths,
                                       "cloud features", cloud_ref, square=False)

            if sample.mask_path is not None:
                header = _check_tensor(report, sid, root, sample.mask_path, "mask")
                if header is not None and (header[0] != "u8" or len(header[1]) != 2):
                    report.add(sid, "bad-mask", f"mask must be a 2D u8 tensor, got {header}")
            if sample.point_labels_path is not None:
                _check_tensor(report, sid, root, sample.point_labels_path, "point labels")

        except Exception as e:
            report.add(sid, "internal", f"validation error: {e}")

    for entry in report.entries:
        logger.warning(f"Validation [{entry.kind}] {entry.sample_id}: {entry.message}")
    return report
