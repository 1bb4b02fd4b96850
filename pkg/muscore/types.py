"""
Data contracts and type definitions for the anomaly scoring engine.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Dict, Any, Tuple

import numpy as np

MODALITY_IMAGE = "image"
MODALITY_CLOUD = "cloud"

SPACE_PIXEL = "pixel"
SPACE_POINT = "point"

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
LABEL_UNKNOWN = "unknown"
LABELS = (LABEL_NORMAL, LABEL_ANOMALOUS, LABEL_UNKNOWN)


@dataclass(frozen=True)
class TensorFile:
    """A tensor read from or written to a `.mt` file."""
    dtype: str  # "f32" or "u8"
    shape: Tuple[int, ...]
    data: np.ndarray

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float

    def to_dict(self) -> Dict[str, float]:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class SampleManifest:
    """One unlabeled sample of a dataset manifest."""
    sample_id: str
    image_feature_paths: Optional[List[str]] = None
    cloud_path: Optional[str] = None
    cloud_feature_paths: Optional[List[str]] = None
    xyz_map_shape: Optional[Tuple[int, int]] = None
    intrinsics: Optional[Intrinsics] = None
    image_size: Optional[Tuple[int, int]] = None
    label: str = LABEL_UNKNOWN
    mask_path: Optional[str] = None
    point_labels_path: Optional[str] = None

    @property
    def has_image(self) -> bool:
        return bool(self.image_feature_paths)

    @property
    def has_cloud(self) -> bool:
        return self.cloud_path is not None

    @property
    def has_alignment(self) -> bool:
        return self.xyz_map_shape is not None or self.intrinsics is not None

    @property
    def is_anomalous(self) -> Optional[bool]:
        if self.label == LABEL_UNKNOWN:
            return None
        return self.label == LABEL_ANOMALOUS

    def to_dict(self) -> Dict[str, Any]:
        entry: Dict[str, Any] = {"sample_id": self.sample_id, "label": self.label}
        if self.image_feature_paths:
            entry["image_feature_paths"] = list(self.image_feature_paths)
        if self.cloud_path is not None:
            entry["cloud_path"] = self.cloud_path
        if self.cloud_feature_paths:
            entry["cloud_feature_paths"] = list(self.cloud_feature_paths)
        if self.xyz_map_shape is not None:
            entry["xyz_map_shape"] = list(self.xyz_map_shape)
        if self.intrinsics is not None:
            entry["intrinsics"] = self.intrinsics.to_dict()
        if self.image_size is not None:
            entry["image_size"] = list(self.image_size)
        if self.mask_path is not None:
            entry["mask_path"] = self.mask_path
        if self.point_labels_path is not None:
            entry["point_labels_path"] = self.point_labels_path
        return entry


@dataclass
class ValidationEntry:
    sample_id: Optional[str]
    kind: str
    message: str


@dataclass
class ValidationReport:
    """Every dataset defect found by validation; empty means consistent."""
    entries: List[ValidationEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, sample_id: Optional[str], kind: str, message: str):
        self.entries.append(ValidationEntry(sample_id, kind, message))

    def kinds(self) -> List[str]:
        return [e.kind for e in self.entries]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "entries": [
                {"sample_id": e.sample_id, "kind": e.kind, "message": e.message}
                for e in self.entries
            ],
        }


@dataclass(frozen=True)
class OrganizedPointCloud:
    """XYZ map aligned with the image grid; (0,0,0) pixels are invalid."""
    points: np.ndarray  # H x W x 3
    valid_mask: np.ndarray  # H x W bool
    empty: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid_mask.shape

    @property
    def num_valid(self) -> int:
        return int(self.valid_mask.sum())

    def unorganized(self) -> np.ndarray:
        """Valid points in row-major pixel order, M x 3."""
        return self.points[self.valid_mask].astype(np.float64)

    def pixel_to_point(self) -> np.ndarray:
        """H x W map from pixel to point index, -1 where invalid."""
        index = np.full(self.valid_mask.shape, -1, dtype=np.int64)
        index[self.valid_mask] = np.arange(self.num_valid)
        return index


@dataclass
class PointGroup:
    """One 3D patch: a center and exactly K_P member indices."""
    center_index: int
    member_indices: np.ndarray
    curvature: float
    regrouped: bool = False


@dataclass
class GroupSet:
    """The M_P point groups of one cloud plus the parameters that made them."""
    groups: List[PointGroup]
    num_groups: int
    group_size: int
    k_iter: int
    curvature_threshold: float

    @property
    def center_indices(self) -> np.ndarray:
        return np.array([g.center_index for g in self.groups], dtype=np.int64)

    @property
    def curvatures(self) -> np.ndarray:
        return np.array([g.curvature for g in self.groups], dtype=np.float64)

    def high_curvature_flags(self) -> np.ndarray:
        return self.curvatures > self.curvature_threshold

    def centers(self, cloud: np.ndarray) -> np.ndarray:
        return np.asarray(cloud, dtype=np.float64)[self.center_indices]

    def params(self) -> Dict[str, Any]:
        return {
            "num_groups": self.num_groups,
            "group_size": self.group_size,
            "k_iter": self.k_iter,
            "curvature_threshold": self.curvature_threshold,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params(),
            "groups": [
                {
                    "center_index": int(g.center_index),
                    "member_indices": [int(i) for i in g.member_indices],
                    "curvature": float(g.curvature),
                    "regrouped": bool(g.regrouped),
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GroupSet":
        params = data["params"]
        groups = [
            PointGroup(
                center_index=int(g["center_index"]),
                member_indices=np.asarray(g["member_indices"], dtype=np.int64),
                curvature=float(g["curvature"]),
                regrouped=bool(g["regrouped"]),
            )
            for g in data["groups"]
        ]
        return cls(
            groups=groups,
            num_groups=int(params["num_groups"]),
            group_size=int(params["group_size"]),
            k_iter=int(params["k_iter"]),
            curvature_threshold=float(params["curvature_threshold"]),
        )


@dataclass
class PatchFeatureStack:
    """Per-stage patch features of one sample in one modality."""
    modality: str
    stages: List[np.ndarray]
    grid_side: Optional[int] = None
    group_centers: Optional[np.ndarray] = None
    high_curvature_flags: Optional[np.ndarray] = None

    def __post_init__(self):
        from .errors import ShapeMismatch, NonFiniteValue

        if not self.stages:
            raise ShapeMismatch("feature stack needs at least one stage")
        self.stages = [np.asarray(s, dtype=np.float64) for s in self.stages]
        num_patches = self.stages[0].shape[0]
        for s, stage in enumerate(self.stages):
            if stage.ndim != 2 or stage.shape[0] != num_patches:
                raise ShapeMismatch(f"stage {s} has shape {stage.shape}, expected ({num_patches}, C)")
            if not np.all(np.isfinite(stage)):
                raise NonFiniteValue(f"stage {s} contains non-finite features")
        if self.modality == MODALITY_IMAGE:
            if self.grid_side is None or self.grid_side * self.grid_side != num_patches:
                raise ShapeMismatch(f"image stack of {num_patches} patches is not a {self.grid_side}^2 grid")
        elif self.modality == MODALITY_CLOUD:
            if self.group_centers is None or self.group_centers.shape != (num_patches, 3):
                raise ShapeMismatch("cloud stack needs one 3D center per group")
            if self.high_curvature_flags is None:
                self.high_curvature_flags = np.zeros(num_patches, dtype=bool)
        else:
            raise ShapeMismatch(f"unknown modality: {self.modality}")

    @property
    def num_patches(self) -> int:
        return self.stages[0].shape[0]

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def stage_dims(self) -> List[int]:
        return [stage.shape[1] for stage in self.stages]

    def with_stages(self, stages: List[np.ndarray]) -> "PatchFeatureStack":
        return PatchFeatureStack(
            modality=self.modality,
            stages=stages,
            grid_side=self.grid_side,
            group_centers=self.group_centers,
            high_curvature_flags=self.high_curvature_flags,
        )


@dataclass
class ScoreSet:
    """Scores one patch received from every gallery sample."""
    scores: np.ndarray
    source_ids: List[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.source_ids) != len(self.scores):
            from .errors import LengthMismatch
            raise LengthMismatch("every score needs a source sample id")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class ProjectionMap:
    """Associates 2D patches with 3D points and points with their owning group."""
    patch_points: List[np.ndarray]  # per 2D patch, point indices
    point_patch: np.ndarray  # per point, 2D patch index or -1
    point_owner: np.ndarray  # per point, nearest group index
    grid_side: int
    num_groups: int

    @property
    def num_points(self) -> int:
        return len(self.point_owner)


@dataclass
class AnomalyMap:
    """Dense anomaly scores in pixel or point space."""
    space: str
    values: np.ndarray
    sample_score: float

    @classmethod
    def create(cls, space: str, values: np.ndarray) -> "AnomalyMap":
        values = np.asarray(values, dtype=np.float64)
        score = float(values.max()) if values.size else 0.0
        return cls(space=space, values=values, sample_score=score)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass
class SimilarityGraph:
    """Sample-level similarity graph used for re-scoring."""
    features: np.ndarray
    weights: np.ndarray
    mask: np.ndarray
    window: int


@dataclass
class RescoreResult:
    scores: np.ndarray
    isolated: List[int] = field(default_factory=list)


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            from .errors import LengthMismatch
            raise LengthMismatch("scores and labels must have equal length")


@dataclass
class RegionSet:
    """Ground-truth masks and score maps evaluated together for PRO."""
    masks: List[np.ndarray]
    score_maps: List[np.ndarray]


@dataclass
class SynthConfig:
    """Knobs of the synthetic multimodal dataset generator."""
    num_samples: int = 40
    grid_side: int = 28
    patch_pixels: int = 4
    feature_dim: int = 16
    num_stages: int = 3
    num_prototypes: int = 4
    noise_sigma: float = 0.05
    anomaly_rate: float = 0.05
    anomaly_magnitude: float = 1.0
    anomaly_patches: int = 3
    bump_amplitude: float = 0.03
    cloud_noise: float = 0.0005
    plateau_height: float = 0.05
    seed: int = 0


@dataclass
class GroundTruth:
    """Generator-side truth for one sample."""
    sample_id: str
    label: int
    pixel_mask: np.ndarray
    point_labels: np.ndarray


@dataclass
class StageTimings:
    """Wall time per pipeline stage, in seconds."""
    grouping: float = 0.0
    aggregation: float = 0.0
    scoring: float = 0.0
    maps: float = 0.0
    rescon: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "grouping": self.grouping,
            "aggregation": self.aggregation,
            "scoring": self.scoring,
            "maps": self.maps,
            "rescon": self.rescon,
        }


# Type aliases for readability
PointCloud = np.ndarray  # M x 3
PatchScoreVector = np.ndarray  # length M
SampleList = List[SampleManifest]
RunSummary = Dict[str, Any]


@dataclass
class DatasetManifest:
    """A dataset document: its name, root directory and samples."""
    name: str
    root: Any  # pathlib.Path
    samples: List[SampleManifest]

    def by_id(self) -> Dict[str, SampleManifest]:
        return {s.sample_id: s for s in self.samples}
