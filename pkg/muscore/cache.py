"""
On-disk cache for point groupings and aggregated feature stacks.

Entries are keyed by the content hash of their inputs plus the parameters
that produced them, so a changed hyperparameter never returns a stale entry.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import TensorFormatError
from .ids import content_key
from .tensor_io import load_tensor, save_tensor
from .types import GroupSet

logger = logging.getLogger(__name__)


class ArtifactCache:
    """Group sets stored as JSON, aggregated stages as `.mt` tensors."""

    def __init__(self, root: str, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        if self.enabled:
            (self.root / "groups").mkdir(parents=True, exist_ok=True)
            (self.root / "stacks").mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: str, params: Dict[str, Any] = None) -> str:
        return content_key(*parts, params=params)

    def _groups_path(self, key: str) -> Path:
        return self.root / "groups" / f"{key}.json"

    def _stage_path(self, key: str, stage: int) -> Path:
        return self.root / "stacks" / f"{key}_s{stage}.mt"

    def get_groups(self, key: str) -> Optional[GroupSet]:
        if not self.enabled:
            return None
        path = self._groups_path(key)
        if not path.exists():
            self.misses += 1
            logger.debug(f"Group cache miss: {key}")
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                groups = GroupSet.from_dict(json.load(f))
        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"Ignoring unreadable group cache entry {path}: {e}")
            self.misses += 1
            return None
        self.hits += 1
        logger.debug(f"Group cache hit: {key}")
        return groups

    def put_groups(self, key: str, groups: GroupSet):
        if not self.enabled:
            return
        path = self._groups_path(key)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(groups.to_dict(), f)
        tmp.replace(path)

    def get_stages(self, key: str, num_stages: int) -> Optional[List[np.ndarray]]:
        if not self.enabled:
            return None
        paths = [self._stage_path(key, s) for s in range(num_stages)]
        if not all(p.exists() for p in paths):
            self.misses += 1
            logger.debug(f"Stack cache miss: {key}")
            return None
        try:
            stages = [load_tensor(p).data.astype(np.float64) for p in paths]
        except (OSError, TensorFormatError) as e:
            logger.warning(f"Ignoring unreadable stack cache entry {key}: {e}")
            self.misses += 1
            return None
        self.hits += 1
        logger.debug(f"Stack cache hit: {key}")
        return stages

    def put_stages(self, key: str, stages: List[np.ndarray]):
        if not self.enabled:
            return
        for s, stage in enumerate(stages):
            save_tensor(self._stage_path(key, s), np.asarray(stage, dtype=np.float32))

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics."""
        return {"enabled": self.enabled, "hits": self.hits, "misses": self.misses, "root": str(self.root)}
