"""
Utility functions for generating stable content keys for cached artifacts.
"""

import hashlib
import json
from typing import Any, Dict

import numpy as np


def array_sha256(array: np.ndarray) -> str:
    """Hash an array's dtype, shape and bytes."""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()


def canonical_params(params: Dict[str, Any]) -> str:
    """JSON text of parameters with sorted keys, stable across runs."""
    return json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)


def content_key(*parts: str, params: Dict[str, Any] = None) -> str:
    """Key for an artifact derived from content hashes plus parameters."""
    content = "|".join(parts) + "|" + canonical_params(params or {})
    return hashlib.sha1(content.encode()).hexdigest()
