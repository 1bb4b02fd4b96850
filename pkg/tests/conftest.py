"""
Shared fixtures for the muscore test suite.
"""

import copy
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from muscore.config import DEFAULT
from muscore.synth_bench import synthesize, write_synthetic_dataset
from muscore.types import SynthConfig


@pytest.fixture
def rng():
    """Seeded generator for random test instances."""
    return np.random.default_rng(1234)


@pytest.fixture
def test_config(tmp_path):
    """Defaults scaled down for small synthetic clouds, writing under tmp_path."""
    config = copy.deepcopy(DEFAULT)
    config["grouping"].update({"num_groups": 64, "group_size": 32, "k_iter": 8})
    config["run"].update({"cache": False, "progress": False})
    config["paths"]["output"] = str(tmp_path / "run")
    config["paths"]["cache"] = str(tmp_path / "cache")
    return config


@pytest.fixture
def small_synth_config():
    return SynthConfig(num_samples=8, grid_side=8, patch_pixels=4, feature_dim=8,
                       num_stages=3, anomaly_rate=0.25, seed=7)


@pytest.fixture
def small_dataset(tmp_path, small_synth_config):
    """A small synthetic multimodal dataset written to disk."""
    data = synthesize(small_synth_config)
    manifest = write_synthetic_dataset(data, tmp_path / "dataset")
    return manifest, data
