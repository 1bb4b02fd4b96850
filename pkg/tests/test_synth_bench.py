"""
Tests for the synthetic dataset generator, the geometric descriptor and the reference oracles.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from muscore.errors import InvalidConfig
from muscore.synth_bench import (
    descriptor_dim,
    generate_synthetic_dataset,
    geometric_descriptor,
    oracle_pairwise_min,
    oracle_rescore,
    prototype_layout,
    stage_member_count,
    synthesize,
)
from muscore.tensor_io import load_manifest, load_mask, load_tensor, validate_dataset
from muscore.types import PointGroup, SynthConfig


def _group(n):
    return PointGroup(center_index=0, member_indices=np.arange(n), curvature=0.0)


class TestGenerator:
    """Planted-anomaly datasets."""

    def test_no_anomalies(self):
        data = synthesize(SynthConfig(num_samples=6, grid_side=6, anomaly_rate=0.0))
        assert all(gt.label == 0 for gt in data.ground_truth)
        assert all(not gt.pixel_mask.any() for gt in data.ground_truth)
        assert all(m.label == "normal" for m in data.manifests)

    def test_anomalous_count(self):
        data = synthesize(SynthConfig(num_samples=20, grid_side=6, anomaly_rate=0.3, seed=11))
        assert sum(gt.label for gt in data.ground_truth) == 6
        assert len(data.defects) == 6

    def test_at_least_one_anomaly(self):
        data = synthesize(SynthConfig(num_samples=5, grid_side=6, anomaly_rate=0.01))
        assert sum(gt.label for gt in data.ground_truth) == 1

    def test_mask_is_defect_box(self):
        config = SynthConfig(num_samples=8, grid_side=10, anomaly_rate=0.25, seed=2)
        data = synthesize(config)
        for gt in data.ground_truth:
            if gt.label:
                r0, r1, c0, c1 = data.defects[gt.sample_id].pixel_box(config.patch_pixels)
                assert gt.pixel_mask.sum() == (3 * 4) ** 2
                assert gt.pixel_mask[r0:r1, c0:c1].all()
                assert np.array_equal(gt.point_labels.astype(bool), gt.pixel_mask.ravel())

    def test_same_seed_same_files(self, tmp_path):
        config = SynthConfig(num_samples=5, grid_side=6, anomaly_rate=0.4, seed=4)
        generate_synthetic_dataset(config, tmp_path / "a")
        generate_synthetic_dataset(config, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_differs(self):
        a = synthesize(SynthConfig(num_samples=4, grid_side=4, seed=1))
        b = synthesize(SynthConfig(num_samples=4, grid_side=4, seed=2))
        assert not np.allclose(a.image_stages["sample_000"][0], b.image_stages["sample_000"][0])

    def test_written_dataset(self, tmp_path):
        config = SynthConfig(num_samples=6, grid_side=6, anomaly_rate=0.3, seed=5)
        manifest, truth = generate_synthetic_dataset(config, tmp_path / "ds")
        loaded = load_manifest(tmp_path / "ds")
        assert [s.sample_id for s in loaded.samples] == [f"sample_{i:03d}" for i in range(6)]
        assert validate_dataset(loaded.samples, loaded.root).ok

        with open(tmp_path / "ds" / "ground_truth.json") as f:
            recorded = json.load(f)
        assert recorded["config"]["seed"] == 5
        assert [s["label"] for s in recorded["samples"]] == [gt.label for gt in truth]

        sample = loaded.samples[0]
        assert load_tensor(tmp_path / "ds" / sample.cloud_path).shape == (24, 24, 3)
        assert load_tensor(tmp_path / "ds" / sample.image_feature_paths[0]).shape == (36, 16)
        assert np.array_equal(load_mask(tmp_path / "ds" / sample.mask_path), truth[0].pixel_mask)

    def test_layout_bands(self):
        layout = prototype_layout(8, 4).reshape(8, 8)
        assert layout[:, 0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
        assert np.all(layout == layout[:, :1])

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            synthesize(SynthConfig(num_samples=1))
        with pytest.raises(InvalidConfig):
            synthesize(SynthConfig(feature_dim=4, num_prototypes=4))
        with pytest.raises(InvalidConfig):
            synthesize(SynthConfig(anomaly_rate=1.5))
        with pytest.raises(InvalidConfig):
            synthesize(SynthConfig(anomaly_magnitude=0.1, noise_sigma=0.05))


class TestGeneratorSoundness:
    """Planted anomalies are far from every prototype, normal patches stay close."""

    def test_anomalies_are_separated(self):
        config = SynthConfig(num_samples=6, grid_side=8, anomaly_rate=0.5, noise_sigma=0.0, seed=8)
        data = synthesize(config)
        for gt in data.ground_truth:
            patch_truth = gt.pixel_mask[::config.patch_pixels, ::config.patch_pixels].ravel()
            for s, stage in enumerate(data.image_stages[gt.sample_id]):
                for feature in stage[patch_truth]:
                    dist = np.linalg.norm(data.prototypes[s] - feature, axis=1)
                    assert dist.min() >= config.anomaly_magnitude - 1e-9

    def test_normal_noise_within_three_sigma(self):
        config = SynthConfig(num_samples=2, grid_side=28, anomaly_rate=0.0, seed=3)
        data = synthesize(config)
        layout = prototype_layout(config.grid_side, config.num_prototypes)
        offsets = np.concatenate([
            (stage - data.prototypes[s][layout]).ravel()
            for s, stage in enumerate(data.image_stages["sample_000"])
        ])
        assert offsets.size >= 10 ** 4
        assert np.mean(np.abs(offsets) <= 3 * config.noise_sigma) >= 0.995


class TestDescriptor:
    """Geometric descriptor of a point group."""

    def test_dimension(self, rng):
        assert geometric_descriptor(_group(20), rng.normal(size=(20, 3)), bins=5).shape == (descriptor_dim(5),)

    def test_planar_group(self, rng):
        cloud = np.column_stack([rng.uniform(size=30), rng.uniform(size=30), np.zeros(30)])
        descriptor = geometric_descriptor(_group(30), cloud)
        assert descriptor[3] == pytest.approx(0.0, abs=1e-12)
        assert descriptor[4] == pytest.approx(1.0)

    def test_scaling(self, rng):
        cloud = rng.normal(scale=0.02, size=(40, 3))
        base = geometric_descriptor(_group(40), cloud, radius=0.08)
        scaled = geometric_descriptor(_group(40), 2 * cloud, radius=0.16)
        assert np.allclose(scaled[:3], 4 * base[:3])
        assert scaled[3] == pytest.approx(base[3])
        assert scaled[5] == pytest.approx(8 * base[5])
        assert scaled[6] == pytest.approx(2 * base[6])
        assert np.allclose(scaled[7:], base[7:])

    def test_translation(self, rng):
        cloud = rng.normal(scale=0.02, size=(25, 3))
        a = geometric_descriptor(_group(25), cloud)
        b = geometric_descriptor(_group(25), cloud + np.array([1.0, -2.0, 0.5]))
        assert np.allclose(a, b, atol=1e-9)

    def test_histogram_sums_to_one(self, rng):
        descriptor = geometric_descriptor(_group(50), rng.normal(size=(50, 3)), bins=6)
        assert descriptor[7:].sum() == pytest.approx(1.0)

    def test_stage_prefixes(self):
        assert stage_member_count(128, 0, 3) == 43
        assert stage_member_count(128, 2, 3) == 128
        assert stage_member_count(6, 0, 3) == 4
        assert stage_member_count(3, 0, 1) == 3


class TestOracles:
    """Brute-force references."""

    def test_pairwise_min_identity(self, rng):
        features = rng.normal(size=(6, 3))
        assert np.all(oracle_pairwise_min(features, features) == 0.0)

    def test_pairwise_min_scalar(self):
        assert oracle_pairwise_min(np.array([[0.0]]), np.array([[3.0]])).tolist() == [3.0]

    def test_rescore_fixed_point(self):
        weights = np.ones((3, 3)) - np.eye(3)
        assert np.allclose(oracle_rescore(np.full(3, 0.4), weights, weights), 0.4)

    def test_rescore_hand_example(self):
        weights = np.ones((3, 3)) - np.eye(3)
        mask = np.array([[0, 1, 0], [1, 0, 0], [1, 0, 0]])
        assert oracle_rescore(np.array([0.4, 0.8, 0.1]), weights, mask)[0] == pytest.approx(0.6)
