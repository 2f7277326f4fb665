"""Unit tests for volume and clinical preprocessing."""

import unittest

import numpy as np
import torch
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from src.utils.exceptions import ContractViolation
from src.utils.preprocess import (
    CLINICAL_FEATURES,
    NormStats,
    compute_norm_stats,
    minmax_normalize,
    mixup,
    mixup_batch,
    normalize_clinical,
    prepare_volume,
    random_rotate,
    resize_slices,
    sample_rotation_angle,
    siz_resample,
)
from src.utils.records import ClinicalRecord, Volume


def reference_siz(voxels, target_depth):
    """Cubic spline evaluation at the zoom sample positions, edges held constant"""
    depth, h, w = voxels.shape
    step = (depth - 1) / (target_depth - 1) if target_depth > 1 else 0.0
    z = np.arange(target_depth, dtype=np.float64) * step
    zz, yy, xx = np.meshgrid(z, np.arange(h), np.arange(w), indexing="ij")
    return ndimage.map_coordinates(voxels.astype(np.float64), [zz, yy, xx], order=3, mode="nearest")


def smooth_volume(depth, size, seed=0):
    rng = np.random.default_rng(seed)
    raw = ndimage.gaussian_filter(rng.normal(size=(depth, size, size)), sigma=(0, 4, 4))
    return Volume(voxels=raw.astype(np.float32), sequence="adc", patient_id="P0000")


def record(**overrides):
    values = dict(
        patient_id="P0000",
        age=60,
        sex="male",
        hospitalizations=3,
        tumor_size=2.5,
        multiple_lesions=1,
        t_stage=5,
        grade=0,
        label=1,
    )
    values.update(overrides)
    return ClinicalRecord(**values)


class TestSIZ(unittest.TestCase):
    """Test cases for depth uniformisation."""

    def test_output_depth(self):
        for depth in (1, 5, 13, 26, 60, 200):
            out = siz_resample(smooth_volume(depth, 8), 13)
            self.assertEqual(out.shape, (13, 8, 8), depth)

    def test_identity_at_target(self):
        v = smooth_volume(13, 16)
        out = siz_resample(v, 13)
        assert_array_equal(out.voxels, v.voxels)
        self.assertIsNot(out.voxels, v.voxels)

    def test_against_reference_spline(self):
        for depth in (26, 5):
            v = smooth_volume(depth, 12, seed=depth)
            out = siz_resample(v, 13)
            assert_allclose(out.voxels, reference_siz(v.voxels, 13), atol=1e-5)

    def test_invalid_target(self):
        with self.assertRaises(ContractViolation):
            siz_resample(smooth_volume(4, 8), 0)


class TestResize(unittest.TestCase):
    """Test cases for in-plane resizing."""

    def test_native_to_model_size(self):
        v = Volume(np.random.rand(2, 280, 280).astype(np.float32), "t2")
        self.assertEqual(resize_slices(v, 256).shape, (2, 256, 256))

    def test_constant_slice_stays_constant(self):
        v = Volume(np.full((3, 40, 40), 0.37, dtype=np.float32), "t2")
        assert_allclose(resize_slices(v, 64).voxels, 0.37, atol=1e-6)

    def test_identity_at_size(self):
        v = smooth_volume(2, 32)
        assert_array_equal(resize_slices(v, 32).voxels, v.voxels)

    def test_too_small(self):
        with self.assertRaises(ContractViolation):
            resize_slices(Volume(np.zeros((2, 8, 8), dtype=np.float32), "dwi"), 64)

    def test_prepare_volume_range_and_repeatability(self):
        v = smooth_volume(20, 48)
        a = prepare_volume(v, depth=8, size=32)
        b = prepare_volume(v, depth=8, size=32)
        self.assertEqual(a.shape, (8, 32, 32))
        self.assertAlmostEqual(float(a.voxels.min()), 0.0)
        self.assertAlmostEqual(float(a.voxels.max()), 1.0, places=6)
        assert_array_equal(a.voxels, b.voxels)

    def test_minmax_constant(self):
        v = Volume(np.full((2, 16, 16), 4.0, dtype=np.float32), "adc")
        assert_array_equal(minmax_normalize(v).voxels, 0.0)


class TestRotation(unittest.TestCase):
    """Test cases for rotation augmentation."""

    def test_zero_angle_identity(self):
        v = smooth_volume(3, 32)
        assert_array_equal(random_rotate(v, angle=0.0).voxels, v.voxels)

    def test_round_trip(self):
        v = smooth_volume(2, 64)
        back = random_rotate(random_rotate(v, angle=20.0), angle=-20.0)
        yy, xx = np.mgrid[:64, :64]
        # only the disc that never leaves the field of view is comparable
        mask = (yy - 31.5) ** 2 + (xx - 31.5) ** 2 < 28.0 ** 2
        span = float(v.voxels.max() - v.voxels.min())
        mae = np.abs(back.voxels - v.voxels)[:, mask].mean() / span
        self.assertLess(mae, 0.02)

    def test_same_angle_for_every_slice(self):
        slice_ = smooth_volume(1, 32).voxels[0]
        v = Volume(np.stack([slice_, slice_]), "adc")
        out = random_rotate(v, rng=np.random.default_rng(3))
        assert_array_equal(out.voxels[0], out.voxels[1])

    def test_sampler_range(self):
        rng = np.random.default_rng(0)
        angles = np.array([sample_rotation_angle(rng, 30.0) for _ in range(10_000)])
        self.assertTrue(np.all((angles >= -30.0) & (angles <= 30.0)))


class TestMixup(unittest.TestCase):
    """Test cases for mixup."""

    def setUp(self):
        g = torch.Generator().manual_seed(0)
        self.a = {"adc": torch.rand(2, 1, 2, 4, 4, generator=g), "clinical": torch.rand(2, 7, generator=g),
                  "label": torch.tensor([1.0, 0.0]), "patient_id": ["A", "B"]}
        self.b = {"adc": torch.rand(2, 1, 2, 4, 4, generator=g), "clinical": torch.rand(2, 7, generator=g),
                  "label": torch.tensor([0.0, 0.0]), "patient_id": ["C", "D"]}

    def test_lambda_one(self):
        mixed, lam = mixup(self.a, self.b, lam=1.0)
        self.assertEqual(lam, 1.0)
        self.assertTrue(torch.equal(mixed["adc"], self.a["adc"]))
        self.assertTrue(torch.equal(mixed["label"], self.a["label"]))
        self.assertEqual(mixed["patient_id"], ["A", "B"])

    def test_lambda_half(self):
        mixed, _ = mixup(self.a, self.b, lam=0.5)
        assert_allclose(mixed["clinical"].numpy(), ((self.a["clinical"] + self.b["clinical"]) / 2).numpy(), atol=1e-7)
        assert_allclose(mixed["label"].numpy(), [0.5, 0.0])

    def test_labels_stay_between(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            mixed, lam = mixup(self.a, self.b, alpha=0.2, rng=rng)
            self.assertTrue(0.0 <= lam <= 1.0)
            lo = torch.minimum(self.a["label"], self.b["label"])
            hi = torch.maximum(self.a["label"], self.b["label"])
            self.assertTrue(bool(((mixed["label"] >= lo) & (mixed["label"] <= hi)).all()))

    def test_shape_mismatch(self):
        b = dict(self.b, adc=torch.rand(2, 1, 3, 4, 4))
        with self.assertRaises(ContractViolation):
            mixup(self.a, b, lam=0.5)

    def test_mixup_batch_keeps_shapes(self):
        mixed, _ = mixup_batch(self.a, 0.2, np.random.default_rng(2))
        self.assertEqual(mixed["adc"].shape, self.a["adc"].shape)


class TestClinical(unittest.TestCase):
    """Test cases for clinical normalisation."""

    def test_examples(self):
        stats = NormStats(mean=[60.0, 3.0, 2.0], std=[10.0, 1.0, 0.5])
        vec = normalize_clinical(record(), stats)
        self.assertEqual(vec.shape, (len(CLINICAL_FEATURES),))
        self.assertEqual(vec.dtype, np.float32)
        self.assertAlmostEqual(float(vec[0]), 0.0)
        self.assertEqual(float(vec[1]), 1.0)
        self.assertAlmostEqual(float(vec[3]), 1.0)
        self.assertEqual(float(vec[5]), 1.0)
        self.assertTrue(np.all(np.isfinite(vec)))

    def test_unseen_value(self):
        stats = NormStats(mean=[0.0] * 3, std=[1.0] * 3)
        with self.assertRaises(ContractViolation):
            normalize_clinical(record(sex="unknown"), stats)

    def test_zero_variance_replaced(self):
        records = [record(patient_id=f"P{i}", age=50 + i, hospitalizations=2) for i in range(4)]
        with self.assertLogs("src.utils.preprocess", level="WARNING"):
            stats = compute_norm_stats(records)
        self.assertEqual(stats.std[1], 1.0)
        self.assertEqual(compute_norm_stats(records), stats)

    def test_round_trip_dict(self):
        stats = NormStats(mean=[1.0, 2.0, 3.0], std=[0.5, 1.5, 2.5])
        self.assertEqual(NormStats.from_dict(stats.to_dict()), stats)


if __name__ == "__main__":
    unittest.main()
