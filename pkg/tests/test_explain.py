"""Unit tests for activation maps, attention saliency and overlays."""

import json
import os
import shutil
import tempfile
import unittest

import matplotlib.pyplot as plt
import numpy as np
import torch
from numpy.testing import assert_allclose, assert_array_equal

from src.cli import CONFIG_DIR
from src.explain.cam import (
    CNN_SOURCE,
    VIT_SOURCE,
    Heatmap,
    as_batch,
    branch_for,
    cnn_cam,
    normalize_map,
    peak_in_box,
    token_saliency,
    vit_attention_map,
)
from src.explain.overlay import composite, grayscale, overlay, to_uint8, write_sidecar
from src.models.checkpoint import parameter_hash
from src.models.predictor import Predictor
from src.training.cross_validation import run_cv
from src.utils.config import load_config
from src.utils.data_loader import load_manifest
from src.utils.exceptions import ConfigError, ContractViolation
from src.utils.synthetic import box_in_model_space, generate_synthetic, load_lesion_ledger
from tests.test_models import build, make_batch, micro_config

SLOW = os.environ.get("HCVT_SLOW_TESTS") == "1"


class TestCNNCam(unittest.TestCase):
    """Test cases for gradient-weighted activation maps."""

    def test_shape_range_and_metadata(self):
        config = micro_config()
        model = build(config)
        heatmap = cnn_cam(model, make_batch(config, batch_size=1), "dwi", 1)
        self.assertEqual(heatmap.values.shape, (16, 16))
        self.assertGreaterEqual(heatmap.values.min(), 0.0)
        self.assertLessEqual(heatmap.values.max(), 1.0)
        self.assertEqual((heatmap.source, heatmap.sequence, heatmap.slice_index), (CNN_SOURCE, "dwi", 1))
        self.assertEqual(heatmap.patient_id, "P0000")

    def test_parameters_untouched(self):
        config = micro_config()
        model = build(config)
        before = parameter_hash(model)
        cnn_cam(model, make_batch(config, batch_size=1), "adc", 0)
        self.assertEqual(parameter_hash(model), before)
        self.assertTrue(all(p.grad is None for p in model.parameters()))
        self.assertFalse(model.training)

    def test_every_variant(self):
        for variant in ("single_branch", "conditional_single_branch", "no_gam", "mri_only"):
            config = micro_config(variant)
            model = build(config)
            heatmap = cnn_cam(model, make_batch(config, batch_size=1), "t2", 0)
            self.assertEqual(heatmap.values.shape, (16, 16), variant)

    def test_bad_slice_and_sequence(self):
        config = micro_config()
        model = build(config)
        batch = make_batch(config, batch_size=1)
        with self.assertRaises(ContractViolation):
            cnn_cam(model, batch, "dwi", 2)
        with self.assertRaises(ContractViolation):
            cnn_cam(model, batch, "flair", 0)

    def test_branch_lookup(self):
        model = build(micro_config("conditional_single_branch"))
        block, call = branch_for(model, "dwi")
        self.assertIs(block, model.branch["shared"])
        self.assertEqual(call, 2)


class TestAttentionMaps(unittest.TestCase):
    """Test cases for ViT attention saliency."""

    def setUp(self):
        self.config = micro_config()
        self.model = build(self.config)
        self.batch = make_batch(self.config, batch_size=1)

    def test_saliency_is_distribution(self):
        for rollout in (False, True):
            saliency = token_saliency(self.model, self.batch, "adc", rollout=rollout)
            self.assertEqual(tuple(saliency.shape), (8,))
            self.assertAlmostEqual(float(saliency.sum()), 1.0, places=6)
            self.assertTrue(bool((saliency >= 0).all()))

    def test_map_shape_and_methods(self):
        heatmap = vit_attention_map(self.model, self.batch, "t2", 1)
        self.assertEqual(heatmap.values.shape, (16, 16))
        self.assertEqual((heatmap.source, heatmap.method), (VIT_SOURCE, "attention"))
        rolled = vit_attention_map(self.model, self.batch, "t2", 1, rollout=True)
        self.assertEqual(rolled.method, "attention_rollout")
        self.assertTrue(0.0 <= rolled.values.min() and rolled.values.max() <= 1.0)

    def test_recording_switched_off(self):
        vit_attention_map(self.model, self.batch, "dwi", 0)
        for block in self.model.branch["dwi"].vit.blocks:
            self.assertFalse(block.record_attention)
            self.assertIsNone(block.attention)

    def test_uniform_attention_gives_zero_map(self):
        attn = self.model.branch["adc"].vit.blocks[1].attn
        with torch.no_grad():
            attn.in_proj_weight.zero_()
            attn.in_proj_bias.zero_()
        with self.assertLogs("src.explain.cam", level="WARNING"):
            heatmap = vit_attention_map(self.model, self.batch, "adc", 0)
        assert_array_equal(heatmap.values, 0.0)

    def test_shallow_vit_refused(self):
        config = micro_config()
        config.vit.depth = 1
        model = build(config)
        with self.assertRaises(ConfigError):
            vit_attention_map(model, make_batch(config, batch_size=1), "adc", 0)


class TestPeakInBox(unittest.TestCase):
    def test_peak_location(self):
        values = np.zeros((16, 16))
        values[5, 9] = 1.0
        heatmap = Heatmap(values, CNN_SOURCE, "grad_weighted_cam", "P0000", "dwi", 0)
        self.assertTrue(peak_in_box(heatmap, (5, 5, 9, 9)))
        self.assertTrue(peak_in_box(heatmap, (0, 15, 0, 15)))
        self.assertFalse(peak_in_box(heatmap, (6, 10, 0, 15)))
        self.assertFalse(peak_in_box(heatmap, (0, 15, 0, 8)))


class TestNormalizeMap(unittest.TestCase):
    def test_min_max(self):
        assert_allclose(normalize_map([[2.0, 4.0], [3.0, 6.0]]), [[0.0, 0.5], [0.25, 1.0]])

    def test_constant(self):
        with self.assertLogs("src.explain.cam", level="WARNING"):
            assert_array_equal(normalize_map(np.full((3, 3), 7.0)), 0.0)


class TestOverlay(unittest.TestCase):
    """Test cases for composites and written images."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        self.slice = rng.random((12, 20))
        self.heat = rng.random((12, 20))

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_zero_heatmap_is_grayscale(self):
        assert_array_equal(composite(self.slice, np.zeros((12, 20))), to_uint8(grayscale(self.slice)))

    def test_full_heat_changes_pixels(self):
        out = composite(self.slice, np.ones((12, 20)))
        self.assertEqual(out.shape, (12, 20, 3))
        self.assertEqual(out.dtype, np.uint8)
        self.assertFalse(np.array_equal(out, to_uint8(grayscale(self.slice))))

    def test_contract(self):
        with self.assertRaises(ContractViolation):
            composite(self.slice, np.zeros((20, 12)))
        with self.assertRaises(ContractViolation):
            composite(self.slice, np.full((12, 20), 1.5))

    def test_repeat_writes_identical(self):
        a = overlay(self.slice, self.heat, os.path.join(self.temp_dir, "a", "map.png"))
        b = overlay(self.slice, self.heat, os.path.join(self.temp_dir, "b", "map.png"))
        with open(a, "rb") as fa, open(b, "rb") as fb:
            self.assertEqual(fa.read(), fb.read())
        self.assertEqual(plt.imread(a).shape[:2], (12, 20))

    def test_sidecar(self):
        config = micro_config()
        heatmap = cnn_cam(build(config), make_batch(config, batch_size=1), "adc", 0)
        slice_2d = np.random.default_rng(1).random((16, 16))
        png = overlay(slice_2d, heatmap.values, os.path.join(self.temp_dir, "m.png"))
        sidecar = write_sidecar(png, heatmap, "abc123")
        with open(sidecar) as f:
            meta = json.load(f)
        self.assertEqual(meta["checkpoint_hash"], "abc123")
        self.assertEqual(meta["source"], CNN_SOURCE)
        self.assertEqual(meta["sequence"], "adc")



@unittest.skipUnless(SLOW, "set HCVT_SLOW_TESTS=1 to train the tiny model for localisation")
class TestLesionLocalisation(unittest.TestCase):
    """CNN maps of a trained tiny model peak on the planted lesion"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_cam_peak_inside_lesion(self):
        data = os.path.join(self.temp_dir, "data")
        run_dir = os.path.join(self.temp_dir, "run")
        generate_synthetic(200, data, seed=0, tiny=True)
        run_cv(data, load_config(os.path.join(CONFIG_DIR, "tiny.json")), run_dir, quiet=True)

        manifest, records = load_manifest(data)
        with open(os.path.join(run_dir, "fold0", "split.json")) as f:
            test_ids = json.load(f)["test"]
        positives = [pid for pid in test_ids if records[pid].label == 1][:10]
        self.assertEqual(len(positives), 10)

        predictor = Predictor.from_checkpoint(os.path.join(run_dir, "fold0", "ckpt.pt"))
        depth, size = predictor.input_shape
        hits = 0
        for pid in positives:
            box = load_lesion_ledger(data, pid)["dwi"]
            slice_index, bounds = box_in_model_space(box, manifest.shapes[pid]["dwi"], depth, size)
            batch = as_batch(predictor.dataset(data, [pid])[0])
            hits += peak_in_box(cnn_cam(predictor.model, batch, "dwi", slice_index), bounds)
        self.assertGreaterEqual(hits, 7)


if __name__ == "__main__":
    unittest.main()
