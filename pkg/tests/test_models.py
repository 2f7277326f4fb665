"""Unit tests for the network, its variants and the checkpoint archive."""

import os
import shutil
import tempfile
import unittest

import torch
from numpy.testing import assert_allclose
from torch.autograd import gradcheck
from torch.func import functional_call

from src.models.checkpoint import FORMAT_VERSION, load_checkpoint, parameter_hash, read_checkpoint, save_checkpoint
from src.models.extractors import CNNExtractor, ViTExtractor
from src.models.gam import simplex_bounds
from src.models.hcnn_vit import (
    build_variant,
    classify,
    clinical_encode,
    cnn_extract,
    count_parameters,
    dpa_forward,
    model_forward,
    variant_forward,
)
from src.utils.config import (
    SEQUENCES,
    VARIANTS,
    ClinicalConfig,
    CNNConfig,
    HeadConfig,
    InputConfig,
    ModelConfig,
    ViTConfig,
    tiny_model_config,
)
from src.utils.exceptions import ConfigError, ContractViolation, DataFormatError

SLOW = os.environ.get("HCVT_SLOW_TESTS") == "1"


def micro_config(variant="full", kind="plain"):
    """Smallest valid shapes: 2 slices of 16x16, d_f 8"""
    return ModelConfig(
        fusion_dim=8,
        variant=variant,
        vit=ViTConfig(patch_size=8, frame_patch_size=1, embed_dim=8, depth=2, heads=2, mlp_dim=16),
        cnn=CNNConfig(channels=[2, 4, 4], kind=kind),
        clinical=ClinicalConfig(hidden=[8]),
        head=HeadConfig(hidden=[8]),
        input=InputConfig(depth=2, size=16),
    )


def make_batch(config, batch_size=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    d, s = config.input.depth, config.input.size
    batch = {seq: torch.rand(batch_size, 1, d, s, s, generator=g, dtype=dtype) for seq in ("adc", "t2", "dwi")}
    batch["clinical"] = torch.randn(batch_size, 7, generator=g, dtype=dtype)
    batch["patient_id"] = [f"P{i:04d}" for i in range(batch_size)]
    return batch


def build(config, seed=0):
    torch.manual_seed(seed)
    return build_variant(config).eval()


class TestExtractors(unittest.TestCase):
    """Test cases for the CNN and ViT paths."""

    def test_cnn_shape_and_slice_permutation(self):
        torch.manual_seed(0)
        cnn = CNNExtractor(8, [4, 8, 8], fusion_dim=12).eval()
        x = torch.randn(2, 8, 2, 16, 16)
        z = cnn_extract(x, cnn)
        self.assertEqual(tuple(z.shape), (2, 12))
        swapped = x[:, :, [1, 0]]
        assert_allclose(cnn(swapped).detach().numpy(), z.detach().numpy(), atol=1e-6)

    def test_cnn_unbatched(self):
        cnn = CNNExtractor(1, [2, 2, 2], fusion_dim=5)
        self.assertEqual(tuple(cnn_extract(torch.randn(1, 3, 16, 16), cnn).shape), (5,))

    def test_cnn_too_small(self):
        cnn = CNNExtractor(1, [2, 2, 2], fusion_dim=5)
        with self.assertRaises(ContractViolation):
            cnn(torch.randn(1, 1, 2, 4, 4))

    def test_residual_kind(self):
        cnn = CNNExtractor(1, [2, 4, 4], fusion_dim=6, kind="residual")
        self.assertEqual(tuple(cnn(torch.randn(1, 1, 2, 16, 16)).shape), (1, 6))
        with self.assertRaises(ConfigError):
            CNNExtractor(1, [2, 4, 4], fusion_dim=6, kind="dense")

    def test_vit_token_count(self):
        vit = ViTExtractor(1, 13, 256, ViTConfig(embed_dim=16, depth=1, heads=2, mlp_dim=16), fusion_dim=4)
        self.assertEqual(vit.num_tokens, 3328)
        self.assertEqual(vit.tokens_of_slice(2), (512, 768))

    def test_vit_divisibility(self):
        with self.assertRaises(ConfigError):
            ViTExtractor(1, 4, 20, ViTConfig(patch_size=16, embed_dim=8, depth=1, heads=2, mlp_dim=8), 4)

    def test_vit_deterministic_without_dropout(self):
        torch.manual_seed(0)
        vit = ViTExtractor(1, 2, 16, ViTConfig(patch_size=8, embed_dim=8, depth=2, heads=2, mlp_dim=16), 4).eval()
        x = torch.randn(1, 1, 2, 16, 16)
        self.assertTrue(torch.equal(vit(x), vit(x)))


class TestModel(unittest.TestCase):
    """Test cases for the assembled model."""

    def test_shapes_and_bounds(self):
        config = micro_config()
        pred = build(config)(make_batch(config, batch_size=3))
        self.assertEqual(tuple(pred.probability.shape), (3,))
        self.assertTrue(bool(((pred.probability > 0) & (pred.probability < 1)).all()))
        self.assertEqual(tuple(pred.branch_betas.shape), (3, 4))
        assert_allclose(pred.branch_betas.sum(-1).detach().numpy(), 1.0, atol=1e-6)
        lo, hi = simplex_bounds(4)
        self.assertTrue(bool((pred.branch_betas >= lo - 1e-6).all() and (pred.branch_betas <= hi + 1e-6).all()))
        lo2, hi2 = simplex_bounds(2)
        for alphas in pred.per_branch_alphas.values():
            self.assertEqual(tuple(alphas.shape), (3, 2))
            self.assertTrue(bool((alphas >= lo2 - 1e-6).all() and (alphas <= hi2 + 1e-6).all()))

    def test_every_variant_builds(self):
        expected_n = {"single_branch": 2, "mri_only": 3}
        for variant in VARIANTS:
            config = micro_config(variant)
            model = build(config)
            pred = variant_forward(make_batch(config), model)
            self.assertEqual(pred.branch_betas.shape[-1], expected_n.get(variant, 4), variant)
            self.assertEqual(model.n_branches, expected_n.get(variant, 4))

    def test_unknown_variant(self):
        with self.assertRaises(ConfigError) as ctx:
            build_variant(micro_config("no_such_variant"))
        self.assertIn("mri_only", str(ctx.exception))

    def test_model_forward_restricted(self):
        config = micro_config("no_gam")
        with self.assertRaises(ConfigError):
            model_forward(make_batch(config), build(config))
        config = micro_config("mri_only")
        self.assertEqual(model_forward(make_batch(config), build(config)).branch_betas.shape[-1], 3)

    def test_missing_sequence(self):
        config = micro_config()
        batch = make_batch(config)
        del batch["t2"]
        with self.assertRaises(ContractViolation) as ctx:
            build(config)(batch)
        self.assertIn("t2", str(ctx.exception))
        self.assertIn("P0000", str(ctx.exception))

    def test_single_branch_is_smaller(self):
        self.assertLess(count_parameters(build(micro_config("single_branch"))),
                        count_parameters(build(micro_config("full"))))
        self.assertLess(count_parameters(build_variant(tiny_model_config("single_branch"))),
                        count_parameters(build_variant(tiny_model_config("full"))))

    def test_parameter_names(self):
        names = list(build(micro_config()).state_dict())
        for prefix in ("branch.adc.conv_vit.", "branch.t2.conv_cnn.", "branch.dwi.vit.", "branch.adc.cnn.",
                       "branch.adc.gate_vit.", "branch.adc.gate_cnn.", "clinical.", "global_gam.gate.3.", "head."):
            self.assertTrue(any(n.startswith(prefix) for n in names), prefix)

    def test_determinism(self):
        config = micro_config()
        a, b = build(config, seed=3), build(config, seed=3)
        self.assertEqual(parameter_hash(a), parameter_hash(b))
        batch = make_batch(config)
        self.assertTrue(torch.equal(a(batch).probability, b(batch).probability))


class TestAblationEquivalences(unittest.TestCase):
    """Gating replacements against explicit arithmetic."""

    def test_no_local_gam_is_path_mean(self):
        config = micro_config("no_local_gam")
        model = build(config)
        x = make_batch(config)["adc"]
        block = model.branch["adc"]
        y, alphas = dpa_forward(x, block)
        z_vit, z_cnn = block.extract(x)
        self.assertTrue(torch.equal(y, (z_vit + z_cnn) / 2))
        assert_allclose(alphas.numpy(), 0.5)

    def test_uniform_gates_match_no_gam(self):
        full = build(micro_config("full"), seed=1)
        for name, p in full.named_parameters():
            if ".gate_vit." in name or ".gate_cnn." in name or name.startswith("global_gam."):
                with torch.no_grad():
                    p.zero_()
        no_gam = build(micro_config("no_gam"), seed=2)
        shared = {k: v for k, v in full.state_dict().items() if k in no_gam.state_dict()}
        no_gam.load_state_dict(shared)
        batch = make_batch(micro_config())
        assert_allclose(full(batch).probability.detach().numpy(),
                        no_gam(batch).probability.detach().numpy(), atol=1e-6)

    def test_no_gam_hand_computed(self):
        config = micro_config("no_gam")
        model = build(config)
        batch = make_batch(config)
        with torch.no_grad():
            ys = []
            for seq in ("adc", "t2", "dwi"):
                z_vit, z_cnn = model.branch[seq].extract(batch[seq])
                ys.append((z_vit + z_cnn) / 2)
            ys.append(model.clinical(batch["clinical"]))
            expected = torch.sigmoid(model.head(sum(ys) / 4))
            assert_allclose(model(batch).probability.numpy(), expected.numpy(), atol=1e-6)

    def test_conditional_zero_tokens(self):
        config = micro_config("conditional_single_branch")
        model = build(config)
        with torch.no_grad():
            model.condition_tokens.zero_()
        batch = make_batch(config)
        with torch.no_grad():
            shared = model.branch["shared"]
            ys = [shared(batch[seq])[0] for seq in ("adc", "t2", "dwi")]
            ys.append(model.clinical(batch["clinical"]))
            Y, _ = model.global_gam(ys)
            expected = torch.sigmoid(model.head(Y))
            assert_allclose(model(batch).probability.numpy(), expected.numpy(), atol=1e-6)

    def test_tied_branches_give_equal_betas(self):
        config = micro_config()
        model = build(config)
        adc = model.branch["adc"].state_dict()
        model.branch["t2"].load_state_dict(adc)
        model.branch["dwi"].load_state_dict(adc)
        with torch.no_grad():
            for i in (1, 2):
                model.global_gam.gate[i].weight.copy_(model.global_gam.gate[0].weight)
                model.global_gam.gate[i].bias.copy_(model.global_gam.gate[0].bias)
        batch = make_batch(config)
        batch["t2"] = batch["adc"].clone()
        batch["dwi"] = batch["adc"].clone()
        betas = model(batch).branch_betas.detach().numpy()
        assert_allclose(betas[:, 1], betas[:, 0], atol=1e-7)
        assert_allclose(betas[:, 2], betas[:, 0], atol=1e-7)


class TestHeadsAndGradients(unittest.TestCase):
    """Clinical encoder, classification head and gradient flow."""

    def test_clinical_zero_input(self):
        model = build(micro_config())
        with torch.no_grad():
            for name, p in model.clinical.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        out = clinical_encode(torch.zeros(7), model.clinical)
        self.assertEqual(tuple(out.shape), (8,))
        self.assertTrue(torch.equal(out, torch.zeros(8)))

    def test_clinical_rejects_nan(self):
        model = build(micro_config())
        with self.assertRaises(ContractViolation):
            clinical_encode(torch.tensor([float("nan")] + [0.0] * 6), model.clinical)

    def test_classify(self):
        model = build(micro_config())
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        self.assertAlmostEqual(float(classify(torch.randn(8), model.head)), 0.5, places=7)
        last = model.head.net[-1]
        Y = torch.randn(8)
        with torch.no_grad():
            last.bias.fill_(0.1)
            low = float(classify(Y, model.head))
            last.bias.fill_(0.2)
            high = float(classify(Y, model.head))
        self.assertGreater(high, low)

    def test_classify_saturated_logit_stays_open(self):
        config = micro_config()
        model = build(config)
        last = model.head.net[-1]
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
            for bias in (40.0, -40.0):
                last.bias.fill_(bias)
                p = float(classify(torch.zeros(8), model.head))
                self.assertTrue(0.0 < p < 1.0, bias)
                probability = model(make_batch(config)).probability
                self.assertTrue(bool(((probability > 0) & (probability < 1)).all()), bias)

    def test_gradient_flow(self):
        for variant in ("full", "conditional_single_branch"):
            config = micro_config(variant)
            model = build(config)
            pred = model(make_batch(config, batch_size=6, seed=4))
            torch.nn.functional.binary_cross_entropy(pred.probability, torch.tensor([0.0, 1.0] * 3)).backward()
            for name, p in model.named_parameters():
                self.assertIsNotNone(p.grad, name)
                self.assertGreater(float(p.grad.abs().max()), 0.0, name)

    def test_gradcheck_clinical_path(self):
        for seed in range(20):
            model = build(micro_config(), seed=seed).double()
            batch = make_batch(micro_config(), batch_size=1, seed=seed, dtype=torch.float64)
            c = batch.pop("clinical").requires_grad_(True)

            def fn(clinical):
                return model(dict(batch, clinical=clinical)).probability

            self.assertTrue(torch.autograd.gradcheck(fn, (c,), eps=1e-5, atol=1e-7, rtol=1e-4))
            self.assertTrue(torch.autograd.gradcheck(lambda x: clinical_encode(x, model.clinical), (c,),
                                                     eps=1e-5, atol=1e-7, rtol=1e-4))

    def test_gradcheck_image_inputs(self):
        config = micro_config()
        for seed in range(20):
            model = build(config, seed=seed).double()
            batch = make_batch(config, batch_size=1, seed=seed, dtype=torch.float64)
            volumes = tuple(batch[s].requires_grad_(True) for s in SEQUENCES)

            def fn(adc, t2, dwi):
                return model(dict(batch, adc=adc, t2=t2, dwi=dwi)).probability

            self.assertTrue(gradcheck(fn, volumes, eps=1e-5, atol=1e-7, rtol=1e-4, fast_mode=True), seed)

    def test_gradcheck_parameter_sample(self):
        config = micro_config()
        for seed in range(5):
            model = build(config, seed=seed).double()
            batch = make_batch(config, batch_size=2, seed=seed, dtype=torch.float64)
            named = dict(model.named_parameters())
            names = [n for n in sorted(named) if named[n].numel() <= 32][::3]
            self.assertGreater(len(names), 3)
            values = tuple(named[n].detach().clone().requires_grad_(True) for n in names)

            def fn(*params):
                return functional_call(model, dict(zip(names, params)), (batch,)).probability

            self.assertTrue(gradcheck(fn, values, eps=1e-5, atol=1e-7, rtol=1e-4), seed)


class TestCheckpoint(unittest.TestCase):
    """Test cases for the checkpoint archive."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "ckpt.pt")

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip(self):
        config = micro_config("conditional_single_branch")
        model = build(config, seed=5)
        save_checkpoint(self.path, model, {"norm_stats": {"mean": [1.0], "std": [2.0]}, "epoch": 3})
        loaded, extras = load_checkpoint(self.path)
        self.assertEqual(parameter_hash(loaded), parameter_hash(model))
        self.assertEqual(extras["epoch"], 3)
        self.assertEqual(loaded.config, config)
        self.assertFalse(loaded.training)
        batch = make_batch(config)
        self.assertTrue(torch.equal(loaded(batch).probability, model(batch).probability))
        self.assertEqual(read_checkpoint(self.path)["format_version"], FORMAT_VERSION)

    def test_bad_format(self):
        torch.save({"format_version": "other-1"}, self.path)
        with self.assertRaises(DataFormatError):
            load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(DataFormatError):
            load_checkpoint(os.path.join(self.temp_dir, "absent.pt"))



@unittest.skipUnless(SLOW, "set HCVT_SLOW_TESTS=1 for tiny-model gradient checks")
class TestTinyModelGradients(unittest.TestCase):
    """Finite differences through the full tiny model in double precision"""

    def test_gradcheck_all_inputs(self):
        config = tiny_model_config()
        for seed in range(20):
            model = build(config, seed=seed).double()
            batch = make_batch(config, batch_size=1, seed=seed, dtype=torch.float64)
            inputs = tuple(batch[k].requires_grad_(True) for k in SEQUENCES + ("clinical",))

            def fn(adc, t2, dwi, clinical):
                return model(dict(batch, adc=adc, t2=t2, dwi=dwi, clinical=clinical)).probability

            self.assertTrue(gradcheck(fn, inputs, eps=1e-5, atol=1e-7, rtol=1e-4, fast_mode=True), seed)


if __name__ == "__main__":
    unittest.main()
