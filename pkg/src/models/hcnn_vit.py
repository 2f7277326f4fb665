"""
H-CNN-ViT Network

Per-sequence dual-path attention (DPA) branches, clinical MLP encoder,
Global GAM and classification head, plus the ablation variants.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn as nn

from src.models.extractors import CNNExtractor, ViTExtractor
from src.models.gam import GateParams, GlobalGAM, local_gam_fuse, uniform_fuse
from src.utils.config import SEQUENCES
from src.utils.exceptions import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

LOCAL_GATED = ("full", "no_global_gam", "single_branch", "conditional_single_branch", "mri_only")
GLOBAL_GATED = ("full", "no_local_gam", "single_branch", "conditional_single_branch", "mri_only")


@dataclass
class Prediction:
    probability: torch.Tensor
    logit: torch.Tensor
    branch_betas: torch.Tensor
    per_branch_alphas: Dict[str, torch.Tensor]
    branch_names: Tuple[str, ...]


class DualPathBlock(nn.Module):
    """Two 1x1 convolutions feeding a ViT and a CNN extractor, fused by a Local GAM"""

    def __init__(self, config, in_channels=1, local_gating=True):
        super().__init__()
        d = config.fusion_dim
        paths = config.paths
        self.conv_vit = nn.Conv3d(in_channels, paths.vit_channels, kernel_size=1)
        self.conv_cnn = nn.Conv3d(in_channels, paths.cnn_channels, kernel_size=1)
        self.vit = ViTExtractor(paths.vit_channels, config.input.depth, config.input.size, config.vit, d)
        self.cnn = CNNExtractor(
            paths.cnn_channels, config.cnn.channels, d, config.cnn.leaky_slope, config.cnn.kind
        )
        self.local_gating = local_gating
        self.skip_sigmoid = config.gating.skip_sigmoid
        if local_gating:
            self.gate_vit = GateParams(d)
            self.gate_cnn = GateParams(d)

    def extract(self, x):
        """Path features (z_vit, z_cnn) before fusion"""
        return self.vit(self.conv_vit(x)), self.cnn(self.conv_cnn(x))

    def forward(self, x):
        z_vit, z_cnn = self.extract(x)
        if not self.local_gating:
            return uniform_fuse([z_vit, z_cnn])
        return local_gam_fuse(z_vit, z_cnn, self.gate_vit, self.gate_cnn, skip_sigmoid=self.skip_sigmoid)


class ClinicalEncoder(nn.Module):
    """MLP 7 -> hidden -> d_f with ReLU after each hidden layer"""

    def __init__(self, in_features, hidden, fusion_dim):
        super().__init__()
        layers = []
        width = in_features
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, fusion_dim))
        self.net = nn.Sequential(*layers)
        self.in_features = in_features

    def forward(self, c):
        if c.shape[-1] != self.in_features:
            raise ContractViolation(f"clinical vector has {c.shape[-1]} entries, expected {self.in_features}")
        if bool(torch.isnan(c).any()):
            raise ContractViolation("clinical vector contains NaN")
        return self.net(c)


class ClassificationHead(nn.Module):
    """d_f -> 256 -> ReLU -> dropout -> 1; forward returns the logit"""

    def __init__(self, fusion_dim, hidden, dropout):
        super().__init__()
        layers = []
        width = fusion_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU(), nn.Dropout(dropout)]
            width = h
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, Y):
        return self.net(Y).squeeze(-1)


class HCNNViT(nn.Module):
    """Full model; the variant decides branch layout and which fusions are gated"""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.variant = variant = config.variant
        d = config.fusion_dim
        local = variant in LOCAL_GATED

        if variant == "single_branch":
            self.branch = nn.ModuleDict({"stack": DualPathBlock(config, len(SEQUENCES), local)})
            image_names = ("stack",)
        elif variant == "conditional_single_branch":
            self.branch = nn.ModuleDict({"shared": DualPathBlock(config, 1, local)})
            image_names = SEQUENCES
        else:
            self.branch = nn.ModuleDict({s: DualPathBlock(config, 1, local) for s in SEQUENCES})
            image_names = SEQUENCES

        self.use_clinical = variant != "mri_only"
        if self.use_clinical:
            self.clinical = ClinicalEncoder(config.clinical.in_features, config.clinical.hidden, d)
            self.branch_names = tuple(image_names) + ("clinical",)
        else:
            self.branch_names = tuple(image_names)

        if variant == "conditional_single_branch":
            # one type token per fused input: adc, t2, dwi, clinical
            self.condition_tokens = nn.Parameter(torch.randn(len(self.branch_names), d) * 0.02)

        if variant in GLOBAL_GATED:
            self.global_gam = GlobalGAM(len(self.branch_names), d, config.gating.skip_sigmoid)
        self.head = ClassificationHead(d, config.head.hidden, config.head.dropout)

    @property
    def n_branches(self):
        return len(self.branch_names)

    def _volume(self, batch, sequence):
        if sequence not in batch or batch[sequence] is None:
            pid = batch.get("patient_id", "<unknown>")
            raise ContractViolation(f"patient {pid}: missing sequence {sequence!r}")
        return batch[sequence]

    def branch_outputs(self, batch):
        """
        Run every branch

        Args:
            batch: Mapping with "adc", "t2", "dwi" ([B, 1, D, H, W]) and "clinical" ([B, 7])

        Returns:
            outputs: List of [B, d_f] tensors in `branch_names` order
            alphas: Mapping branch name -> Local GAM weights [B, 2]
        """
        outputs, alphas = [], {}
        if self.variant == "single_branch":
            x = torch.cat([self._volume(batch, s) for s in SEQUENCES], dim=1)
            y, a = self.branch["stack"](x)
            outputs.append(y)
            alphas["stack"] = a
        elif self.variant == "conditional_single_branch":
            shared = self.branch["shared"]
            for i, s in enumerate(SEQUENCES):
                y, a = shared(self._volume(batch, s))
                outputs.append(y + self.condition_tokens[i])
                alphas[s] = a
        else:
            for s in SEQUENCES:
                y, a = self.branch[s](self._volume(batch, s))
                outputs.append(y)
                alphas[s] = a

        if self.use_clinical:
            if batch.get("clinical") is None:
                pid = batch.get("patient_id", "<unknown>")
                raise ContractViolation(f"patient {pid}: missing clinical vector")
            c = self.clinical(batch["clinical"])
            if self.variant == "conditional_single_branch":
                c = c + self.condition_tokens[len(SEQUENCES)]
            outputs.append(c)
        return outputs, alphas

    def fuse(self, outputs):
        if hasattr(self, "global_gam"):
            return self.global_gam(outputs)
        return uniform_fuse(outputs)

    def forward(self, batch):
        outputs, alphas = self.branch_outputs(batch)
        Y, betas = self.fuse(outputs)
        logit = self.head(Y)
        return Prediction(
            probability=to_probability(logit),
            logit=logit,
            branch_betas=betas,
            per_branch_alphas=alphas,
            branch_names=self.branch_names,
        )


def build_variant(config):
    """
    Build the model for `config.variant`

    Raises:
        ConfigError: unknown variant or impossible shapes
    """
    model = HCNNViT(config)
    logger.debug("Built %s with %d parameters", config.variant, count_parameters(model))
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _batched(x, dims):
    if x.dim() == dims - 1:
        return x.unsqueeze(0), True
    return x, False


def cnn_extract(x, extractor):
    """CNN path on [C, D, H, W] or [B, C, D, H, W]"""
    x, single = _batched(x, 5)
    z = extractor(x)
    return z[0] if single else z


def vit_extract(x, extractor):
    """ViT path on [C, D, H, W] or [B, C, D, H, W]"""
    x, single = _batched(x, 5)
    z = extractor(x)
    return z[0] if single else z


def dpa_forward(volume, block):
    """
    One dual-path branch

    Args:
        volume: Preprocessed grid [C, D, H, W] or batch [B, C, D, H, W]
        block: DualPathBlock

    Returns:
        y: Branch output (d_f or [B, d_f])
        alphas: Local weights [vit, cnn]
    """
    x, single = _batched(volume, 5)
    y, alphas = block(x)
    return (y[0], alphas[0]) if single else (y, alphas)


def clinical_encode(c, encoder):
    return encoder(c)


def to_probability(logit):
    """Sigmoid kept strictly inside (0, 1) at the float resolution of `logit`"""
    eps = torch.finfo(logit.dtype).eps
    return torch.sigmoid(logit).clamp(eps, 1.0 - eps)


def classify(Y, head):
    """Probability in (0, 1) from the fused representation"""
    return to_probability(head(Y))


def model_forward(sample, model):
    """Forward pass for the full and MRI-only models"""
    if model.variant not in ("full", "mri_only"):
        raise ConfigError(f"model_forward handles full / mri_only; use variant_forward for {model.variant!r}")
    return model(sample)


def variant_forward(sample, model):
    return model(sample)
