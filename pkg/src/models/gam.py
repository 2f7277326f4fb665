"""
Gated Attention Modules

Gating function g(z) = W.z + b, squashed by a sigmoid and normalised across
the competing inputs with a softmax. The Local GAM fuses the ViT and CNN
features of one branch; the Global GAM fuses the N branch outputs.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.utils.exceptions import ContractViolation


class GateParams(nn.Module):
    """Weight vector + bias of one linear gating function"""

    def __init__(self, dim):
        """
        Args:
            dim: Fusion dimension d_f of the vectors this gate scores
        """
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dim))
        self.bias = nn.Parameter(torch.zeros(()))
        self.reset_parameters()

    def reset_parameters(self):
        # raw scores start near 0.5, so early training is close to mean fusion
        bound = 1.0 / math.sqrt(self.weight.numel())
        with torch.no_grad():
            self.weight.uniform_(-bound, bound)
            self.bias.zero_()

    @property
    def dim(self):
        return self.weight.numel()

    def forward(self, z, skip_sigmoid=False):
        return gate_score(z, self, skip_sigmoid=skip_sigmoid)


def gate_score(z, params, skip_sigmoid=False):
    """
    Score a feature vector with one gate

    Args:
        z: Tensor (..., d_f)
        params: GateParams with weight of length d_f
        skip_sigmoid: Return the raw linear score instead of sigmoid(score)

    Returns:
        score: Tensor (...) in (0, 1) unless skip_sigmoid
    """
    if z.shape[-1] != params.weight.shape[0]:
        raise ContractViolation(
            f"feature length {z.shape[-1]} does not match gate weight length {params.weight.shape[0]}"
        )
    raw = torch.matmul(z, params.weight) + params.bias
    if skip_sigmoid:
        return raw
    return torch.sigmoid(raw)


def normalize_scores(raw, check_range=True):
    """
    Softmax-normalise competing gate scores

    Args:
        raw: Sequence of score tensors (each (...)) or one tensor (..., N)
        check_range: Require every score in [0, 1]

    Returns:
        weights: Tensor (..., N) summing to 1 along the last axis
    """
    if isinstance(raw, (list, tuple)):
        if len(raw) == 0:
            raise ContractViolation("cannot normalise an empty list of scores")
        raw = torch.stack([torch.as_tensor(r) for r in raw], dim=-1)
    else:
        raw = torch.as_tensor(raw)
        if raw.dim() == 0 or raw.shape[-1] == 0:
            raise ContractViolation("cannot normalise an empty list of scores")
    if check_range and bool(((raw < 0) | (raw > 1)).any()):
        raise ContractViolation("gate scores must lie in [0, 1] before normalisation")
    return F.softmax(raw, dim=-1)


def convex_combine(vectors, weights):
    """Sum_i weights[..., i] * vectors[i]"""
    stacked = torch.stack(vectors, dim=-2)
    return (weights.unsqueeze(-1) * stacked).sum(dim=-2)


def uniform_fuse(vectors):
    """
    Unweighted mean of the inputs, used by the ablations without gating

    Returns:
        fused: Mean vector
        weights: Uniform weights (..., N)
    """
    stacked = torch.stack(vectors, dim=-2)
    fused = stacked.mean(dim=-2)
    n = len(vectors)
    weights = torch.full(stacked.shape[:-1], 1.0 / n, dtype=stacked.dtype, device=stacked.device)
    return fused, weights


def local_gam_fuse(z_vit, z_cnn, p_vit, p_cnn, skip_sigmoid=False):
    """
    Fuse the two extractor outputs of one branch

    Args:
        z_vit: ViT feature (..., d_f)
        z_cnn: CNN feature (..., d_f)
        p_vit: Gate for the ViT path
        p_cnn: Gate for the CNN path
        skip_sigmoid: Softmax the raw linear scores directly

    Returns:
        y: Fused feature (..., d_f)
        alphas: Weights (..., 2) ordered [vit, cnn]
    """
    if z_vit.shape != z_cnn.shape:
        raise ContractViolation(
            f"ViT feature shape {tuple(z_vit.shape)} != CNN feature shape {tuple(z_cnn.shape)}"
        )
    scores = [gate_score(z_vit, p_vit, skip_sigmoid), gate_score(z_cnn, p_cnn, skip_sigmoid)]
    alphas = normalize_scores(scores, check_range=not skip_sigmoid)
    y = convex_combine([z_vit, z_cnn], alphas)
    return y, alphas


def global_gam_fuse(branch_outputs, params, skip_sigmoid=False):
    """
    Fuse N >= 2 branch outputs into one representation

    Args:
        branch_outputs: List of N tensors (..., d_f)
        params: List of N GateParams
        skip_sigmoid: Softmax the raw linear scores directly

    Returns:
        Y: Fused representation (..., d_f)
        betas: Branch weights (..., N)
    """
    n = len(branch_outputs)
    if n < 2:
        raise ContractViolation(f"global fusion needs at least 2 branches, got {n}")
    if len(params) != n:
        raise ContractViolation(f"{n} branch outputs but {len(params)} gates")
    shape = branch_outputs[0].shape
    for i, y in enumerate(branch_outputs[1:], start=1):
        if y.shape != shape:
            raise ContractViolation(
                f"branch {i} has shape {tuple(y.shape)}, expected {tuple(shape)}"
            )
    scores = [gate_score(y, p, skip_sigmoid) for y, p in zip(branch_outputs, params)]
    betas = normalize_scores(scores, check_range=not skip_sigmoid)
    return convex_combine(branch_outputs, betas), betas


class GlobalGAM(nn.Module):
    """One gate per branch; parameters live under `gate.{i}`"""

    def __init__(self, n_branches, dim, skip_sigmoid=False):
        super().__init__()
        self.gate = nn.ModuleList([GateParams(dim) for _ in range(n_branches)])
        self.skip_sigmoid = skip_sigmoid

    def forward(self, branch_outputs):
        return global_gam_fuse(branch_outputs, list(self.gate), skip_sigmoid=self.skip_sigmoid)


def simplex_bounds(n):
    """Attainable range of each softmax weight when the N inputs lie in (0, 1)"""
    e = math.e
    return 1.0 / (1.0 + (n - 1) * e), e / (e + (n - 1))


# Scalar references in plain floats, used as oracles by the tests.

def reference_gate_score(z, weight, bias):
    return 1.0 / (1.0 + math.exp(-(sum(w * x for w, x in zip(weight, z)) + bias)))


def reference_softmax(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = sum(exps)
    return [x / total for x in exps]


def reference_fuse(vectors, scores):
    """Softmax the scores, then take the weighted sum of the vectors"""
    weights = reference_softmax(scores)
    dim = len(vectors[0])
    fused = [sum(w * v[k] for w, v in zip(weights, vectors)) for k in range(dim)]
    return fused, weights
