"""
Interpretability Maps

Gradient-weighted class activation maps at the third CNN stage and attention
saliency from the ViT path, both for one slice of one sequence branch.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from src.utils.config import SEQUENCES
from src.utils.exceptions import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

CNN_SOURCE = "cnn_layer3"
VIT_SOURCE = "vit_block2"
VIT_BLOCK = 1


@dataclass
class Heatmap:
    values: np.ndarray
    source: str
    method: str
    patient_id: str
    sequence: str
    slice_index: int

    def metadata(self):
        return {
            "source": self.source,
            "method": self.method,
            "patient_id": self.patient_id,
            "sequence": self.sequence,
            "slice_index": self.slice_index,
        }


def as_batch(sample):
    """Batch of one from a RecurrenceDataset item"""
    batch = {}
    for key, value in sample.items():
        if torch.is_tensor(value):
            batch[key] = value.unsqueeze(0)
        else:
            batch[key] = [value]
    return batch


def normalize_map(values):
    """Min-max to [0, 1]; a constant map becomes all zeros"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if not hi - lo > 1e-12:
        logger.warning("Heatmap is constant; normalised to zeros")
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def branch_for(model, sequence):
    """
    DualPathBlock that processes `sequence`, and which of its calls does

    Returns:
        block: DualPathBlock
        call: Index of the forward call belonging to the sequence
    """
    if sequence not in SEQUENCES:
        raise ContractViolation(f"unknown sequence {sequence!r}; expected one of {SEQUENCES}")
    if model.variant == "single_branch":
        return model.branch["stack"], 0
    if model.variant == "conditional_single_branch":
        return model.branch["shared"], SEQUENCES.index(sequence)
    return model.branch[sequence], 0


def _check_slice(model, slice_index):
    depth = model.config.input.depth
    if not 0 <= slice_index < depth:
        raise ContractViolation(f"slice index {slice_index} outside 0..{depth - 1}")


def _upsample(grid, size):
    t = torch.as_tensor(grid, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def _patient_id(batch):
    pid = batch.get("patient_id", [""])
    return pid[0] if isinstance(pid, (list, tuple)) else str(pid)


def cnn_cam(model, batch, sequence, slice_index):
    """
    Gradient-weighted activation map at the third CNN stage

    Args:
        model: HCNNViT
        batch: Batch of one patient
        sequence: Branch to explain
        slice_index: Slice of the preprocessed volume

    Returns:
        heatmap: Heatmap of input-slice size in [0, 1]
    """
    _check_slice(model, slice_index)
    block, call = branch_for(model, sequence)
    activations = []

    def keep(module, inputs, output):
        output.retain_grad()
        activations.append(output)

    was_training = model.training
    model.eval()
    handle = block.cnn.cam_layer.register_forward_hook(keep)
    try:
        with torch.enable_grad():
            model.zero_grad(set_to_none=True)
            pred = model(batch)
            pred.logit.sum().backward()
        A = activations[call]
        weights = A.grad.mean(dim=(2, 3, 4), keepdim=True)
        cam = F.relu((weights * A).sum(dim=1))[0, slice_index].detach()
    finally:
        handle.remove()
        model.zero_grad(set_to_none=True)
        model.train(was_training)

    values = normalize_map(_upsample(cam, model.config.input.size))
    return Heatmap(values, CNN_SOURCE, "grad_weighted_cam", _patient_id(batch), sequence, slice_index)


@torch.no_grad()
def attention_weights(model, batch, sequence):
    """
    Head-averaged attention of every ViT block for one sequence

    Returns:
        weights: List of [L, L] tensors, one per block
    """
    block, call = branch_for(model, sequence)
    vit = block.vit
    captured = [[] for _ in vit.blocks]
    handles = []
    for i, b in enumerate(vit.blocks):
        b.record_attention = True
        handles.append(b.register_forward_hook(lambda m, inp, out, i=i: captured[i].append(m.attention)))
    was_training = model.training
    model.eval()
    try:
        model(batch)
    finally:
        for b, h in zip(vit.blocks, handles):
            b.record_attention = False
            b.attention = None
            h.remove()
        model.train(was_training)
    return [c[call][0].double() for c in captured]


def token_saliency(model, batch, sequence, block_index=VIT_BLOCK, rollout=False):
    """
    Per-token saliency over the full token set

    Single-block mode averages the block's attention rows over queries, so the
    saliency sums to 1. Rollout multiplies residual-augmented attention of
    blocks 0..block_index.
    """
    block, _ = branch_for(model, sequence)
    if len(block.vit.blocks) <= block_index:
        raise ConfigError(
            f"attention map needs ViT depth >= {block_index + 1}, model has {len(block.vit.blocks)}"
        )
    weights = attention_weights(model, batch, sequence)
    if not rollout:
        return weights[block_index].mean(dim=0)
    eye = torch.eye(weights[0].shape[0], dtype=torch.float64)
    joint = eye
    for w in weights[: block_index + 1]:
        a = 0.5 * w + 0.5 * eye
        a = a / a.sum(dim=-1, keepdim=True)
        joint = a @ joint
    return joint.mean(dim=0)


def vit_attention_map(model, batch, sequence, slice_index, block_index=VIT_BLOCK, rollout=False):
    """
    Attention saliency of one slice, upsampled to the input resolution

    Args:
        model: HCNNViT with ViT depth >= 2
        batch: Batch of one patient
        sequence: Branch to explain
        slice_index: Slice of the preprocessed volume
        block_index: Transformer block whose attention is read (0-based)
        rollout: Use attention rollout instead of a single block

    Returns:
        heatmap: Heatmap of input-slice size in [0, 1]
    """
    _check_slice(model, slice_index)
    saliency = token_saliency(model, batch, sequence, block_index, rollout)
    vit = branch_for(model, sequence)[0].vit
    start, end = vit.tokens_of_slice(slice_index)
    grid = saliency[start:end].reshape(vit.grid[1], vit.grid[2])
    values = normalize_map(_upsample(grid, model.config.input.size))
    method = "attention_rollout" if rollout else "attention"
    return Heatmap(values, VIT_SOURCE, method, _patient_id(batch), sequence, slice_index)


def peak_in_box(heatmap, bounds):
    """Whether the map's maximum lies inside inclusive (y0, y1, x0, x1) bounds"""
    y, x = np.unravel_index(int(np.argmax(heatmap.values)), heatmap.values.shape)
    y0, y1, x0, x1 = bounds
    return bool(y0 <= y <= y1 and x0 <= x <= x1)
