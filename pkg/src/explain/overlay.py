"""
Heatmap Overlays

Composites a heatmap over its grayscale slice and writes an 8-bit PNG with
a JSON sidecar describing where the map came from.
"""

import logging
from pathlib import Path

import matplotlib
import matplotlib.pyplot as plt
import numpy as np

from src.utils.data_loader import dump_json
from src.utils.exceptions import ContractViolation

logger = logging.getLogger(__name__)

COLORMAP = "viridis"
OPACITY = 0.45


def grayscale(slice_2d):
    """Min-max scaled slice as RGB floats in [0, 1]"""
    s = np.asarray(slice_2d, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    s = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    return np.repeat(s[..., None], 3, axis=-1)


def to_uint8(rgb):
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def composite(slice_2d, heatmap, opacity=OPACITY):
    """
    Blend the colormapped heatmap over the slice

    The blend weight of each pixel is opacity * heatmap, so a zero heatmap
    leaves the grayscale render untouched.

    Returns:
        rgb: uint8 [H, W, 3]
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    if heat.shape != np.shape(slice_2d):
        raise ContractViolation(f"heatmap {heat.shape} does not match slice {np.shape(slice_2d)}")
    if heat.size and (heat.min() < 0.0 or heat.max() > 1.0):
        raise ContractViolation("heatmap values must lie in [0, 1]")
    colors = matplotlib.colormaps[COLORMAP](heat)[..., :3]
    alpha = (opacity * heat)[..., None]
    return to_uint8((1.0 - alpha) * grayscale(slice_2d) + alpha * colors)


def overlay(slice_2d, heatmap, out_path):
    """
    Write the composite as a PNG, one pixel per voxel

    Returns:
        out_path: Path of the written image
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(out_path, composite(slice_2d, heatmap), format="png")
    logger.info("Wrote overlay %s", out_path)
    return out_path


def write_sidecar(out_path, heatmap, checkpoint_hash):
    """`<image>.json` next to the PNG"""
    meta = dict(heatmap.metadata(), checkpoint_hash=checkpoint_hash)
    sidecar = Path(out_path).with_suffix(".json")
    dump_json(meta, sidecar)
    return sidecar
