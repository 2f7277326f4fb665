"""
Volume and Clinical Preprocessing

SIZ depth uniformisation, slice resizing, intensity scaling, rotation and
mixup augmentation, and clinical feature normalisation.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from src.utils.exceptions import ContractViolation
from src.utils.records import SEXES

logger = logging.getLogger(__name__)

# Layout of the normalised clinical vector
CLINICAL_FEATURES = (
    "age",
    "sex",
    "hospitalizations",
    "tumor_size",
    "multiple_lesions",
    "t_stage",
    "grade",
)
CONTINUOUS_FEATURES = ("age", "hospitalizations", "tumor_size")


def siz_resample(volume, target_depth=13, order=3):
    """
    Spline Interpolated Zoom along the depth axis

    Args:
        volume: Volume of any depth >= 1
        target_depth: Number of slices to produce
        order: Spline order

    Returns:
        volume: Volume with exactly target_depth slices
    """
    if target_depth < 1:
        raise ContractViolation(f"target_depth must be >= 1, got {target_depth}")
    depth = volume.voxels.shape[0]
    if depth < 1:
        raise ContractViolation("cannot resample an empty volume")
    if depth == target_depth:
        return volume.with_voxels(volume.voxels.copy())

    factor = target_depth / depth
    zoomed = ndimage.zoom(volume.voxels.astype(np.float64), (factor, 1.0, 1.0), order=order, mode="nearest")
    if zoomed.shape[0] != target_depth:
        raise ContractViolation(
            f"SIZ produced {zoomed.shape[0]} slices from {depth}, expected {target_depth}"
        )
    return volume.with_voxels(zoomed.astype(np.float32))


def resize_slices(volume, size=256):
    """
    Bilinear per-slice resize to size x size

    Args:
        volume: Volume with height, width >= 16
        size: Output height and width
    """
    d, h, w = volume.voxels.shape
    if h < 16 or w < 16:
        raise ContractViolation(f"slices of {h}x{w} are below the 16x16 minimum")
    if (h, w) == (size, size):
        return volume.with_voxels(volume.voxels.copy())
    slices = torch.from_numpy(volume.voxels.astype(np.float64)).unsqueeze(1)
    resized = F.interpolate(slices, size=(size, size), mode="bilinear", align_corners=False)
    return volume.with_voxels(resized.squeeze(1).numpy().astype(np.float32))


def minmax_normalize(volume):
    """Per-volume min-max scaling to [0, 1]; constant volumes map to zeros"""
    v = volume.voxels.astype(np.float32)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return volume.with_voxels(np.zeros_like(v))
    return volume.with_voxels(((v - lo) / (hi - lo)).astype(np.float32))


def prepare_volume(volume, depth=13, size=256, spline_order=3):
    """Deterministic evaluation pipeline: SIZ -> resize -> min-max"""
    volume = siz_resample(volume, depth, order=spline_order)
    volume = resize_slices(volume, size)
    return minmax_normalize(volume)


def sample_rotation_angle(rng, max_degrees=30.0):
    return float(rng.uniform(-max_degrees, max_degrees))


def random_rotate(volume, rng=None, max_degrees=30.0, angle=None):
    """
    Rotate every slice by one shared angle, zero fill outside the field of view

    Args:
        volume: Volume to rotate
        rng: numpy Generator; used when `angle` is None
        max_degrees: Half-width of the uniform angle range
        angle: Fixed angle in degrees

    Returns:
        volume: Rotated Volume
    """
    if angle is None:
        angle = sample_rotation_angle(rng, max_degrees)
    if angle == 0:
        return volume.with_voxels(volume.voxels.copy())
    rotated = ndimage.rotate(
        volume.voxels, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0
    )
    return volume.with_voxels(rotated.astype(np.float32))


def mixup(batch_a, batch_b, alpha=0.2, rng=None, lam=None):
    """
    Convex combination of two batches and their labels

    Args:
        batch_a: Mapping of tensors ("adc", "t2", "dwi", "clinical", "label", ...)
        batch_b: Mapping with the same keys and shapes
        alpha: Beta(alpha, alpha) concentration; <= 0 disables mixing
        rng: numpy Generator
        lam: Fixed mixing coefficient

    Returns:
        mixed: Mapping with every tensor mixed by the same lambda
        lam: The coefficient used
    """
    if set(batch_a) != set(batch_b):
        raise ContractViolation(f"batches have different keys: {sorted(batch_a)} vs {sorted(batch_b)}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0

    mixed = {}
    for key, a in batch_a.items():
        b = batch_b[key]
        if torch.is_tensor(a):
            if a.shape != b.shape:
                raise ContractViolation(
                    f"{key}: shape {tuple(a.shape)} does not match {tuple(b.shape)}"
                )
            if a.is_floating_point():
                mixed[key] = lam * a + (1.0 - lam) * b
            else:
                mixed[key] = lam * a.double() + (1.0 - lam) * b.double()
        else:
            mixed[key] = a
    return mixed, lam


def mixup_batch(batch, alpha, rng):
    """Mix a batch with a shuffled copy of itself"""
    n = len(batch["label"])
    order = torch.from_numpy(rng.permutation(n))
    partner = {k: v[order] if torch.is_tensor(v) else v for k, v in batch.items()}
    return mixup(batch, partner, alpha=alpha, rng=rng)


@dataclass
class NormStats:
    mean: List[float]
    std: List[float]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(mean=[float(x) for x in data["mean"]], std=[float(x) for x in data["std"]])


def compute_norm_stats(records):
    """
    Mean / std of the continuous clinical features

    Args:
        records: Training-split ClinicalRecords only

    Returns:
        stats: NormStats ordered as CONTINUOUS_FEATURES
    """
    if not records:
        raise ContractViolation("cannot compute normalisation statistics on an empty split")
    table = np.array(
        [[float(getattr(r, name)) for name in CONTINUOUS_FEATURES] for r in records], dtype=np.float64
    )
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    for i, name in enumerate(CONTINUOUS_FEATURES):
        if not std[i] > 0:
            logger.warning("Feature %s has zero variance on the training split; using std 1", name)
            std[i] = 1.0
    return NormStats(mean=mean.tolist(), std=std.tolist())


def normalize_clinical(record, stats):
    """
    Map a record to the fixed 7-slot model input

    Slots: age (z), sex (male=1), hospitalizations (z), tumor_size (z),
    multiple_lesions, t_stage / 5, grade.
    """
    if record.sex not in SEXES:
        raise ContractViolation(f"patient {record.patient_id}: unseen sex value {record.sex!r}")
    for name in ("multiple_lesions", "grade"):
        if getattr(record, name) not in (0, 1):
            raise ContractViolation(f"patient {record.patient_id}: unseen {name} value {getattr(record, name)!r}")
    if record.t_stage not in range(6):
        raise ContractViolation(f"patient {record.patient_id}: unseen t_stage value {record.t_stage!r}")

    z = {
        name: (float(getattr(record, name)) - stats.mean[i]) / stats.std[i]
        for i, name in enumerate(CONTINUOUS_FEATURES)
    }
    vector = [
        z["age"],
        1.0 if record.sex == "male" else 0.0,
        z["hospitalizations"],
        z["tumor_size"],
        float(record.multiple_lesions),
        record.t_stage / 5.0,
        float(record.grade),
    ]
    return np.asarray(vector, dtype=np.float32)
