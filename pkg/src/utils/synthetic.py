"""
Synthetic Recurrence Dataset Generator

Bladder-like phantoms with three unregistered sequences of independent slice
counts, correlated clinical attributes, and a planted lesion in positives.
"""

import json
import logging
import math
import shutil
from pathlib import Path

import numpy as np
from scipy import ndimage

from src.utils.config import SEQUENCES
from src.utils.data_loader import DatasetManifest, dump_json, write_clinical, write_manifest, write_volume
from src.utils.exceptions import ContractViolation, OutputExistsError
from src.utils.records import ClinicalRecord, Volume

logger = logging.getLogger(__name__)

FULL_PROFILE = {"size": 280, "depth_range": (13, 60)}
TINY_PROFILE = {"size": 64, "depth_range": (8, 24)}

# (background tissue, bladder lumen) intensities per sequence
TISSUE = {"adc": (0.40, 0.70), "t2": (0.35, 0.80), "dwi": (0.30, 0.20)}
# lesion contrast: diffusion restriction is bright on DWI, dark on ADC, faint on T2
LESION_CONTRAST = {"adc": -0.45, "t2": 0.12, "dwi": 0.60}

T_STAGE_PROBS = {
    0: [0.25, 0.30, 0.20, 0.15, 0.07, 0.03],
    1: [0.10, 0.20, 0.25, 0.25, 0.12, 0.08],
}


def count_positives(n_patients, prevalence):
    """round(n * prevalence), halves rounded up"""
    return int(math.floor(n_patients * prevalence + 0.5))


def sample_clinical(rng, patient_id, label):
    """Draw one ClinicalRecord with label-dependent shifts"""
    positive = label == 1
    tumor_size = float(np.exp(rng.normal(math.log(2.4 if positive else 1.8), 0.5)))
    tumor_size = round(min(max(tumor_size, 0.3), 8.3), 1)
    t_stage = int(rng.choice(6, p=T_STAGE_PROBS[label]))
    if tumor_size > 3.0:
        t_stage = min(t_stage + 1, 5)
    return ClinicalRecord(
        patient_id=patient_id,
        age=int(np.clip(round(rng.normal(66.0, 9.0)), 38, 83)),
        sex="male" if rng.random() < 0.8 else "female",
        hospitalizations=int(np.clip(1 + rng.poisson(4.5 if positive else 3.0), 1, 42)),
        tumor_size=tumor_size,
        multiple_lesions=int(rng.random() < (0.5 if positive else 0.3)),
        t_stage=t_stage,
        grade=int(rng.random() < (0.6 if positive else 0.35)),
        label=label,
    )


def _ellipse_field(shape, center, radii):
    """Normalised squared distance ((z-cz)/rz)^2 + ... on a grid"""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))


def render_sequence(rng, sequence, depth, size, anatomy, lesion=None):
    """
    Render one sequence of one patient

    Args:
        rng: numpy Generator for this sequence
        sequence: "adc", "t2" or "dwi"
        depth: Slice count of this sequence
        size: In-plane size
        anatomy: Shared bladder geometry (centre, radii, lesion angle) in [0, 1] units
        lesion: Lesion geometry or None for negatives

    Returns:
        voxels: float32 [depth, size, size] in [0, 1]
        box: Lesion record for the ledger, or None
    """
    background, lumen = TISSUE[sequence]
    # each sequence sees the anatomy with its own in-plane shift and depth extent (unregistered)
    shift = rng.uniform(-0.05, 0.05, size=2) * size
    cy, cx = anatomy["center"] * size + shift
    ry, rx = anatomy["radii"] * size
    bladder_z = depth * rng.uniform(0.4, 0.6)
    bladder_rz = depth * rng.uniform(0.45, 0.6)

    field = _ellipse_field((depth, size, size), (bladder_z, cy, cx), (bladder_rz, ry, rx))
    voxels = np.full((depth, size, size), background, dtype=np.float64)
    voxels += (lumen - background) * ndimage.gaussian_filter((field <= 1.0).astype(np.float64), sigma=(0, 1.5, 1.5))
    texture = ndimage.gaussian_filter(rng.normal(size=voxels.shape), sigma=(0, 2.0, 2.0))
    voxels += 0.05 * texture / (texture.std() + 1e-12)
    voxels += 0.02 * rng.normal(size=voxels.shape)

    box = None
    if lesion is not None:
        theta = anatomy["lesion_angle"]
        ly = cy + 0.85 * ry * math.sin(theta)
        lx = cx + 0.85 * rx * math.cos(theta)
        lr = lesion["radius"] * size
        lz = float(rng.uniform(0.25, 0.75) * (depth - 1))
        lrz = max(1.0, 0.08 * depth)
        dist = _ellipse_field((depth, size, size), (lz, ly, lx), (lrz, lr, lr))
        voxels += LESION_CONTRAST[sequence] * np.clip(1.0 - dist, 0.0, 1.0)
        box = {
            "slice_index": int(round(lz)),
            "center": [float(ly), float(lx)],
            "radii": [float(lrz), float(lr), float(lr)],
            "bbox": [
                int(max(0, math.floor(lz - lrz))),
                int(min(depth - 1, math.ceil(lz + lrz))),
                int(max(0, math.floor(ly - lr))),
                int(min(size - 1, math.ceil(ly + lr))),
                int(max(0, math.floor(lx - lr))),
                int(min(size - 1, math.ceil(lx + lr))),
            ],
        }
    return np.clip(voxels, 0.0, 1.0).astype(np.float32), box


def _prepare_out_dir(out_dir, force):
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError(f"{out} exists and is not empty; pass --force to overwrite")
        logger.warning("Removing existing contents of %s", out)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def generate_synthetic(n_patients, out_dir, prevalence=0.62, seed=0, tiny=False, force=False):
    """
    Generate a dataset directory

    Args:
        n_patients: Number of patients (>= 10)
        out_dir: Output root
        prevalence: Fraction of positive labels; exactly round(n * prevalence) positives
        seed: Master seed; the tree is byte-identical for a fixed seed
        tiny: 64x64 slices with 8..24 slices instead of 280x280 with 13..60
        force: Overwrite a non-empty out_dir

    Returns:
        manifest: DatasetManifest of the written data
    """
    if n_patients < 10:
        raise ContractViolation(f"n_patients must be >= 10, got {n_patients}")
    if not 0.0 <= prevalence <= 1.0:
        raise ContractViolation(f"prevalence must lie in [0, 1], got {prevalence}")
    profile = TINY_PROFILE if tiny else FULL_PROFILE
    size = profile["size"]
    lo, hi = profile["depth_range"]
    out = _prepare_out_dir(out_dir, force)

    master = np.random.default_rng(seed)
    n_pos = count_positives(n_patients, prevalence)
    labels = master.permutation(np.array([1] * n_pos + [0] * (n_patients - n_pos)))

    records, shapes = [], {}
    for i in range(n_patients):
        pid = f"P{i:04d}"
        label = int(labels[i])
        rng = np.random.default_rng([seed, i])
        anatomy = {
            "center": rng.uniform(0.42, 0.58, size=2),
            "radii": rng.uniform(0.22, 0.32, size=2),
            "lesion_angle": float(rng.uniform(0.0, 2.0 * math.pi)),
        }
        lesion = {"radius": float(rng.uniform(0.06, 0.09))} if label == 1 else None
        patient_dir = out / pid
        shapes[pid] = {}
        ledger = {}
        for j, seq in enumerate(SEQUENCES):
            seq_rng = np.random.default_rng([seed, i, j + 1])
            depth = int(seq_rng.integers(lo, hi + 1))
            voxels, box = render_sequence(seq_rng, seq, depth, size, anatomy, lesion)
            write_volume(Volume(voxels=voxels, sequence=seq, patient_id=pid), patient_dir)
            shapes[pid][seq] = [depth, size, size]
            if box is not None:
                ledger[seq] = box
        if ledger:
            dump_json(ledger, patient_dir / "lesion.json")
        records.append(sample_clinical(rng, pid, label))

    write_clinical(records, out / "clinical.csv")
    patient_ids = [r.patient_id for r in records]
    manifest = DatasetManifest(
        root=str(out),
        patient_ids=patient_ids,
        shapes=shapes,
        labels={r.patient_id: r.label for r in records},
        class_counts={"0": n_patients - n_pos, "1": n_pos},
        native_size=size,
        depth_range=[lo, hi],
        seed=seed,
    )
    # manifest last: its presence marks a complete dataset
    write_manifest(manifest, out)
    logger.info("Wrote %d patients (%d positive) to %s", n_patients, n_pos, out)
    return manifest


def load_lesion_ledger(root, patient_id):
    """Lesion boxes of one synthetic patient, {} for negatives"""
    path = Path(root) / patient_id / "lesion.json"
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def box_in_model_space(box, native_shape, depth, size):
    """
    Map a ledger box through SIZ and the in-plane resize

    Args:
        box: One sequence entry of lesion.json
        native_shape: (D, H, W) of the generated volume
        depth: Model input depth
        size: Model input height and width

    Returns:
        slice_index: Model slice nearest the lesion centre
        bounds: (y0, y1, x0, x1) inclusive, in model pixels
    """
    d, h, w = native_shape
    # spline zoom maps end slices onto end slices
    slice_index = int(round(box["slice_index"] * (depth - 1) / (d - 1))) if d > 1 and depth > 1 else 0
    _, _, y0, y1, x0, x1 = box["bbox"]

    def scale(v, n):
        # bilinear resize with align_corners=False
        return (v + 0.5) * size / n - 0.5

    bounds = (
        max(0, int(math.floor(scale(y0, h)))),
        min(size - 1, int(math.ceil(scale(y1, h)))),
        max(0, int(math.floor(scale(x0, w)))),
        min(size - 1, int(math.ceil(scale(x1, w)))),
    )
    return min(slice_index, depth - 1), bounds
