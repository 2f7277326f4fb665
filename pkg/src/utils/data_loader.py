"""
Dataset Loading Utilities

MVOL1 volume files, the clinical CSV, the dataset manifest, stratified fold
plans and the torch Dataset that feeds training and evaluation.
"""

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
import torch
from sklearn.model_selection import StratifiedKFold, train_test_split
from torch.utils.data import Dataset

from src.utils.config import SEQUENCES
from src.utils.exceptions import ContractViolation, DataFormatError, RecordValidationError
from src.utils.preprocess import normalize_clinical, prepare_volume, random_rotate
from src.utils.records import ClinicalRecord, Volume

logger = logging.getLogger(__name__)

MVOL_FORMAT = "MVOL1"
MANIFEST_VERSION = "hcvt-dataset-1"
CLINICAL_HEADER = [
    "patient_id",
    "age",
    "sex",
    "hospitalizations",
    "tumor_size_cm",
    "multiple_lesions",
    "t_stage",
    "grade",
    "label",
]


def dump_json(data, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(data, sort_keys=True, indent=2) + "\n")


def write_volume(volume, directory):
    """
    Write a volume as `<seq>.json` sidecar + `<seq>.raw` little-endian float32

    Args:
        volume: Volume with finite voxels
        directory: Patient directory

    Returns:
        sidecar_path: Path of the written sidecar
    """
    voxels = np.asarray(volume.voxels)
    if voxels.ndim != 3:
        raise ContractViolation(f"volume must be [depth, height, width], got shape {voxels.shape}")
    if not np.all(np.isfinite(voxels)):
        raise ContractViolation(f"{volume.patient_id}/{volume.sequence}: voxels must be finite")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d, h, w = voxels.shape
    sidecar = {
        "format": MVOL_FORMAT,
        "sequence": volume.sequence,
        "depth": int(d),
        "height": int(h),
        "width": int(w),
        "dtype": "float32",
        "byte_order": "little",
    }
    sidecar_path = directory / f"{volume.sequence}.json"
    dump_json(sidecar, sidecar_path)
    with open(directory / f"{volume.sequence}.raw", "wb") as f:
        f.write(np.ascontiguousarray(voxels, dtype="<f4").tobytes(order="C"))
    return sidecar_path


def read_volume(path, patient_id=""):
    """
    Read an MVOL1 volume

    Args:
        path: Sidecar `.json`, raw `.raw`, or the extension-less stem
        patient_id: Stored on the returned Volume

    Returns:
        volume: Volume with float32 voxels
    """
    stem = Path(path)
    if stem.suffix in (".json", ".raw"):
        stem = stem.with_suffix("")
    sidecar_path = stem.with_suffix(".json")
    raw_path = stem.with_suffix(".raw")
    if not sidecar_path.exists():
        raise DataFormatError(f"missing MVOL1 sidecar: {sidecar_path}")
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        shape = (int(header["depth"]), int(header["height"]), int(header["width"]))
        fmt, dtype, order = header["format"], header["dtype"], header["byte_order"]
        sequence = header["sequence"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"corrupt MVOL1 sidecar {sidecar_path}: {exc}")
    if fmt != MVOL_FORMAT:
        raise DataFormatError(f"{sidecar_path}: unsupported format {fmt!r}")
    if dtype != "float32" or order != "little":
        raise DataFormatError(f"{sidecar_path}: unsupported dtype/byte order {dtype}/{order}")
    if not raw_path.exists():
        raise DataFormatError(f"missing MVOL1 payload: {raw_path}")

    expected = shape[0] * shape[1] * shape[2] * 4
    actual = raw_path.stat().st_size
    if actual != expected:
        raise DataFormatError(
            f"{raw_path}: size mismatch, header {shape[0]}x{shape[1]}x{shape[2]} needs {expected} bytes, found {actual}"
        )
    voxels = np.fromfile(raw_path, dtype="<f4").reshape(shape).astype(np.float32, copy=False)
    return Volume(voxels=voxels, sequence=sequence, patient_id=patient_id)


def _parse_int(value, name):
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} {value!r} is not an integer")


def load_clinical(csv_path):
    """
    Load and validate the clinical table

    Args:
        csv_path: Path to clinical.csv

    Returns:
        records: List of ClinicalRecord in file order
    """
    df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    if list(df.columns) != CLINICAL_HEADER:
        raise DataFormatError(
            f"{csv_path}: header must be {','.join(CLINICAL_HEADER)}, got {','.join(df.columns)}"
        )

    records = []
    for idx, row in enumerate(df.itertuples(index=False)):
        line = idx + 2  # header is line 1
        try:
            sex_code = row.sex.strip().upper()
            if sex_code not in ("M", "F"):
                raise ValueError(f"sex {row.sex!r} not in {{M, F}}")
            record = ClinicalRecord(
                patient_id=row.patient_id.strip(),
                age=_parse_int(row.age, "age"),
                sex="male" if sex_code == "M" else "female",
                hospitalizations=_parse_int(row.hospitalizations, "hospitalizations"),
                tumor_size=float(row.tumor_size_cm),
                multiple_lesions=_parse_int(row.multiple_lesions, "multiple_lesions"),
                t_stage=_parse_int(row.t_stage, "t_stage"),
                grade=_parse_int(row.grade, "grade"),
                label=_parse_int(row.label, "label"),
            )
        except ValueError as exc:
            raise RecordValidationError(str(exc), line=line)
        problems = record.problems()
        if problems:
            raise RecordValidationError(f"patient {record.patient_id}: {'; '.join(problems)}", line=line)
        records.append(record)
    return records


def write_clinical(records, csv_path):
    rows = [
        [
            r.patient_id,
            str(r.age),
            "M" if r.sex == "male" else "F",
            str(r.hospitalizations),
            f"{r.tumor_size:.1f}",
            str(r.multiple_lesions),
            str(r.t_stage),
            str(r.grade),
            str(r.label),
        ]
        for r in records
    ]
    pd.DataFrame(rows, columns=CLINICAL_HEADER).to_csv(csv_path, index=False, lineterminator="\n")


@dataclass
class DatasetManifest:
    root: str
    patient_ids: List[str]
    shapes: Dict[str, Dict[str, List[int]]]
    labels: Dict[str, int]
    class_counts: Dict[str, int]
    native_size: int = 0
    depth_range: List[int] = field(default_factory=list)
    seed: int = 0

    def to_json(self):
        """manifest.json payload (the root path is not persisted)"""
        return {
            "format_version": MANIFEST_VERSION,
            "n_patients": len(self.patient_ids),
            "class_counts": self.class_counts,
            "native_size": self.native_size,
            "depth_range": self.depth_range,
            "seed": self.seed,
            "patients": {pid: self.shapes[pid] for pid in self.patient_ids},
        }

    def volume_path(self, patient_id, sequence):
        return Path(self.root) / patient_id / f"{sequence}.json"


def write_manifest(manifest, root):
    dump_json(manifest.to_json(), Path(root) / "manifest.json")


def load_manifest(root):
    """
    Read manifest.json + clinical.csv and check every patient is complete

    Returns:
        manifest: DatasetManifest
        records: Mapping patient id -> ClinicalRecord
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.json under {root}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(f"{manifest_path}: unsupported format {data.get('format_version')!r}")

    records = {r.patient_id: r for r in load_clinical(root / "clinical.csv")}
    shapes = data.get("patients", {})
    patient_ids = sorted(shapes)
    for pid in patient_ids:
        if pid not in records:
            raise DataFormatError(f"patient {pid} has no clinical row")
        for seq in SEQUENCES:
            if not (root / pid / f"{seq}.json").exists():
                raise DataFormatError(f"patient {pid} is missing sequence {seq}")
    extra = sorted(set(records) - set(patient_ids))
    if extra:
        raise DataFormatError(f"clinical rows without volumes: {', '.join(extra[:5])}")

    labels = {pid: records[pid].label for pid in patient_ids}
    manifest = DatasetManifest(
        root=str(root),
        patient_ids=patient_ids,
        shapes=shapes,
        labels=labels,
        class_counts={"0": sum(1 for v in labels.values() if v == 0), "1": sum(1 for v in labels.values() if v == 1)},
        native_size=int(data.get("native_size", 0)),
        depth_range=list(data.get("depth_range", [])),
        seed=int(data.get("seed", 0)),
    )
    return manifest, records


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: List[List[str]]
    stratified: bool = True

    def split(self, index):
        """(train ids, test ids) for fold `index`"""
        test = list(self.folds[index])
        train = sorted(pid for i, fold in enumerate(self.folds) if i != index for pid in fold)
        return train, test

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(
            k=int(data["k"]),
            seed=int(data["seed"]),
            folds=[list(f) for f in data["folds"]],
            stratified=bool(data.get("stratified", True)),
        )


def kfold_split(manifest, k=5, seed=42):
    """
    Stratified patient-level k-fold partition

    Args:
        manifest: DatasetManifest (labels per patient)
        k: Number of folds
        seed: Shuffle seed

    Returns:
        plan: FoldPlan whose folds partition the patient set
    """
    ids = sorted(manifest.patient_ids)
    y = np.array([manifest.labels[pid] for pid in ids])
    for cls in (0, 1):
        count = int((y == cls).sum())
        if count < k:
            raise ContractViolation(f"class {cls} has {count} patients, fewer than k={k} folds")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    folds = [sorted(ids[i] for i in test_idx) for _, test_idx in splitter.split(np.zeros(len(ids)), y)]
    return FoldPlan(k=k, seed=seed, folds=folds)


def carve_validation(train_ids, labels, fraction=0.15, seed=42):
    """
    Split a validation set off the training patients, stratified when possible

    Returns:
        train_ids, val_ids: Sorted id lists
    """
    ids = sorted(train_ids)
    y = [labels[pid] for pid in ids]
    n_val = max(1, int(round(len(ids) * fraction)))
    stratify = y if min(y.count(0), y.count(1)) >= 2 and n_val >= 2 else None
    if stratify is None:
        logger.warning("Validation carve-out of %d patients is not stratified", n_val)
    train, val = train_test_split(ids, test_size=n_val, random_state=seed, stratify=stratify)
    return sorted(train), sorted(val)


def assert_disjoint(**splits):
    """Raise if any patient id appears in more than one named split"""
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = set(splits[a]) & set(splits[b])
            if shared:
                raise ContractViolation(
                    f"patient leakage between {a} and {b}: {', '.join(sorted(shared)[:5])}"
                )


def load_volumes(manifest, patient_ids, depth, size, spline_order=3):
    """
    Read and deterministically preprocess every sequence of the given patients

    Returns:
        volumes: Mapping patient id -> sequence -> float32 [depth, size, size]
    """
    volumes = {}
    for pid in patient_ids:
        volumes[pid] = {}
        for seq in SEQUENCES:
            v = read_volume(manifest.volume_path(pid, seq), patient_id=pid)
            volumes[pid][seq] = prepare_volume(v, depth=depth, size=size, spline_order=spline_order).voxels
    return volumes


class RecurrenceDataset(Dataset):
    """Preprocessed patients; rotation augmentation on demand"""

    def __init__(self, patient_ids, volumes, records, norm_stats, augment=False, max_degrees=30.0, seed=0):
        """
        Args:
            patient_ids: Patients in this split
            volumes: Output of load_volumes (may hold more patients)
            records: Mapping patient id -> ClinicalRecord
            norm_stats: NormStats from the training split
            augment: Apply random rotation
            max_degrees: Rotation half-range
            seed: Base of the per-sample RNG streams
        """
        self.patient_ids = list(patient_ids)
        self.volumes = volumes
        self.labels = [records[pid].label for pid in self.patient_ids]
        self.clinical = {pid: normalize_clinical(records[pid], norm_stats) for pid in self.patient_ids}
        self.augment = augment
        self.max_degrees = max_degrees
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.patient_ids)

    def _rng(self, pid):
        # per-sample stream derived from (seed, epoch, patient id)
        return np.random.default_rng([self.seed, self.epoch, zlib.crc32(pid.encode("utf-8"))])

    def __getitem__(self, index):
        pid = self.patient_ids[index]
        sample = {"patient_id": pid}
        rng = self._rng(pid) if self.augment else None
        for seq in SEQUENCES:
            voxels = self.volumes[pid][seq]
            if rng is not None:
                voxels = random_rotate(Volume(voxels, seq, pid), rng, self.max_degrees).voxels
            sample[seq] = torch.from_numpy(np.ascontiguousarray(voxels, dtype=np.float32)).unsqueeze(0)
        sample["clinical"] = torch.from_numpy(self.clinical[pid])
        sample["label"] = torch.tensor(float(self.labels[index]), dtype=torch.float32)
        return sample
