"""
Checkpoint Predictor

Wraps a trained archive together with its fold's clinical normalisation and
preprocessing settings, so raw volumes and records can be scored directly.
"""

import logging

import numpy as np
import torch

from src.models.checkpoint import file_sha256, load_checkpoint
from src.utils.config import SEQUENCES
from src.utils.data_loader import RecurrenceDataset, load_manifest, load_volumes
from src.utils.exceptions import DataFormatError
from src.utils.preprocess import NormStats, normalize_clinical, prepare_volume

logger = logging.getLogger(__name__)


class Predictor:
    """Trained HCNNViT plus the statistics it was trained with"""

    def __init__(self, model, norm_stats, spline_order=3, checkpoint_hash=None):
        """
        Args:
            model: HCNNViT in eval mode
            norm_stats: NormStats of the training split
            spline_order: SIZ spline order used in training
            checkpoint_hash: SHA-256 of the archive file, if loaded from disk
        """
        self.model = model.eval()
        self.norm_stats = norm_stats
        self.spline_order = spline_order
        self.checkpoint_hash = checkpoint_hash

    @classmethod
    def from_checkpoint(cls, path):
        model, extras = load_checkpoint(path)
        if "norm_stats" not in extras:
            raise DataFormatError(f"{path}: checkpoint carries no clinical normalisation statistics")
        spline_order = int(extras.get("preprocess", {}).get("spline_order", 3))
        return cls(model, NormStats.from_dict(extras["norm_stats"]), spline_order, file_sha256(path))

    @property
    def input_shape(self):
        return self.model.config.input.depth, self.model.config.input.size

    def prepare(self, volumes, record):
        """
        Build a batch of one from raw data

        Args:
            volumes: Mapping sequence -> Volume at native resolution
            record: ClinicalRecord

        Returns:
            batch: Model input with [1, 1, D, H, W] volumes and a [1, 7] clinical vector
        """
        depth, size = self.input_shape
        batch = {"patient_id": [record.patient_id]}
        for seq in SEQUENCES:
            if seq not in volumes:
                continue
            v = prepare_volume(volumes[seq], depth=depth, size=size, spline_order=self.spline_order)
            batch[seq] = torch.from_numpy(v.voxels).reshape(1, 1, depth, size, size)
        batch["clinical"] = torch.from_numpy(normalize_clinical(record, self.norm_stats)).unsqueeze(0)
        return batch

    @torch.no_grad()
    def predict(self, volumes, record):
        """
        Score one patient

        Returns:
            result: {"probability", "branch_betas", "branch_names"}
        """
        pred = self.model(self.prepare(volumes, record))
        return {
            "probability": float(pred.probability[0]),
            "branch_betas": pred.branch_betas[0].tolist(),
            "branch_names": list(pred.branch_names),
        }

    def predict_batch(self, samples):
        """
        Score several patients

        Args:
            samples: Iterable of (volumes, record) pairs

        Returns:
            probabilities: float64 array
        """
        return np.array([self.predict(volumes, record)["probability"] for volumes, record in samples])

    def dataset(self, data_root, patient_ids):
        """RecurrenceDataset over a dataset directory, normalised with this checkpoint's statistics"""
        manifest, records = load_manifest(data_root)
        unknown = sorted(set(patient_ids) - set(manifest.patient_ids))
        if unknown:
            raise DataFormatError(f"patients not in {data_root}: {', '.join(unknown[:5])}")
        depth, size = self.input_shape
        volumes = load_volumes(manifest, patient_ids, depth, size, self.spline_order)
        return RecurrenceDataset(patient_ids, volumes, records, self.norm_stats)
