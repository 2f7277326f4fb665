"""
Single-Fold Training

Adam + binary cross-entropy on mixup soft labels, validation-AUC early
stopping, best-checkpoint selection and held-out test evaluation.
"""

import logging
import random
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.models.checkpoint import read_checkpoint, save_checkpoint
from src.utils.data_loader import assert_disjoint
from src.utils.exceptions import ConfigError, ContractViolation, TrainingAborted, UndefinedMetricError
from src.utils.metrics import auc, confusion_counts, precision_recall_from_counts
from src.utils.preprocess import mixup_batch

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
CHECKPOINT_NAME = "ckpt.pt"


def seed_everything(seed):
    """Seed python, numpy and torch (dropout, initialisation)"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def bce_loss(p, y, eps=BCE_EPS):
    """
    Mean binary cross-entropy on probabilities

    Args:
        p: Predicted probabilities
        y: Targets in [0, 1]; soft labels from mixup are allowed
        eps: Clamp margin for probabilities of exactly 0 or 1

    Returns:
        loss: Scalar tensor
    """
    p = torch.as_tensor(p, dtype=torch.float64 if not torch.is_tensor(p) else None)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    if p.shape != y.shape:
        raise ContractViolation(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in shape")
    saturated = (p <= 0) | (p >= 1)
    if bool(saturated.any()):
        logger.warning("Clamping %d saturated probabilities to [%g, 1 - %g]", int(saturated.sum()), eps, eps)
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def build_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)


def _loader(dataset, batch_size, shuffle=False, generator=None):
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator, num_workers=0)


@torch.no_grad()
def predict_dataset(model, dataset, batch_size=8):
    """
    Forward every sample in eval mode

    Returns:
        patient_ids: List in dataset order
        probabilities: float64 array
        labels: int array
    """
    model.eval()
    ids, probs, labels = [], [], []
    for batch in _loader(dataset, batch_size):
        pred = model(batch)
        ids.extend(batch["patient_id"])
        probs.append(pred.probability.reshape(-1).double().cpu().numpy())
        labels.append(batch["label"].reshape(-1).cpu().numpy())
    return ids, np.concatenate(probs), np.concatenate(labels).round().astype(np.int64)


def evaluate(model, dataset, batch_size=8, threshold=0.5):
    """
    Loss, AUC, precision, recall and confusion counts on one split

    AUC is None when the split holds a single class.
    """
    ids, probs, labels = predict_dataset(model, dataset, batch_size)
    loss = float(bce_loss(torch.from_numpy(probs), torch.from_numpy(labels.astype(np.float64))))
    try:
        auc_value = auc(probs, labels)
    except UndefinedMetricError as exc:
        logger.warning("%s", exc)
        auc_value = None
    counts = confusion_counts(probs, labels, threshold)
    precision, recall = precision_recall_from_counts(counts)
    return {
        "loss": loss,
        "auc": auc_value,
        "precision": precision,
        "recall": recall,
        "confusion": counts,
        "patient_ids": ids,
        "probabilities": probs,
        "labels": labels,
    }


@dataclass
class FoldResult:
    fold: int
    status: str = "ok"
    checkpoint: Optional[str] = None
    auc: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    confusion: Dict[str, int] = field(default_factory=dict)
    epochs_run: int = 0
    best_epoch: int = 0
    best_monitor: Optional[float] = None
    monitor: str = "val_auc"
    error: Optional[str] = None
    history: List[dict] = field(default_factory=list)

    def to_dict(self, include_history=False):
        data = asdict(self)
        data["epochs"] = self.epochs_run
        if not include_history:
            data.pop("history")
        return data

    @classmethod
    def failed(cls, fold, error):
        return cls(fold=fold, status="failed", error=str(error))


def _monitor_score(monitor, val):
    """Higher is better"""
    return val["auc"] if monitor == "val_auc" else -val["loss"]


def train_fold(model, train_set, val_set, test_set, cfg, out_dir, fold=0, extras=None, quiet=False):
    """
    Train one fold and evaluate its best checkpoint on the test split

    Args:
        model: Freshly initialised HCNNViT
        train_set: RecurrenceDataset of training patients (augmentation per cfg)
        val_set: Validation carve-out, no augmentation
        test_set: Held-out fold, no augmentation
        cfg: TrainConfig
        out_dir: Fold directory; receives ckpt.pt, history.csv and test_predictions.csv
        fold: Fold index, used for seeding and diagnostics
        extras: Metadata stored in the checkpoint next to the weights
        quiet: Disable the progress bar

    Returns:
        result: FoldResult
    """
    for name, split in (("train", train_set), ("validation", val_set), ("test", test_set)):
        if len(split) == 0:
            raise ConfigError(f"fold {fold}: {name} split is empty")
    assert_disjoint(train=train_set.patient_ids, val=val_set.patient_ids, test=test_set.patient_ids)
    test_ids = set(test_set.patient_ids)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME

    monitor = cfg.monitor
    if monitor == "val_auc" and len(set(val_set.labels)) < 2:
        logger.warning("Fold %d: validation split has one class; monitoring val_loss instead", fold)
        monitor = "val_loss"

    torch.manual_seed(cfg.seed + fold)
    generator = torch.Generator()
    generator.manual_seed(cfg.seed + fold)
    mix_rng = np.random.default_rng([cfg.seed, fold])
    optimizer = build_optimizer(model, cfg)
    loader = _loader(train_set, cfg.batch_size, shuffle=True, generator=generator)

    history = []
    best_score, best_epoch = None, 0
    progress = tqdm(
        range(1, cfg.max_epochs + 1),
        desc=f"fold {fold}",
        disable=quiet or not sys.stdout.isatty(),
        leave=False,
    )
    for epoch in progress:
        train_set.set_epoch(epoch)
        model.train()
        losses = []
        for batch_index, batch in enumerate(loader):
            if test_ids.intersection(batch["patient_id"]):
                raise ContractViolation(f"fold {fold}: test patients reached a training batch")
            if cfg.mixup_alpha > 0:
                batch, _ = mixup_batch(batch, cfg.mixup_alpha, mix_rng)
            pred = model(batch)
            loss = bce_loss(pred.probability, batch["label"].to(pred.probability.dtype))
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"fold {fold}: non-finite loss at epoch {epoch}, batch {batch_index} (lr={cfg.lr})",
                    fold=fold,
                    epoch=epoch,
                    batch_index=batch_index,
                    lr=cfg.lr,
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val = evaluate(model, val_set, cfg.batch_size)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val["loss"], "val_auc": val["auc"]}
        history.append(row)
        logger.debug("fold %d epoch %d: %s", fold, epoch, row)

        score = _monitor_score(monitor, val)
        if best_score is None or score > best_score:
            best_score, best_epoch = score, epoch
            save_checkpoint(ckpt_path, model, dict(extras or {}, epoch=epoch, fold=fold))
        progress.set_postfix(loss=f"{row['train_loss']:.4f}", best=best_epoch)
        if epoch - best_epoch >= cfg.patience:
            logger.info("Fold %d: early stop at epoch %d (best epoch %d)", fold, epoch, best_epoch)
            break

    pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "val_auc"]).to_csv(
        out / "history.csv", index=False
    )

    model.load_state_dict(read_checkpoint(ckpt_path)["state_dict"])
    test = evaluate(model, test_set, cfg.batch_size)
    pd.DataFrame(
        {"patient_id": test["patient_ids"], "probability": test["probabilities"], "label": test["labels"]}
    ).to_csv(out / "test_predictions.csv", index=False)

    best_monitor = best_score if monitor == "val_auc" else -best_score
    logger.info("Fold %d: test AUC %s after %d epochs", fold, test["auc"], len(history))
    return FoldResult(
        fold=fold,
        checkpoint=str(ckpt_path),
        auc=test["auc"],
        precision=test["precision"],
        recall=test["recall"],
        confusion=test["confusion"],
        epochs_run=len(history),
        best_epoch=best_epoch,
        best_monitor=best_monitor,
        monitor=monitor,
        history=history,
    )
