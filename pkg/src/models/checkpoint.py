"""
Checkpoint Archive

One torch archive per model holding the canonical config text, the named
parameter tensors and a format-version string.
"""

import hashlib
import json
import logging

import torch

from src.models.hcnn_vit import build_variant
from src.utils.config import canonical_json, model_config_from_dict
from src.utils.exceptions import DataFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "hcvt-ckpt-1"


def save_checkpoint(path, model, extras=None):
    """
    Save a model archive

    Args:
        path: Output file
        model: HCNNViT
        extras: JSON-compatible metadata (NormStats, preprocessing config, epoch)
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "config": canonical_json(model.config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extras": json.loads(json.dumps(extras or {})),
    }
    torch.save(payload, path)


def read_checkpoint(path):
    """Raw archive contents after format validation"""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise DataFormatError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}")
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint format {version!r}, expected {FORMAT_VERSION!r}")
    return payload


def load_checkpoint(path):
    """
    Rebuild the model stored in an archive

    Returns:
        model: HCNNViT in eval mode
        extras: Metadata dict stored alongside the weights
    """
    payload = read_checkpoint(path)
    config = model_config_from_dict(json.loads(payload["config"]))
    model = build_variant(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extras", {})


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parameter_hash(model):
    """Hash of every parameter and buffer, independent of file serialisation"""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
