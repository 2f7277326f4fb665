"""
Configuration Loading

Typed views over the JSON / YAML config files. Every section is a dataclass;
unknown keys are rejected with the dotted path that introduced them.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import yaml

from src.utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

VARIANTS = (
    "full",
    "no_local_gam",
    "no_global_gam",
    "no_gam",
    "single_branch",
    "conditional_single_branch",
    "mri_only",
)
CNN_KINDS = ("plain", "residual")
SEQUENCES = ("adc", "t2", "dwi")


@dataclass
class ViTConfig:
    patch_size: int = 16
    frame_patch_size: int = 1
    embed_dim: int = 1024
    depth: int = 6
    heads: int = 8
    mlp_dim: int = 2048
    dropout: float = 0.2
    emb_dropout: float = 0.1


@dataclass
class CNNConfig:
    channels: List[int] = field(default_factory=lambda: [32, 64, 128])
    leaky_slope: float = 0.01
    kind: str = "plain"


@dataclass
class ClinicalConfig:
    in_features: int = 7
    hidden: List[int] = field(default_factory=lambda: [128])


@dataclass
class HeadConfig:
    hidden: List[int] = field(default_factory=lambda: [256])
    dropout: float = 0.2


@dataclass
class InputConfig:
    depth: int = 13
    size: int = 256


@dataclass
class PathConfig:
    """Output channels of the two 1x1 convolutions in front of each extractor"""

    vit_channels: int = 1
    cnn_channels: int = 8


@dataclass
class GatingConfig:
    skip_sigmoid: bool = False


@dataclass
class ModelConfig:
    fusion_dim: int = 1024
    variant: str = "full"
    vit: ViTConfig = field(default_factory=ViTConfig)
    cnn: CNNConfig = field(default_factory=CNNConfig)
    clinical: ClinicalConfig = field(default_factory=ClinicalConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    input: InputConfig = field(default_factory=InputConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)

    def validate(self):
        """
        Check cross-field constraints

        Raises:
            ConfigError: naming the offending fields
        """
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}"
            )
        if self.cnn.kind not in CNN_KINDS:
            raise ConfigError(f"unknown cnn.kind {self.cnn.kind!r}; valid: {', '.join(CNN_KINDS)}")
        size, depth = self.input.size, self.input.depth
        if size % self.vit.patch_size != 0:
            raise ConfigError(
                f"vit.patch_size={self.vit.patch_size} does not divide input.size={size}"
            )
        if depth % self.vit.frame_patch_size != 0:
            raise ConfigError(
                f"vit.frame_patch_size={self.vit.frame_patch_size} does not divide input.depth={depth}"
            )
        if self.vit.embed_dim % self.vit.heads != 0:
            raise ConfigError(
                f"vit.embed_dim={self.vit.embed_dim} is not divisible by vit.heads={self.vit.heads}"
            )
        if size < 8:
            raise ConfigError(f"input.size={size} is too small for three stride-2 CNN stages")
        if len(self.cnn.channels) != 3:
            raise ConfigError(f"cnn.channels must list 3 stages, got {self.cnn.channels}")
        if self.fusion_dim < 1:
            raise ConfigError("fusion_dim must be positive")
        return self


@dataclass
class PreprocessConfig:
    spline_order: int = 3
    rotation_degrees: float = 30.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 400
    patience: int = 50
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42
    mixup_alpha: float = 0.2
    augment: bool = True
    monitor: str = "val_auc"
    val_fraction: float = 0.15

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.patience >= self.max_epochs:
            raise ConfigError(
                f"train.patience={self.patience} must be < train.max_epochs={self.max_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.monitor not in ("val_auc", "val_loss"):
            raise ConfigError(f"unknown train.monitor {self.monitor!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must lie in (0, 1)")
        return self


@dataclass
class RunConfig:
    """Merged view handed to the CLI: model + training + preprocessing + fold count"""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    folds: int = 5
    jobs: int = 1

    def validate(self):
        self.model.validate()
        self.train.validate()
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        return self


def _build(cls, data, path):
    """Recursively build dataclass `cls` from a mapping, rejecting unknown keys"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        dotted = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown config keys: {dotted}")

    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, (tuple, list)):
            if not isinstance(value, (tuple, list)):
                raise ConfigError(f"{sub}: expected a list, got {value!r}")
            kwargs[name] = type(default)(value)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path):
    """Match scalar types to the field default; YAML reads `1e-4` as a string"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(value, bool):
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if isinstance(default, int):
            if not number.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            return int(number)
        return number
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def to_dict(config):
    """Plain-dict view; tuples become lists so the JSON form is stable"""
    return json.loads(json.dumps(dataclasses.asdict(config)))


def canonical_json(data):
    """Canonical text form: sorted keys, two-space indent, trailing newline"""
    if dataclasses.is_dataclass(data):
        data = to_dict(data)
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def model_config_from_dict(data):
    return _build(ModelConfig, data, "model")


def run_config_from_dict(data):
    return _build(RunConfig, data, "")


def apply_overrides(data, overrides):
    """
    Apply dotted `key=value` overrides to a nested dict

    Args:
        data: Nested config mapping (modified in place)
        overrides: Iterable of strings like "model.vit.depth=2"

    Returns:
        data: The same mapping
    """
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(config_path=None, overrides=None):
    """
    Load a run configuration

    Args:
        config_path: JSON or YAML file; None starts from defaults
        overrides: Dotted key=value strings; flags win over the file

    Returns:
        config: Validated RunConfig
    """
    data = {}
    if config_path is not None:
        try:
            with open(config_path, "r") as f:
                if str(config_path).endswith(".json"):
                    data = json.load(f)
                else:
                    data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}")
        logger.info("Configuration loaded from %s", config_path)
    apply_overrides(data, overrides)
    return run_config_from_dict(data).validate()


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(config))


def tiny_model_config(variant="full"):
    """Desk-scale profile: 64x64, depth 8, embed 128, ViT depth 2, d_f 128"""
    return ModelConfig(
        fusion_dim=128,
        variant=variant,
        vit=ViTConfig(patch_size=16, frame_patch_size=1, embed_dim=128, depth=2, heads=4, mlp_dim=256),
        cnn=CNNConfig(channels=[8, 16, 32]),
        input=InputConfig(depth=8, size=64),
    )


def resolve_threads():
    """Worker cap from HCVT_THREADS, defaulting to the logical core count"""
    raw = os.environ.get("HCVT_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"HCVT_THREADS must be an integer, got {raw!r}")
        if value < 1:
            raise ConfigError("HCVT_THREADS must be >= 1")
        return value
    return os.cpu_count() or 1
