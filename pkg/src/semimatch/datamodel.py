"""Core tensor conventions and experiment-definition records.

Conventions used throughout the package:

* images are float tensors of shape (B, 3, H, W) with values in [0, 1]
  until per-channel normalization (which the model applies internally);
* label masks are integer tensors of shape (B, H, W) with values in
  [0, K) plus a reserved ignore value (255 by default) marking pixels
  excluded from every loss and metric;
* logits are float tensors of shape (B, K, H, W);
* feature volumes are non-empty lists of (B, C_i, h_i, w_i) tensors.

``SplitManifest`` and ``TrainConfig`` are the persisted experiment
definition; both round-trip through YAML and carry a ``schema_version``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, List, Sequence

import torch
import yaml

IGNORE_VALUE = 255

SCHEMA_VERSION = 1

FRAMEWORKS = (
    "labeled_only",
    "fixmatch",
    "unimatch_v1",
    "unimatch_v2",
    "variant_a",
    "variant_b",
    "variant_c",
)

DROPOUT_POSITIONS = ("encoder_decoder", "decoder_classifier")

FeatureVolume = List[torch.Tensor]


class ConfigError(ValueError):
    """Raised for malformed configs, manifests, or override keys."""


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images plus a flag recording whether per-channel
    normalization has already been applied (it must happen at most once,
    and color augmentations must run before it)."""

    data: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        check_image_batch(self.data)


def check_image_batch(data: torch.Tensor, granularity: int | None = None) -> None:
    if data.ndim != 4 or data.shape[1] != 3:
        raise ValueError(f"image batch must be (B, 3, H, W), got {tuple(data.shape)}")
    if data.shape[0] < 1:
        raise ValueError("image batch must contain at least one item")
    if not torch.isfinite(data).all():
        raise ValueError("image batch contains non-finite values")
    if granularity is not None:
        h, w = data.shape[-2:]
        if h % granularity or w % granularity:
            raise ValueError(
                f"spatial dims {h}x{w} not multiples of model granularity {granularity}"
            )


def check_label_mask(
    mask: torch.Tensor, num_classes: int, ignore_value: int = IGNORE_VALUE
) -> None:
    if mask.ndim != 3:
        raise ValueError(f"label mask must be (B, H, W), got {tuple(mask.shape)}")
    if not mask.dtype.is_floating_point:
        bad = (mask != ignore_value) & ((mask < 0) | (mask >= num_classes))
        if bad.any():
            raise ValueError(
                f"label mask contains values outside [0, {num_classes}) + ignore"
            )
    else:
        raise ValueError("label mask must be an integer tensor")


def check_logits(logits: torch.Tensor, num_classes: int | None = None) -> None:
    if logits.ndim != 4:
        raise ValueError(f"logits must be (B, K, H, W), got {tuple(logits.shape)}")
    if num_classes is not None and logits.shape[1] != num_classes:
        raise ValueError(
            f"logits have {logits.shape[1]} classes, expected {num_classes}"
        )
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")


# --------------------------------------------------------------------------
# Experiment records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    """Labeled/unlabeled partition of a dataset, identified by opaque
    sample IDs (never file paths)."""

    dataset_id: str
    labeled_ids: tuple
    unlabeled_ids: tuple
    ratio: Fraction
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "labeled_ids", tuple(self.labeled_ids))
        object.__setattr__(self, "unlabeled_ids", tuple(self.unlabeled_ids))
        object.__setattr__(self, "ratio", Fraction(self.ratio))
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ConfigError(f"labeled/unlabeled ids overlap: {sorted(overlap)[:5]}")
        if not self.labeled_ids or not self.unlabeled_ids:
            raise ConfigError("both labeled and unlabeled id sets must be non-empty")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "ratio": str(self.ratio),
            "seed": self.seed,
            "labeled_ids": list(self.labeled_ids),
            "unlabeled_ids": list(self.unlabeled_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema_version {version}")
        return cls(
            dataset_id=d["dataset_id"],
            labeled_ids=tuple(d["labeled_ids"]),
            unlabeled_ids=tuple(d["unlabeled_ids"]),
            ratio=Fraction(d["ratio"]),
            seed=int(d["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class AugmentConfig:
    """Image-augmentation knobs. The photometric defaults follow common
    practice for consistency training on segmentation."""

    scale_min: float = 0.5
    scale_max: float = 2.0
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    cutmix_p: float = 0.5
    cutmix_area_min: float = 0.25
    cutmix_area_max: float = 0.5


@dataclass
class PerturbConfig:
    dropout_p: float = 0.5
    position: str = "encoder_decoder"
    # exact_half follows the prose description (a random half of the
    # channels); the default Bernoulli sampling follows the pseudocode.
    exact_half: bool = False
    # resample a fresh complementary pair per feature level
    per_level_masks: bool = True


@dataclass
class TeacherConfig:
    # use the online student itself instead of the EMA teacher for
    # pseudo-labels
    use_student: bool = False


@dataclass
class LossConfig:
    # "all": divide the masked unlabeled loss by the count of non-ignore
    # pixels (loss scale then reflects the kept fraction); "valid":
    # divide by the count of confident pixels only.
    unsup_denominator: str = "all"
    ohem_thresh: float = 0.7
    ohem_min_kept: float = 1.0 / 16.0


@dataclass
class ModelConfig:
    widths: tuple = (16, 32)
    head_width: int = 32


@dataclass
class TrainConfig:
    """Everything a training run needs, minus the dataset itself."""

    framework: str = "unimatch_v2"
    tau: float = 0.95
    lambda_u: float = 1.0
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    crop_size: int = 64
    epochs: int = 40
    encoder_lr: float = 1e-3
    # None means "derive as 40x encoder_lr", the recipe for a
    # pre-trained encoder paired with a randomly initialized decoder.
    decoder_lr: float | None = None
    lr_power: float = 0.9
    weight_decay: float = 0.01
    ema_cap: float = 0.996
    freeze_encoder: bool = False
    use_ohem: bool = False
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def resolved_decoder_lr(self) -> float:
        return 40.0 * self.encoder_lr if self.decoder_lr is None else self.decoder_lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["widths"] = list(self.model.widths)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        groups = {
            "augment": AugmentConfig,
            "perturb": PerturbConfig,
            "teacher": TeacherConfig,
            "loss": LossConfig,
            "model": ModelConfig,
        }
        kwargs: dict[str, Any] = {}
        valid_top = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in valid_top:
                raise ConfigError(f"unknown config key: {key}")
            if key in groups:
                sub_cls = groups[key]
                valid_sub = {f.name for f in dataclasses.fields(sub_cls)}
                unknown = set(value) - valid_sub
                if unknown:
                    raise ConfigError(
                        f"unknown config key: {key}.{sorted(unknown)[0]}"
                    )
                kwargs[key] = sub_cls(**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.model.widths = tuple(cfg.model.widths)
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def validate_config(cfg: TrainConfig, granularity: int = 4) -> list[str]:
    """Collect invariant violations. Returns [] when the config is valid;
    never raises, so callers can report all problems at once."""

    v: list[str] = []
    if cfg.framework not in FRAMEWORKS:
        v.append(f"framework must be one of {FRAMEWORKS}, got {cfg.framework!r}")
    if not (0.0 <= cfg.tau <= 1.0):
        v.append("tau out of [0,1]")
    if cfg.lambda_u < 0:
        v.append("lambda_u must be >= 0")
    if cfg.batch_labeled < 1:
        v.append("batch_labeled must be >=1")
    if cfg.batch_unlabeled < 1:
        v.append("batch_unlabeled must be >=1")
    if cfg.crop_size < granularity or cfg.crop_size % granularity:
        v.append(f"crop_size must be a positive multiple of {granularity}")
    if cfg.epochs < 1:
        v.append("epochs must be >=1")
    if cfg.encoder_lr <= 0:
        v.append("encoder_lr must be > 0")
    if cfg.decoder_lr is not None and cfg.decoder_lr <= 0:
        v.append("decoder_lr must be > 0 when set")
    if cfg.lr_power <= 0:
        v.append("lr_power must be > 0")
    if cfg.weight_decay < 0:
        v.append("weight_decay must be >= 0")
    if not (0.0 <= cfg.ema_cap <= 1.0):
        v.append("ema_cap out of [0,1]")
    if not (0.0 <= cfg.perturb.dropout_p < 1.0):
        v.append("perturb.dropout_p out of [0,1)")
    if cfg.perturb.position not in DROPOUT_POSITIONS:
        v.append(
            f"perturb.position must be one of {DROPOUT_POSITIONS}, "
            f"got {cfg.perturb.position!r}"
        )
    if cfg.loss.unsup_denominator not in ("all", "valid"):
        v.append("loss.unsup_denominator must be 'all' or 'valid'")
    if not (0.0 < cfg.loss.ohem_thresh < 1.0):
        v.append("loss.ohem_thresh out of (0,1)")
    if not (0.0 < cfg.loss.ohem_min_kept < 1.0):
        v.append("loss.ohem_min_kept out of (0,1)")
    if not (cfg.augment.scale_min <= cfg.augment.scale_max):
        v.append("augment.scale_min must be <= augment.scale_max")
    if cfg.augment.scale_min <= 0:
        v.append("augment.scale_min must be > 0")
    if not (0.0 <= cfg.augment.cutmix_area_min <= cfg.augment.cutmix_area_max <= 1.0):
        v.append("augment.cutmix_area range must satisfy 0 <= min <= max <= 1")
    if any(w < 4 for w in cfg.model.widths):
        v.append("model.widths entries must be >= 4")
    if cfg.eval_every < 1:
        v.append("eval_every must be >=1")
    return v


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides to a nested config dict.

    Unknown keys are hard errors: a silently ignored typo in a sweep is
    the classic experiment-killer. Values are parsed as YAML scalars so
    ``tau=0.9``, ``freeze_encoder=true`` and ``widths=[8,16]`` all work.
    """

    out = _deep_copy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def _deep_copy(tree):
    if isinstance(tree, dict):
        return {k: _deep_copy(v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_deep_copy(v) for v in tree]
    return tree
