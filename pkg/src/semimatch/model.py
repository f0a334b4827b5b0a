"""Desk-scale segmentation networks: a small strided-conv encoder
producing two feature levels and a fuse-and-upsample decoder.

Group normalization throughout — batch statistics would couple the dual
strong streams that share one fused forward, and would complicate EMA
buffer semantics.

The decoder is split into a trunk and a 1x1 classifier so feature
perturbation can be inserted either at the encoder/decoder boundary
(default) or between trunk and classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ConfigError, FeatureVolume, ModelConfig


class ModelError(RuntimeError):
    """Raised on contract violations (granularity, partition)."""


@dataclass(frozen=True)
class ToyNetSpec:
    widths: Tuple[int, ...] = (16, 32)
    head_width: int = 32
    num_classes: int = 3

    def validate(self) -> None:
        if len(self.widths) != 2:
            raise ConfigError("toy encoder is two-stage; give exactly 2 widths")
        for w in (*self.widths, self.head_width):
            if w < 4 or w % 4:
                raise ConfigError(
                    f"widths must be multiples of 4 and >= 4, got {w}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")


def _block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(4, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(4, cout),
        nn.ReLU(inplace=True),
    )


class ToyEncoder(nn.Module):
    """Two stride-2 stages -> feature levels at 1/2 and 1/4 resolution.
    Input dims must be multiples of `granularity`."""

    granularity = 4

    def __init__(self, spec: ToyNetSpec):
        super().__init__()
        w0, w1 = spec.widths
        self.stage1 = _block(3, w0, stride=2)
        self.stage2 = _block(w0, w1, stride=2)
        self.trainable = True

    def forward(self, x: torch.Tensor) -> FeatureVolume:
        h, w = x.shape[-2:]
        if h % self.granularity or w % self.granularity:
            raise ModelError(
                f"input dims must be multiples of {self.granularity}, got {h}x{w}")
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        return [f1, f2]


class ToyDecoder(nn.Module):
    """Fuses the two levels at 1/2 resolution, then classifies and
    upsamples to the requested output size."""

    def __init__(self, spec: ToyNetSpec):
        super().__init__()
        w0, w1 = spec.widths
        hw = spec.head_width
        self.lateral = nn.Conv2d(w1, hw, 1, bias=False)
        self.fuse = nn.Sequential(
            nn.Conv2d(w0 + hw, hw, 3, padding=1, bias=False),
            nn.GroupNorm(4, hw),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(hw, spec.num_classes, 1)

    def trunk(self, feats: FeatureVolume) -> torch.Tensor:
        f1, f2 = feats
        up = F.interpolate(self.lateral(f2), size=f1.shape[-2:],
                           mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([f1, up], dim=1))

    def classify(self, trunk_out: torch.Tensor,
                 out_size: Tuple[int, int]) -> torch.Tensor:
        logits = self.classifier(trunk_out)
        return F.interpolate(logits, size=out_size, mode="bilinear",
                             align_corners=False)

    def forward(self, feats: FeatureVolume,
                out_size: Tuple[int, int]) -> torch.Tensor:
        return self.classify(self.trunk(feats), out_size)


def build_toy_model(spec: ToyNetSpec) -> Tuple[ToyEncoder, ToyDecoder]:
    spec.validate()
    return ToyEncoder(spec), ToyDecoder(spec)


class SegModel(nn.Module):
    """Encoder + decoder with input normalization folded in as buffers,
    so raw [0,1] images are valid input everywhere (augmentation wants
    un-normalized pixels; the network wants standardized ones)."""

    def __init__(self, encoder: ToyEncoder, decoder: ToyDecoder,
                 mean: torch.Tensor = None, std: torch.Tensor = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.register_buffer("norm_mean",
                             torch.full((3, 1, 1), 0.5) if mean is None
                             else mean.reshape(3, 1, 1).clone())
        self.register_buffer("norm_std",
                             torch.full((3, 1, 1), 0.25) if std is None
                             else std.reshape(3, 1, 1).clamp_min(1e-4).clone())

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.norm_mean) / self.norm_std

    def encode(self, images: torch.Tensor) -> FeatureVolume:
        return self.encoder(self.normalize(images))

    def decode(self, feats: FeatureVolume,
               out_size: Tuple[int, int]) -> torch.Tensor:
        logits = self.decoder(feats, out_size)
        if logits.shape[-2:] != tuple(out_size):
            raise ModelError("decoder failed to restore input resolution")
        return logits

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images), images.shape[-2:])


def build_seg_model(cfg: ModelConfig, num_classes: int,
                    mean: torch.Tensor = None,
                    std: torch.Tensor = None) -> SegModel:
    spec = ToyNetSpec(widths=tuple(cfg.widths), head_width=cfg.head_width,
                      num_classes=num_classes)
    enc, dec = build_toy_model(spec)
    return SegModel(enc, dec, mean, std)


def set_frozen(encoder: nn.Module, frozen: bool) -> nn.Module:
    """Frozen encoders produce no parameter gradients; the decoder is
    untouched. Toggling restores trainability."""
    for p in encoder.parameters():
        p.requires_grad_(not frozen)
    encoder.trainable = not frozen
    return encoder


def parameter_groups(encoder: nn.Module, decoder: nn.Module,
                     whole: nn.Module = None) -> dict:
    """Disjoint, exhaustive split of trainable parameters for per-group
    learning rates. If the enclosing module is given, any trainable
    parameter outside the two groups is a contract error."""

    enc = [p for p in encoder.parameters() if p.requires_grad]
    dec = [p for p in decoder.parameters() if p.requires_grad]
    enc_ids = {id(p) for p in enc}
    dec_ids = {id(p) for p in dec}
    if enc_ids & dec_ids:
        raise ModelError("encoder/decoder parameter groups overlap")
    if whole is not None:
        tagged = enc_ids | dec_ids
        for name, p in whole.named_parameters():
            if p.requires_grad and id(p) not in tagged:
                raise ModelError(f"untagged trainable parameter: {name}")
    return {"encoder": enc, "decoder": dec}


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
