"""Feature-level perturbation: plain channel-wise dropout and the
complementary variant, where the two strong streams see disjoint channel
subsets of the same features (one Bernoulli(0.5) mask and its
complement, both rescaled by 2 to keep expectation)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .datamodel import DROPOUT_POSITIONS, ConfigError, FeatureVolume


class PerturbError(RuntimeError):
    """Raised on shape mismatches and double-application."""


@dataclass(frozen=True)
class ChannelMask:
    data: torch.Tensor  # (B, C) float, entries in {0, 1}
    complement: bool = False

    def __post_init__(self):
        if self.data.dim() != 2:
            raise PerturbError(f"mask must be (B,C), got {tuple(self.data.shape)}")
        if not bool(((self.data == 0) | (self.data == 1)).all()):
            raise PerturbError("mask entries must be 0 or 1")


def channel_dropout(feat: FeatureVolume, p: float,
                    rng: np.random.Generator) -> FeatureVolume:
    """Zero each (sample, channel) slice independently with probability
    p; survivors scaled by 1/(1-p). Fresh masks per level."""

    if not (0 <= p < 1):
        raise ConfigError(f"dropout p must be in [0,1), got {p}")
    out: List[torch.Tensor] = []
    for t in feat:
        b, c = t.shape[:2]
        keep = torch.from_numpy(
            (rng.random((b, c)) >= p).astype(np.float32))
        scale = keep / (1.0 - p)
        out.append(t * scale.reshape(b, c, *([1] * (t.dim() - 2))))
    return out


def sample_complementary_masks(
    b: int, c: int, rng: np.random.Generator, exact_half: bool = False,
) -> Tuple[ChannelMask, ChannelMask]:
    """One Bernoulli(0.5) draw per (sample, channel) entry, plus its
    complement. exact_half instead keeps exactly floor(C/2) channels per
    sample (the idealized description; the sampled form is the default)."""

    if c < 1:
        raise ConfigError("need at least one channel")
    if exact_half:
        m = np.zeros((b, c), dtype=np.float32)
        for i in range(b):
            keep = rng.permutation(c)[: c // 2]
            m[i, keep] = 1.0
    else:
        m = (rng.random((b, c)) < 0.5).astype(np.float32)
    m_t = torch.from_numpy(m)
    return ChannelMask(m_t), ChannelMask(1.0 - m_t, complement=True)


def sample_level_masks(
    feat: FeatureVolume, rng: np.random.Generator, *,
    exact_half: bool = False, per_level: bool = True,
) -> List[Tuple[ChannelMask, ChannelMask]]:
    """Complementary pair per feature level. With per_level=False the
    first level's draw is reused where channel counts agree."""

    masks: List[Tuple[ChannelMask, ChannelMask]] = []
    for t in feat:
        b, c = t.shape[:2]
        if not per_level and masks and masks[0][0].data.shape == (b, c):
            masks.append(masks[0])
        else:
            masks.append(sample_complementary_masks(b, c, rng, exact_half))
    return masks


def apply_complementary_dropout(
    e1: FeatureVolume,
    e2: FeatureVolume,
    masks: Sequence[Tuple[ChannelMask, ChannelMask]],
) -> Tuple[FeatureVolume, FeatureVolume]:
    """e1' = e1 * M * 2, e2' = e2 * (1-M) * 2, broadcast over spatial
    dims. Differentiable; gradients reach the feature producers on kept
    channels only."""

    if len(e1) != len(e2) or len(e1) != len(masks):
        raise PerturbError("level count mismatch between streams and masks")
    out1: List[torch.Tensor] = []
    out2: List[torch.Tensor] = []
    for t1, t2, (m, mc) in zip(e1, e2, masks):
        if t1.shape != t2.shape:
            raise PerturbError(
                f"stream shapes differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        b, c = t1.shape[:2]
        if m.data.shape != (b, c):
            raise PerturbError(
                f"mask shape {tuple(m.data.shape)} does not match features ({b},{c})")
        shape = (b, c, *([1] * (t1.dim() - 2)))
        out1.append(t1 * (m.data.reshape(shape) * 2.0))
        out2.append(t2 * (mc.data.reshape(shape) * 2.0))
    return out1, out2


def position_dispatch(position: str) -> str:
    """Validate where feature perturbation is inserted.

    encoder_decoder: on the encoder's output volumes, before the decoder
    (the default). decoder_classifier: on the decoder trunk's output
    activations, before the final classifier.
    """
    if position not in DROPOUT_POSITIONS:
        raise ConfigError(
            f"unknown dropout position {position!r}; choose from {DROPOUT_POSITIONS}")
    return position


class DropoutGuard:
    """Latch asserting complementary dropout fires at most once per
    forward. Step functions arm one guard per student forward."""

    def __init__(self):
        self._used = False

    def claim(self) -> None:
        if self._used:
            raise PerturbError("complementary dropout applied twice in one forward")
        self._used = True
