"""Image-level augmentation: a weak pool (resize / crop / flip) and a
strong pool (photometric jitter + CutMix).

Every geometric decision is captured in a record so that labels,
confidence maps, and validity masks can be transformed exactly like the
pixels they describe. Records are replayable pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .datamodel import IGNORE_VALUE, AugmentConfig


class AugmentError(ValueError):
    """Raised on contract violations (shape mismatch, bad record)."""


@dataclass(frozen=True)
class AugRecord:
    """Replay record for the weak pool. Padding is implied: right/bottom
    only, whatever is needed to reach crop_size after resizing."""

    scale: float
    crop: Tuple[int, int]  # (top, left) in the resized+padded frame
    flip: bool
    crop_size: int


@dataclass(frozen=True)
class CutMixRecord:
    source: torch.Tensor   # (B,) long, partner index per item
    box: torch.Tensor      # (B, 4) long, (top, left, height, width)
    applied: torch.Tensor  # (B,) bool

    def __post_init__(self):
        b = self.source.shape[0]
        if self.box.shape != (b, 4) or self.applied.shape != (b,):
            raise AugmentError("inconsistent CutMixRecord field shapes")


# --------------------------------------------------------------------------
# Weak pool
# --------------------------------------------------------------------------

def _resize(image: torch.Tensor, size: Tuple[int, int], mode: str) -> torch.Tensor:
    if mode == "bilinear":
        return F.interpolate(image[None], size=size, mode="bilinear",
                             align_corners=False)[0]
    return F.interpolate(image[None, None].float(), size=size,
                         mode="nearest")[0, 0]


def replay_weak(tensor: torch.Tensor, record: AugRecord, *,
                is_mask: bool, pad_value) -> torch.Tensor:
    """Apply a stored weak record to any tensor at the ORIGINAL spatial
    size. Masks use nearest resize and constant padding; images use
    bilinear and per-channel padding."""

    if is_mask:
        if tensor.dim() != 2:
            raise AugmentError(f"mask replay expects (H,W), got {tuple(tensor.shape)}")
        h, w = tensor.shape
    else:
        if tensor.dim() != 3:
            raise AugmentError(f"image replay expects (C,H,W), got {tuple(tensor.shape)}")
        h, w = tensor.shape[-2:]
    nh, nw = max(1, round(h * record.scale)), max(1, round(w * record.scale))
    out = _resize(tensor if not is_mask else tensor,
                  (nh, nw), "nearest" if is_mask else "bilinear")
    cs = record.crop_size
    pad_h, pad_w = max(0, cs - nh), max(0, cs - nw)
    if pad_h or pad_w:
        if is_mask:
            out = F.pad(out[None, None].float(), (0, pad_w, 0, pad_h),
                        value=float(pad_value))[0, 0]
        else:
            pv = torch.as_tensor(pad_value, dtype=out.dtype).reshape(-1)
            if pv.numel() == 1:
                pv = pv.expand(out.shape[0])
            canvas = pv[:, None, None].expand(out.shape[0], nh + pad_h, nw + pad_w).clone()
            canvas[:, :nh, :nw] = out
            out = canvas
    top, left = record.crop
    if top + cs > out.shape[-2] or left + cs > out.shape[-1]:
        raise AugmentError("crop window exceeds padded image — corrupt record")
    out = out[..., top:top + cs, left:left + cs]
    if record.flip:
        out = torch.flip(out, dims=[-1])
    if is_mask:
        out = out.round().long()
    return out


def weak_augment(
    image: torch.Tensor,
    mask: Optional[torch.Tensor],
    crop_size: int,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
    pad_value: Optional[torch.Tensor] = None,
):
    """Random resize by a uniform scale, pad (right/bottom) to crop_size
    if short, random crop, horizontal flip with p=0.5.

    Padded mask pixels become the ignore value, so passing a zeros mask
    for an unlabeled image yields its validity map for free. pad_value
    defaults to the image's own channel mean; pass the dataset mean for
    consistency across samples.

    Returns (image', mask' or None, AugRecord).
    """

    if image.dim() != 3 or image.shape[0] != 3:
        raise AugmentError(f"expected (3,H,W) image, got {tuple(image.shape)}")
    if mask is not None and mask.shape != image.shape[-2:]:
        raise AugmentError("mask spatial dims must match image")

    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    h, w = image.shape[-2:]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    avail_h = max(nh, crop_size)
    avail_w = max(nw, crop_size)
    top = int(rng.integers(0, avail_h - crop_size + 1))
    left = int(rng.integers(0, avail_w - crop_size + 1))
    flip = bool(rng.random() < cfg.hflip_p)
    record = AugRecord(scale=scale, crop=(top, left), flip=flip, crop_size=crop_size)

    if pad_value is None:
        pad_value = image.mean(dim=(1, 2))
    image_out = replay_weak(image, record, is_mask=False, pad_value=pad_value)
    mask_out = None
    if mask is not None:
        mask_out = replay_weak(mask, record, is_mask=True, pad_value=IGNORE_VALUE)
    return image_out, mask_out, record


# --------------------------------------------------------------------------
# Strong pool: photometric
# --------------------------------------------------------------------------

def strong_photometric(
    image: torch.Tensor,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> torch.Tensor:
    """Color jitter / grayscale / gaussian blur, each gated by its own
    probability. Geometry untouched; output clamped to [0,1]."""

    out = image
    if rng.random() < cfg.jitter_p:
        # jitter sub-ops in random order, like the standard transform
        ops = list(rng.permutation(4))
        for op in ops:
            if op == 0:
                out = TF.adjust_brightness(out, 1.0 + float(
                    rng.uniform(-cfg.brightness, cfg.brightness)))
            elif op == 1:
                out = TF.adjust_contrast(out, 1.0 + float(
                    rng.uniform(-cfg.contrast, cfg.contrast)))
            elif op == 2:
                out = TF.adjust_saturation(out, 1.0 + float(
                    rng.uniform(-cfg.saturation, cfg.saturation)))
            else:
                out = TF.adjust_hue(out, float(rng.uniform(-cfg.hue, cfg.hue)))
    if rng.random() < cfg.gray_p:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if rng.random() < cfg.blur_p:
        sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
        k = 2 * math.ceil(2 * sigma) + 1
        k = min(k, (min(out.shape[-2:]) - 1) | 1)
        out = TF.gaussian_blur(out, kernel_size=[k, k], sigma=[sigma, sigma])
    return out.clamp(0.0, 1.0)


# --------------------------------------------------------------------------
# Strong pool: CutMix
# --------------------------------------------------------------------------

def _sample_box(h: int, w: int, area_range: Tuple[float, float],
                rng: np.random.Generator) -> Tuple[int, int, int, int]:
    lo, hi = area_range
    frac = float(rng.uniform(lo, hi))
    target = frac * h * w
    for _ in range(10):
        aspect = float(rng.uniform(0.5, 2.0))
        bh = int(round(math.sqrt(target * aspect)))
        bh = max(max(1, math.ceil(target / w)), min(bh, h))
        bw = int(round(target / bh))
        bw = max(1, min(bw, w))
        # nudge width so the realized fraction stays inside the range
        while bh * bw < lo * h * w and bw < w:
            bw += 1
        while bh * bw > hi * h * w and bw > 1:
            bw -= 1
        if lo * h * w <= bh * bw <= hi * h * w:
            break
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix_batch(
    images: torch.Tensor,
    rng: np.random.Generator,
    area_range: Tuple[float, float] = (0.25, 0.5),
    p: float = 0.5,
) -> Tuple[torch.Tensor, CutMixRecord]:
    """Per item, with probability p, paste a random box from a partner
    image (a permutation with no fixed points). B=1 degenerates to a
    no-op with applied all false."""

    if images.dim() != 4:
        raise AugmentError(f"expected (B,C,H,W), got {tuple(images.shape)}")
    b, _, h, w = images.shape
    if b < 2:
        record = CutMixRecord(
            source=torch.zeros(b, dtype=torch.long),
            box=torch.zeros(b, 4, dtype=torch.long),
            applied=torch.zeros(b, dtype=torch.bool),
        )
        return images.clone(), record

    perm = rng.permutation(b)
    while (perm == np.arange(b)).any():
        perm = rng.permutation(b)
    boxes = torch.zeros(b, 4, dtype=torch.long)
    applied = torch.zeros(b, dtype=torch.bool)
    for i in range(b):
        boxes[i] = torch.tensor(_sample_box(h, w, area_range, rng))
        applied[i] = bool(rng.random() < p)
    record = CutMixRecord(source=torch.from_numpy(perm).long(),
                          box=boxes, applied=applied)
    return replay_cutmix(images, record), record


def replay_cutmix(tensor: torch.Tensor, record: CutMixRecord) -> torch.Tensor:
    """Apply stored box replacements to any (B,...,H,W) tensor. Reads
    come from the ORIGINAL tensor, so chained sources resolve to the
    pre-mix batch — every mixed pixel has a single provenance."""

    if tensor.shape[0] != record.source.shape[0]:
        raise AugmentError("batch size does not match record")
    out = tensor.clone()
    for i in range(tensor.shape[0]):
        if not bool(record.applied[i]):
            continue
        top, left, bh, bw = (int(v) for v in record.box[i])
        if top + bh > tensor.shape[-2] or left + bw > tensor.shape[-1]:
            raise AugmentError("box exceeds tensor bounds")
        src = int(record.source[i])
        out[i, ..., top:top + bh, left:left + bw] = \
            tensor[src, ..., top:top + bh, left:left + bw]
    return out


def apply_cutmix_to_targets(
    labels: torch.Tensor,
    confidence: Optional[torch.Tensor],
    record: CutMixRecord,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Mix hard labels and confidence with the records their images got,
    so each pixel's supervision travels with its pixels."""

    if labels.dim() != 3:
        raise AugmentError(f"expected (B,H,W) labels, got {tuple(labels.shape)}")
    if confidence is not None and confidence.shape != labels.shape:
        raise AugmentError("confidence shape must match labels")
    labels_out = replay_cutmix(labels, record)
    conf_out = replay_cutmix(confidence, record) if confidence is not None else None
    return labels_out, conf_out
