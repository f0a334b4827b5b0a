"""Evaluation: confusion-matrix mIoU and sliding-window inference.

Zero-union classes are excluded from the mean rather than scored zero;
if every class has zero union the mean is NaN (flagged, never silently
0). Ignore pixels never enter the counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import IGNORE_VALUE


class EvalError(ValueError):
    """Raised on out-of-range classes or shape mismatches."""


@dataclass
class ConfusionMatrix:
    num_classes: int
    ignore_value: int = IGNORE_VALUE
    data: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data is None:
            self.data = np.zeros((self.num_classes, self.num_classes),
                                 dtype=np.int64)
        elif self.data.shape != (self.num_classes, self.num_classes):
            raise EvalError("confusion matrix shape mismatch")

    def total(self) -> int:
        return int(self.data.sum())


def accumulate(cm: ConfusionMatrix, pred: torch.Tensor,
               gt: torch.Tensor) -> ConfusionMatrix:
    """counts[gt, pred] += 1 per pixel with gt != ignore. Mutates and
    returns cm; accumulation order never matters."""

    p = torch.as_tensor(pred).reshape(-1).long()
    g = torch.as_tensor(gt).reshape(-1).long()
    if p.shape != g.shape:
        raise EvalError("pred/gt shape mismatch")
    keep = g != cm.ignore_value
    p, g = p[keep], g[keep]
    k = cm.num_classes
    if len(g) and (int(g.min()) < 0 or int(g.max()) >= k):
        raise EvalError("ground-truth class out of range")
    if len(p) and (int(p.min()) < 0 or int(p.max()) >= k):
        raise EvalError("predicted class out of range")
    idx = (g * k + p).numpy()
    cm.data += np.bincount(idx, minlength=k * k).reshape(k, k)
    return cm


def miou(cm: ConfusionMatrix) -> Tuple[List[float], float]:
    """Per-class IoU = diag / (row + col - diag). Classes with zero
    union come back NaN and are excluded from the mean."""

    diag = np.diag(cm.data).astype(np.float64)
    rows = cm.data.sum(axis=1).astype(np.float64)
    cols = cm.data.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / union, np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return [float(v) for v in iou], mean


def _round_up(x: int, mult: int) -> int:
    return ((x + mult - 1) // mult) * mult


def sliding_window_predict(
    model: torch.nn.Module,
    image: torch.Tensor,
    window: int,
    stride: Optional[int] = None,
) -> torch.Tensor:
    """Overlapping-window logits averaged per pixel by coverage count.

    The image is first bilinearly resized so both dims are multiples of
    the encoder granularity (and at least one window); the averaged
    logits are resized back. Edge windows align to the boundary, so
    every pixel is covered at least once. Default stride = 2/3 window.
    """

    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    gran = getattr(getattr(model, "encoder", model), "granularity", 1)
    window = _round_up(window, gran)
    if stride is None:
        stride = max(1, int(round(window * 2 / 3)))
    if stride > window:
        raise EvalError("stride must not exceed window")

    b, _, h0, w0 = image.shape
    h = max(_round_up(h0, gran), window)
    w = max(_round_up(w0, gran), window)
    x = image if (h, w) == (h0, w0) else F.interpolate(
        image, size=(h, w), mode="bilinear", align_corners=False)

    def starts(extent: int) -> List[int]:
        s = list(range(0, extent - window + 1, stride))
        if s[-1] != extent - window:
            s.append(extent - window)
        return s

    logits_sum = None
    count = torch.zeros(1, 1, h, w)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for top in starts(h):
            for left in starts(w):
                tile = x[:, :, top:top + window, left:left + window]
                out = model(tile)
                if logits_sum is None:
                    logits_sum = torch.zeros(b, out.shape[1], h, w)
                logits_sum[:, :, top:top + window, left:left + window] += out
                count[:, :, top:top + window, left:left + window] += 1
    if was_training:
        model.train()
    logits = logits_sum / count
    if (h, w) != (h0, w0):
        logits = F.interpolate(logits, size=(h0, w0), mode="bilinear",
                               align_corners=False)
    return logits[0] if squeeze else logits


@dataclass(frozen=True)
class EvalReport:
    per_class: Tuple[float, ...]
    mean: float

    def table(self) -> str:
        lines = ["class  IoU", "-----  ------"]
        for k, v in enumerate(self.per_class):
            lines.append(f"{k:>5}  {'n/a' if np.isnan(v) else f'{v:.4f}'}")
        lines.append(f" mean  {'n/a' if np.isnan(self.mean) else f'{self.mean:.4f}'}")
        return "\n".join(lines)


def evaluate_dataset(model, ds, ids, window: Optional[int] = None,
                     stride: Optional[int] = None) -> EvalReport:
    """mIoU of a model over the given sample IDs, whole-image by default
    (window = image size)."""

    cm = ConfusionMatrix(ds.num_classes, ds.ignore_value)
    for sid in ids:
        img, gt = ds.get(sid)
        win = window if window is not None else max(img.shape[-2:])
        logits = sliding_window_predict(model, img, win, stride)
        accumulate(cm, logits.argmax(dim=0), gt)
    per_class, mean = miou(cm)
    return EvalReport(per_class=tuple(per_class), mean=mean)
