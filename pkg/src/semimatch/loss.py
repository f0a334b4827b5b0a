"""Loss formulations: supervised CE, confidence-masked unlabeled CE,
the triple-stream and dual-stream combinations, and OHEM.

Convention for the unlabeled term: invalid (below-threshold) pixels
contribute zero to the numerator but still count in the denominator,
so the loss scale tracks the kept fraction. The alternative
(divide by kept count only) is selectable via ``denominator="valid"``.
Ignore pixels are excluded from numerator and denominator everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from .teacher import PseudoLabel

_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    unsupervised: float
    total: float
    kept_fraction: float
    lambda_u: float = 1.0

    def __post_init__(self):
        if abs(self.total - (self.supervised + self.lambda_u * self.unsupervised)) > 1e-5:
            raise ValueError("total must equal supervised + lambda * unsupervised")
        if not (0.0 <= self.kept_fraction <= 1.0):
            raise ValueError("kept_fraction must lie in [0,1]")


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor,
                    ignore_value: int = 255) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignore pixels; 0 if none."""
    keep = labels != ignore_value
    n = int(keep.sum())
    if n == 0:
        return logits.sum() * 0.0
    safe = labels.clone()
    safe[~keep] = 0
    ce = F.cross_entropy(logits, safe, reduction="none")
    return (ce * keep.float()).sum() / n


def masked_unsup_loss(
    logits: torch.Tensor,
    pl: PseudoLabel,
    ignore: Optional[torch.Tensor] = None,
    denominator: str = "all",
) -> Tuple[torch.Tensor, float]:
    """Per-pixel CE against hard pseudo-labels, gated by the validity
    mask. ``ignore`` (optional bool (B,H,W), True = excluded) marks
    pixels with no defined target, e.g. padding introduced by the weak
    geometry. Returns (loss, kept_fraction)."""

    if logits.shape[0] != pl.hard_labels.shape[0] or \
            logits.shape[-2:] != pl.hard_labels.shape[-2:]:
        raise ValueError("logits and pseudo-labels are shape-mismatched")
    counted = torch.ones_like(pl.valid) if ignore is None else ~ignore
    valid = pl.valid & counted
    n_counted = int(counted.sum())
    if n_counted == 0:
        return logits.sum() * 0.0, 0.0
    kept_fraction = float(valid.sum()) / n_counted
    ce = F.cross_entropy(logits, pl.hard_labels, reduction="none")
    denom = n_counted if denominator == "all" else max(int(valid.sum()), 1)
    if denominator not in ("all", "valid"):
        raise ValueError(f"unknown denominator convention {denominator!r}")
    return (ce * valid.float()).sum() / denom, kept_fraction


def v1_unlabeled_loss(
    p_f: torch.Tensor,
    p_s1: torch.Tensor,
    p_s2: torch.Tensor,
    pl: PseudoLabel,
    ignore: Optional[torch.Tensor] = None,
    *,
    pl_s1: Optional[PseudoLabel] = None,
    pl_s2: Optional[PseudoLabel] = None,
    ignore_s1: Optional[torch.Tensor] = None,
    ignore_s2: Optional[torch.Tensor] = None,
    denominator: str = "all",
) -> torch.Tensor:
    """Feature stream at weight 1/2, the two image streams at 1/4 each.

    The image streams may carry their own (differently mixed) targets;
    by default all three share ``pl``. Weights sum to 1, so identical
    streams reduce to a single masked loss."""

    l_f, _ = masked_unsup_loss(p_f, pl, ignore, denominator)
    l_s1, _ = masked_unsup_loss(
        p_s1, pl_s1 if pl_s1 is not None else pl,
        ignore_s1 if ignore_s1 is not None else ignore, denominator)
    l_s2, _ = masked_unsup_loss(
        p_s2, pl_s2 if pl_s2 is not None else pl,
        ignore_s2 if ignore_s2 is not None else ignore, denominator)
    return 0.5 * l_f + 0.25 * l_s1 + 0.25 * l_s2


def v2_unlabeled_loss(
    p_sf1: torch.Tensor,
    p_sf2: torch.Tensor,
    pl: PseudoLabel,
    ignore: Optional[torch.Tensor] = None,
    denominator: str = "all",
) -> torch.Tensor:
    """Mean of the two unified-stream losses against the SAME target."""
    l1, _ = masked_unsup_loss(p_sf1, pl, ignore, denominator)
    l2, _ = masked_unsup_loss(p_sf2, pl, ignore, denominator)
    return 0.5 * (l1 + l2)


def total_loss(loss_l: torch.Tensor, loss_u: torch.Tensor,
               lambda_u: float) -> torch.Tensor:
    if lambda_u < 0:
        raise ValueError("lambda_u must be >= 0")
    return loss_l + lambda_u * loss_u


def ohem_supervised_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    conf_thresh: float = 0.7,
    min_kept_fraction: float = 1.0 / 16.0,
    ignore_value: int = 255,
) -> torch.Tensor:
    """CE averaged over the hard pixels only: true-class probability
    below conf_thresh, topped up to at least min_kept_fraction of the
    valid pixels in highest-loss order."""

    if not (0 < conf_thresh <= 1) or not (0 < min_kept_fraction <= 1):
        raise ValueError("thresholds must lie in (0,1]")
    keep = labels != ignore_value
    n_valid = int(keep.sum())
    if n_valid == 0:
        return logits.sum() * 0.0
    safe = labels.clone()
    safe[~keep] = 0
    ce = F.cross_entropy(logits, safe, reduction="none")
    with torch.no_grad():
        probs = torch.softmax(logits, dim=1)
        p_true = probs.gather(1, safe.unsqueeze(1)).squeeze(1)
        hard = (p_true < conf_thresh) & keep
        min_kept = max(1, int(torch.ceil(torch.tensor(min_kept_fraction * n_valid)).item()))
        if int(hard.sum()) < min_kept:
            flat_ce = ce.masked_fill(~keep, float("-inf")).flatten()
            top_idx = flat_ce.topk(min_kept).indices
            hard = torch.zeros_like(hard).flatten()
            hard[top_idx] = True
            hard = hard.reshape(keep.shape)
    return (ce * hard.float()).sum() / int(hard.sum())
