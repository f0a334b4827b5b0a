"""Pseudo-label production and the EMA teacher.

The teacher is a shadow copy of the student whose parameters track an
exponential moving average with a warmup schedule: early on it follows
the student almost exactly, then settles at the cap. It predicts on
weak views only, in eval mode, and never receives gradients.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .datamodel import check_logits


class TeacherError(RuntimeError):
    """Raised on structural mismatch or invalid inputs."""


@dataclass(frozen=True)
class PseudoLabel:
    hard_labels: torch.Tensor  # (B,H,W) long
    confidence: torch.Tensor   # (B,H,W) float in [0,1]
    valid: torch.Tensor        # (B,H,W) bool, confidence >= tau

    def __post_init__(self):
        for t in (self.hard_labels, self.confidence, self.valid):
            if t.requires_grad:
                raise TeacherError("pseudo-label fields must be detached")
        if not (self.hard_labels.shape == self.confidence.shape == self.valid.shape):
            raise TeacherError("pseudo-label field shapes must agree")


def make_pseudo_labels(logits_w: torch.Tensor, tau: float) -> PseudoLabel:
    """Hard argmax labels plus max-softmax confidence, thresholded at
    tau. tau above 1 marks every pixel invalid (used to switch the
    unlabeled term off)."""

    check_logits(logits_w)
    if not torch.isfinite(logits_w).all():
        raise TeacherError("non-finite logits")
    with torch.no_grad():
        probs = torch.softmax(logits_w.detach(), dim=1)
        confidence, hard = probs.max(dim=1)
        valid = confidence >= tau
    return PseudoLabel(hard_labels=hard.long(), confidence=confidence, valid=valid)


@dataclass
class EmaState:
    model: torch.nn.Module
    iteration: int = 0
    cap: float = 0.996


def gamma_schedule(iteration: int, cap: float = 0.996) -> float:
    """min(1 - 1/(iter+1), cap): 0 at the first update, then rising to
    the cap and staying there."""
    return min(1.0 - 1.0 / (iteration + 1), cap)


def init_teacher(student: torch.nn.Module, cap: float = 0.996) -> EmaState:
    """Deep-copied snapshot; subsequent student updates do not leak in
    except through ema_update."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return EmaState(model=teacher, iteration=0, cap=cap)


def ema_update(state: EmaState, student: torch.nn.Module) -> EmaState:
    """theta_t <- gamma * theta_t + (1 - gamma) * theta_s, entrywise,
    with gamma from the warmup schedule; buffers (running statistics)
    are copied outright. Increments the iteration counter."""

    g = gamma_schedule(state.iteration, state.cap)
    t_params = dict(state.model.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise TeacherError("teacher/student parameter trees differ")
    with torch.no_grad():
        for name, p_t in t_params.items():
            p_s = s_params[name]
            if p_t.shape != p_s.shape:
                raise TeacherError(f"shape mismatch at {name}")
            p_t.mul_(g).add_(p_s.detach(), alpha=1.0 - g)
        t_bufs = dict(state.model.named_buffers())
        for name, b_s in student.named_buffers():
            t_bufs[name].copy_(b_s)
    state.iteration += 1
    return state
