"""Per-method training steps.

Shared dataflow: a frozen-for-the-step predictor (EMA teacher by
default) labels the weak view; confidence gating turns that into hard
targets; the methods differ in which student streams consume them:

  labeled_only  supervised term only
  fixmatch      one strong image stream
  unimatch_v1   feature-dropout stream at 1/2 + two strong image
                streams at 1/4 each, independently mixed
  unimatch_v2   two strong streams through one fused forward with
                complementary channel masks, sharing one mixed target
  variant_a     single strong stream + independent channel dropout
  variant_b     two strong streams, no feature perturbation
  variant_c     as v2 but the two channel masks are independent draws

All step functions are pure given (model, teacher, rng) state; every
random decision comes from the passed numpy generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import augment as aug
from .datamodel import ConfigError, TrainConfig
from .loss import (LossBreakdown, masked_unsup_loss, ohem_supervised_loss,
                   supervised_loss, total_loss, v1_unlabeled_loss,
                   v2_unlabeled_loss)
from .model import SegModel
from .perturb import (ChannelMask, DropoutGuard, apply_complementary_dropout,
                      channel_dropout, position_dispatch, sample_complementary_masks,
                      sample_level_masks)
from .teacher import EmaState, PseudoLabel, make_pseudo_labels


@dataclass(frozen=True)
class LabeledBatch:
    images: torch.Tensor  # (B,3,H,W) in [0,1]
    labels: torch.Tensor  # (B,H,W) long, ignore allowed


@dataclass(frozen=True)
class UnlabeledBatch:
    images_w: torch.Tensor  # weak views, (B,3,H,W) in [0,1]
    ignore: torch.Tensor    # (B,H,W) bool, True = no defined target (padding)


@dataclass(frozen=True)
class StepOutput:
    loss: torch.Tensor  # scalar, graph-attached, for backward
    breakdown: LossBreakdown
    diagnostics: Dict[str, float]

    def __post_init__(self):
        for k, v in self.diagnostics.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite diagnostic {k}={v}")


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------

def _labeled_loss(model: SegModel, batch_l: LabeledBatch,
                  cfg: TrainConfig) -> torch.Tensor:
    logits = model(batch_l.images)
    if cfg.use_ohem:
        return ohem_supervised_loss(logits, batch_l.labels,
                                    cfg.loss.ohem_thresh, cfg.loss.ohem_min_kept)
    return supervised_loss(logits, batch_l.labels)


def _predict_weak(model: SegModel, teacher: Optional[EmaState],
                  batch_u: UnlabeledBatch, cfg: TrainConfig) -> PseudoLabel:
    if cfg.teacher.use_student or teacher is None:
        predictor = model
    else:
        predictor = teacher.model
    was_training = predictor.training
    predictor.eval()
    with torch.no_grad():
        logits_w = predictor(batch_u.images_w)
    if was_training:
        predictor.train()
    return make_pseudo_labels(logits_w, cfg.tau)


def _strong_batch(images: torch.Tensor, rng: np.random.Generator,
                  cfg: TrainConfig) -> torch.Tensor:
    return torch.stack(
        [aug.strong_photometric(img, rng, cfg.augment) for img in images])


def _cutmix(images: torch.Tensor, rng: np.random.Generator,
            cfg: TrainConfig) -> Tuple[torch.Tensor, aug.CutMixRecord]:
    return aug.cutmix_batch(
        images, rng,
        area_range=(cfg.augment.cutmix_area_min, cfg.augment.cutmix_area_max),
        p=cfg.augment.cutmix_p)


def _mix_targets(pl: PseudoLabel, ignore: torch.Tensor,
                 record: aug.CutMixRecord) -> Tuple[PseudoLabel, torch.Tensor]:
    labels_m, conf_m = aug.apply_cutmix_to_targets(
        pl.hard_labels, pl.confidence, record)
    valid_m = aug.replay_cutmix(pl.valid, record)
    ignore_m = aug.replay_cutmix(ignore, record)
    return PseudoLabel(labels_m, conf_m, valid_m), ignore_m


def _kept(pl: PseudoLabel, ignore: torch.Tensor) -> float:
    counted = ~ignore
    n = int(counted.sum())
    return float((pl.valid & counted).sum()) / n if n else 0.0


def _agreement(model: SegModel, batch_u: UnlabeledBatch,
               pl: PseudoLabel) -> float:
    """Student-vs-teacher argmax agreement on the weak view."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pred = model(batch_u.images_w).argmax(dim=1)
    if was_training:
        model.train()
    keep = ~batch_u.ignore
    if int(keep.sum()) == 0:
        return 1.0
    return float((pred[keep] == pl.hard_labels[keep]).float().mean())


def _apply_masks(feats: Sequence[torch.Tensor],
                 masks: Sequence[ChannelMask]) -> List[torch.Tensor]:
    # independent (non-complementary) channel masks, same x2 rescale
    out = []
    for t, m in zip(feats, masks):
        shape = (t.shape[0], t.shape[1], *([1] * (t.dim() - 2)))
        out.append(t * (m.data.reshape(shape) * 2.0))
    return out


def _finite(x: torch.Tensor) -> float:
    v = float(x.detach())
    if not math.isfinite(v):
        raise FloatingPointError(f"non-finite loss component: {v}")
    return v


def _output(loss_l: torch.Tensor, loss_u: torch.Tensor, cfg: TrainConfig,
            kept_fraction: float, diagnostics: Dict[str, float]) -> StepOutput:
    total = total_loss(loss_l, loss_u, cfg.lambda_u)
    breakdown = LossBreakdown(
        supervised=_finite(loss_l),
        unsupervised=_finite(loss_u),
        total=_finite(total),
        kept_fraction=kept_fraction,
        lambda_u=cfg.lambda_u,
    )
    diagnostics = {"kept_fraction": kept_fraction, **diagnostics}
    return StepOutput(loss=total, breakdown=breakdown, diagnostics=diagnostics)


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def labeled_only_step(batch_l: LabeledBatch, model: SegModel,
                      cfg: TrainConfig) -> StepOutput:
    loss_l = _labeled_loss(model, batch_l, cfg)
    zero = loss_l.detach() * 0.0
    return _output(loss_l, zero, cfg, 0.0, {})


def fixmatch_step(batch_l: LabeledBatch, batch_u: UnlabeledBatch,
                  model: SegModel, teacher: Optional[EmaState],
                  cfg: TrainConfig, rng: np.random.Generator) -> StepOutput:
    pl = _predict_weak(model, teacher, batch_u, cfg)
    x_s = _strong_batch(batch_u.images_w, rng, cfg)
    x_s, rec = _cutmix(x_s, rng, cfg)
    pl_m, ignore_m = _mix_targets(pl, batch_u.ignore, rec)

    loss_l = _labeled_loss(model, batch_l, cfg)
    logits_s = model(x_s)
    loss_u, kept = masked_unsup_loss(logits_s, pl_m, ignore_m,
                                     cfg.loss.unsup_denominator)
    diag = {"loss_s": _finite(loss_u), "agreement": _agreement(model, batch_u, pl)}
    return _output(loss_l, loss_u, cfg, kept, diag)


def unimatch_v1_step(batch_l: LabeledBatch, batch_u: UnlabeledBatch,
                     model: SegModel, teacher: Optional[EmaState],
                     cfg: TrainConfig, rng: np.random.Generator) -> StepOutput:
    pl = _predict_weak(model, teacher, batch_u, cfg)
    position = position_dispatch(cfg.perturb.position)
    size = batch_u.images_w.shape[-2:]

    # feature stream: weak image, channel dropout on features
    feats_w = model.encode(batch_u.images_w)
    if position == "encoder_decoder":
        feats_d = channel_dropout(feats_w, cfg.perturb.dropout_p, rng)
        p_f = model.decode(feats_d, size)
    else:
        trunk = model.decoder.trunk(feats_w)
        trunk_d = channel_dropout([trunk], cfg.perturb.dropout_p, rng)[0]
        p_f = model.decoder.classify(trunk_d, size)

    # two image streams, independently augmented AND independently mixed
    x_s1, rec1 = _cutmix(_strong_batch(batch_u.images_w, rng, cfg), rng, cfg)
    x_s2, rec2 = _cutmix(_strong_batch(batch_u.images_w, rng, cfg), rng, cfg)
    pl1, ig1 = _mix_targets(pl, batch_u.ignore, rec1)
    pl2, ig2 = _mix_targets(pl, batch_u.ignore, rec2)

    loss_l = _labeled_loss(model, batch_l, cfg)
    p_s1 = model(x_s1)
    p_s2 = model(x_s2)
    loss_u = v1_unlabeled_loss(
        p_f, p_s1, p_s2, pl, batch_u.ignore,
        pl_s1=pl1, pl_s2=pl2, ignore_s1=ig1, ignore_s2=ig2,
        denominator=cfg.loss.unsup_denominator)

    l_f, _ = masked_unsup_loss(p_f, pl, batch_u.ignore, cfg.loss.unsup_denominator)
    l_s1, k1 = masked_unsup_loss(p_s1, pl1, ig1, cfg.loss.unsup_denominator)
    l_s2, k2 = masked_unsup_loss(p_s2, pl2, ig2, cfg.loss.unsup_denominator)
    kept = (_kept(pl, batch_u.ignore) + k1 + k2) / 3.0
    diag = {
        "loss_f": _finite(l_f), "loss_s1": _finite(l_s1), "loss_s2": _finite(l_s2),
        "agreement": _agreement(model, batch_u, pl),
    }
    return _output(loss_l, loss_u, cfg, kept, diag)


def unimatch_v2_step(batch_l: LabeledBatch, batch_u: UnlabeledBatch,
                     model: SegModel, teacher: Optional[EmaState],
                     cfg: TrainConfig, rng: np.random.Generator,
                     masks: Optional[Sequence[Tuple[ChannelMask, ChannelMask]]] = None,
                     ) -> StepOutput:
    pl = _predict_weak(model, teacher, batch_u, cfg)
    position = position_dispatch(cfg.perturb.position)
    size = batch_u.images_w.shape[-2:]
    b = batch_u.images_w.shape[0]

    # two photometric draws, ONE CutMix record -> one shared target
    x_s1 = _strong_batch(batch_u.images_w, rng, cfg)
    x_s2 = _strong_batch(batch_u.images_w, rng, cfg)
    x_s1, rec = _cutmix(x_s1, rng, cfg)
    x_s2 = aug.replay_cutmix(x_s2, rec)
    pl_m, ignore_m = _mix_targets(pl, batch_u.ignore, rec)

    loss_l = _labeled_loss(model, batch_l, cfg)

    # one fused forward over both streams
    feats = model.encode(torch.cat([x_s1, x_s2], dim=0))
    guard = DropoutGuard()
    if position == "encoder_decoder":
        e1 = [f[:b] for f in feats]
        e2 = [f[b:] for f in feats]
        if masks is None:
            masks = sample_level_masks(e1, rng, exact_half=cfg.perturb.exact_half,
                                       per_level=cfg.perturb.per_level_masks)
        guard.claim()
        d1, d2 = apply_complementary_dropout(e1, e2, masks)
        p_cat = model.decode([torch.cat([a, c]) for a, c in zip(d1, d2)], size)
    else:
        trunk = model.decoder.trunk(feats)
        t1, t2 = trunk[:b], trunk[b:]
        if masks is None:
            masks = sample_level_masks([t1], rng, exact_half=cfg.perturb.exact_half,
                                       per_level=cfg.perturb.per_level_masks)
        guard.claim()
        d1, d2 = apply_complementary_dropout([t1], [t2], masks)
        p_cat = model.decoder.classify(torch.cat([d1[0], d2[0]]), size)
    p_sf1, p_sf2 = p_cat[:b], p_cat[b:]

    # the dual streams must consume identical targets
    target1 = target2 = pl_m
    assert torch.equal(target1.hard_labels, target2.hard_labels)
    loss_u = v2_unlabeled_loss(p_sf1, p_sf2, target1, ignore_m,
                               cfg.loss.unsup_denominator)

    l1, kept = masked_unsup_loss(p_sf1, pl_m, ignore_m, cfg.loss.unsup_denominator)
    l2, _ = masked_unsup_loss(p_sf2, pl_m, ignore_m, cfg.loss.unsup_denominator)
    diag = {
        "loss_sf1": _finite(l1), "loss_sf2": _finite(l2),
        "agreement": _agreement(model, batch_u, pl),
    }
    return _output(loss_l, loss_u, cfg, kept, diag)


def variant_step(kind: str, batch_l: LabeledBatch, batch_u: UnlabeledBatch,
                 model: SegModel, teacher: Optional[EmaState],
                 cfg: TrainConfig, rng: np.random.Generator,
                 masks: Optional[Tuple[Sequence[ChannelMask], Sequence[ChannelMask]]] = None,
                 ) -> StepOutput:
    """Stream-choice ablations around v2. All share its recipe (one
    CutMix record, shared targets, fused forwards where dual)."""

    if kind not in ("a", "b", "c"):
        raise ConfigError(f"unknown variant kind {kind!r}")
    pl = _predict_weak(model, teacher, batch_u, cfg)
    position = position_dispatch(cfg.perturb.position)
    size = batch_u.images_w.shape[-2:]
    b = batch_u.images_w.shape[0]

    x_s1 = _strong_batch(batch_u.images_w, rng, cfg)
    x_s1, rec = _cutmix(x_s1, rng, cfg)
    pl_m, ignore_m = _mix_targets(pl, batch_u.ignore, rec)
    loss_l = _labeled_loss(model, batch_l, cfg)
    denom = cfg.loss.unsup_denominator

    if kind == "a":
        feats = model.encode(x_s1)
        if position == "encoder_decoder":
            feats_d = channel_dropout(feats, cfg.perturb.dropout_p, rng)
            p_sf = model.decode(feats_d, size)
        else:
            trunk = model.decoder.trunk(feats)
            trunk_d = channel_dropout([trunk], cfg.perturb.dropout_p, rng)[0]
            p_sf = model.decoder.classify(trunk_d, size)
        loss_u, kept = masked_unsup_loss(p_sf, pl_m, ignore_m, denom)
        diag = {"loss_sf": _finite(loss_u),
                "agreement": _agreement(model, batch_u, pl)}
        return _output(loss_l, loss_u, cfg, kept, diag)

    x_s2 = aug.replay_cutmix(_strong_batch(batch_u.images_w, rng, cfg), rec)
    x_cat = torch.cat([x_s1, x_s2], dim=0)

    if kind == "b":
        p_cat = model(x_cat)
    else:  # c: independent masks on each stream, still x2-rescaled
        feats = model.encode(x_cat)
        if position == "encoder_decoder":
            e1 = [f[:b] for f in feats]
            e2 = [f[b:] for f in feats]
            if masks is None:
                m1 = [sample_complementary_masks(b, f.shape[1], rng)[0] for f in e1]
                m2 = [sample_complementary_masks(b, f.shape[1], rng)[0] for f in e2]
            else:
                m1, m2 = masks
            d1 = _apply_masks(e1, m1)
            d2 = _apply_masks(e2, m2)
            p_cat = model.decode([torch.cat([a, c]) for a, c in zip(d1, d2)], size)
        else:
            trunk = model.decoder.trunk(feats)
            t1, t2 = trunk[:b], trunk[b:]
            if masks is None:
                m1 = [sample_complementary_masks(b, t1.shape[1], rng)[0]]
                m2 = [sample_complementary_masks(b, t2.shape[1], rng)[0]]
            else:
                m1, m2 = masks
            p_cat = model.decoder.classify(
                torch.cat([_apply_masks([t1], m1)[0], _apply_masks([t2], m2)[0]]), size)

    p1, p2 = p_cat[:b], p_cat[b:]
    loss_u = v2_unlabeled_loss(p1, p2, pl_m, ignore_m, denom)
    l1, kept = masked_unsup_loss(p1, pl_m, ignore_m, denom)
    l2, _ = masked_unsup_loss(p2, pl_m, ignore_m, denom)
    diag = {"loss_s1": _finite(l1), "loss_s2": _finite(l2),
            "agreement": _agreement(model, batch_u, pl)}
    return _output(loss_l, loss_u, cfg, kept, diag)


def run_step(framework: str, batch_l: LabeledBatch,
             batch_u: Optional[UnlabeledBatch], model: SegModel,
             teacher: Optional[EmaState], cfg: TrainConfig,
             rng: np.random.Generator) -> StepOutput:
    """Dispatch on the framework config key."""
    if framework == "labeled_only":
        return labeled_only_step(batch_l, model, cfg)
    if batch_u is None:
        raise ConfigError(f"framework {framework!r} needs unlabeled batches")
    if framework == "fixmatch":
        return fixmatch_step(batch_l, batch_u, model, teacher, cfg, rng)
    if framework == "unimatch_v1":
        return unimatch_v1_step(batch_l, batch_u, model, teacher, cfg, rng)
    if framework == "unimatch_v2":
        return unimatch_v2_step(batch_l, batch_u, model, teacher, cfg, rng)
    if framework.startswith("variant_"):
        return variant_step(framework.split("_", 1)[1], batch_l, batch_u,
                            model, teacher, cfg, rng)
    raise ConfigError(f"unknown framework {framework!r}")
