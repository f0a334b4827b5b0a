"""Training engine: batch composition, split learning rates with poly
decay, the optimizer contract, metrics logging, checkpoints, seeding.

Determinism contract: with ``deterministic=true`` every random draw
comes from named numpy streams derived from the config seed, data
loading stays in-thread, and the metrics log contains no wall-clock
values — two identical runs produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import weak_augment
from .data import DatasetHandle
from .datamodel import IGNORE_VALUE, SplitManifest, TrainConfig, validate_config
from .eval import EvalReport, evaluate_dataset
from .frameworks import LabeledBatch, UnlabeledBatch, run_step
from .model import SegModel, build_seg_model, parameter_groups, set_frozen
from .teacher import EmaState, ema_update, init_teacher

RUN_ROOT_ENV = "SEMIMATCH_RUNS"


class EngineError(RuntimeError):
    pass


class NanAbort(EngineError):
    """Training hit a non-finite loss; diagnostics were dumped."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class Schedule:
    base_lrs: Dict[str, float]
    power: float
    total: int

    def __post_init__(self):
        if self.power <= 0 or self.total <= 0:
            raise EngineError("schedule needs power > 0 and total > 0")

    def at(self, iteration: int) -> Dict[str, float]:
        return {k: poly_lr(v, iteration, self.total, self.power)
                for k, v in self.base_lrs.items()}


def poly_lr(base: float, iteration: int, total: int, power: float = 0.9) -> float:
    """base * (1 - iter/total) ** power; base at 0, zero at total."""
    if not (0 <= iteration <= total):
        raise EngineError(f"iteration {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------

_ACTIVE_RUN = False


def seed_everything(seed: int) -> None:
    """Seed the global torch/numpy/stdlib generators (parameter init
    draws from torch's). Named per-purpose streams come from derive_rng.
    Rejected while a training run is active."""

    if _ACTIVE_RUN:
        raise EngineError("re-seeding during an active run is not allowed")
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent stream per (seed, purpose): labeled and unlabeled
    pipelines never share draws, so disabling one cannot shift the
    other."""
    return np.random.default_rng([seed, zlib.crc32(purpose.encode())])


# --------------------------------------------------------------------------
# Batch composition
# --------------------------------------------------------------------------

def compose_labeled(ds: DatasetHandle, ids: Sequence[str],
                    idxs: Sequence[int], crop: int,
                    rng: np.random.Generator, cfg: TrainConfig,
                    pad_value: torch.Tensor) -> LabeledBatch:
    imgs, labels = [], []
    for i in idxs:
        img, m = ds.get(ids[i])
        im, mm, _ = weak_augment(img, m, crop, rng, cfg.augment, pad_value)
        imgs.append(im)
        labels.append(mm)
    return LabeledBatch(torch.stack(imgs), torch.stack(labels))


def compose_unlabeled(ds: DatasetHandle, ids: Sequence[str],
                      idxs: Sequence[int], crop: int,
                      rng: np.random.Generator, cfg: TrainConfig,
                      pad_value: torch.Tensor) -> UnlabeledBatch:
    # a zeros mask through the weak geometry marks padded pixels as
    # ignore — that is exactly the unlabeled validity map
    imgs, ign = [], []
    for i in idxs:
        img, _ = ds.get(ids[i])
        zeros = torch.zeros(img.shape[-2:], dtype=torch.long)
        im, mm, _ = weak_augment(img, zeros, crop, rng, cfg.augment, pad_value)
        imgs.append(im)
        ign.append(mm == IGNORE_VALUE)
    return UnlabeledBatch(torch.stack(imgs), torch.stack(ign))


# --------------------------------------------------------------------------
# Run artifacts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunArtifacts:
    run_dir: str
    metrics_path: str
    ckpt_last: str
    ckpt_best: str
    config_hash: str
    final_student_miou: float
    final_teacher_miou: float
    best_teacher_miou: float


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def save_checkpoint(path: Path, model: SegModel, teacher: EmaState,
                    cfg: TrainConfig, num_classes: int) -> None:
    torch.save({
        "schema": 1,
        "student": model.state_dict(),
        "teacher": teacher.model.state_dict(),
        "iteration": teacher.iteration,
        "config": cfg.to_dict(),
        "num_classes": num_classes,
    }, path)


def load_checkpoint(path) -> Tuple[SegModel, SegModel, dict]:
    """Returns (student, teacher, meta). Models are rebuilt from the
    stored config and ready for eval."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = TrainConfig.from_dict(blob["config"])
    student = build_seg_model(cfg.model, blob["num_classes"])
    student.load_state_dict(blob["student"])
    teacher = build_seg_model(cfg.model, blob["num_classes"])
    teacher.load_state_dict(blob["teacher"])
    student.eval()
    teacher.eval()
    return student, teacher, blob


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def resolve_run_dir(cfg: TrainConfig, out_dir=None, run_root=None) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    root = Path(run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{cfg.framework}-{config_hash(cfg)}-s{cfg.seed}"


def train(cfg: TrainConfig, manifest: SplitManifest, ds: DatasetHandle,
          eval_ds: Optional[DatasetHandle] = None,
          out_dir=None, run_root=None,
          progress: bool = False) -> RunArtifacts:
    """Run the selected framework over the split.

    One epoch = one shuffled pass over the unlabeled set (labeled
    batches are drawn with replacement); labeled_only uses the same step
    count so runs stay comparable. Evaluation happens every
    ``eval_every`` epochs and at the end, on ``eval_ds`` (falling back
    to the labeled training images as a smoke value).
    """

    global _ACTIVE_RUN
    violations = validate_config(cfg)
    if violations:
        raise EngineError("invalid config: " + "; ".join(violations))
    if set(manifest.labeled_ids) - set(ds.ids) or \
            set(manifest.unlabeled_ids) - set(ds.ids):
        raise EngineError("manifest references ids missing from the dataset")

    run_dir = resolve_run_dir(cfg, out_dir, run_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    ckpt_last = run_dir / "ckpt_last.pt"
    ckpt_best = run_dir / "ckpt_best.pt"
    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")

    seed_everything(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)

    mean, std = ds.channel_stats()
    model = build_seg_model(cfg.model, ds.num_classes, mean, std)
    if cfg.freeze_encoder:
        set_frozen(model.encoder, True)
    model.train()
    teacher = init_teacher(model, cfg.ema_cap)
    groups = parameter_groups(model.encoder, model.decoder, whole=model)
    enc_lr = cfg.encoder_lr
    dec_lr = cfg.resolved_decoder_lr()
    opt = torch.optim.AdamW(
        [{"params": groups["encoder"], "lr": enc_lr},
         {"params": groups["decoder"], "lr": dec_lr}],
        lr=enc_lr, weight_decay=cfg.weight_decay)

    labeled_ids = list(manifest.labeled_ids)
    unlabeled_ids = list(manifest.unlabeled_ids)
    n_u = len(unlabeled_ids)
    steps_per_epoch = max(1, math.ceil(n_u / cfg.batch_unlabeled))
    total_iters = cfg.epochs * steps_per_epoch
    schedule = Schedule(base_lrs={"encoder": enc_lr, "decoder": dec_lr},
                        power=cfg.lr_power, total=total_iters)

    rng_l_order = derive_rng(cfg.seed, "labeled_order")
    rng_l_aug = derive_rng(cfg.seed, "labeled_aug")
    rng_u_order = derive_rng(cfg.seed, "unlabeled_order")
    rng_u_aug = derive_rng(cfg.seed, "unlabeled_aug")
    rng_step = derive_rng(cfg.seed, "step")
    needs_unlabeled = cfg.framework != "labeled_only"

    eval_handle = eval_ds if eval_ds is not None else ds
    eval_ids = eval_handle.ids if eval_ds is not None else manifest.labeled_ids

    best_teacher = -1.0
    final_student = float("nan")
    final_teacher = float("nan")
    it = 0
    _ACTIVE_RUN = True
    try:
        with open(metrics_path, "w") as log:
            def emit(record: dict) -> None:
                log.write(json.dumps(record, sort_keys=True) + "\n")

            def run_eval(epoch: int) -> EvalReport:
                nonlocal best_teacher, final_student, final_teacher
                s_report = evaluate_dataset(model, eval_handle, eval_ids)
                t_report = evaluate_dataset(teacher.model, eval_handle, eval_ids)
                final_student = s_report.mean
                final_teacher = t_report.mean
                emit({"kind": "eval", "epoch": epoch, "step": it,
                      "student_miou": round(s_report.mean, 6),
                      "teacher_miou": round(t_report.mean, 6),
                      "teacher_per_class": [round(v, 6) for v in t_report.per_class]})
                if t_report.mean > best_teacher:
                    best_teacher = t_report.mean
                    save_checkpoint(ckpt_best, model, teacher, cfg, ds.num_classes)
                if progress:
                    print(f"[epoch {epoch}] student {s_report.mean:.4f} "
                          f"teacher {t_report.mean:.4f}")
                model.train()
                return t_report

            for epoch in range(cfg.epochs):
                order = rng_u_order.permutation(n_u)
                if len(order) < steps_per_epoch * cfg.batch_unlabeled:
                    pad = steps_per_epoch * cfg.batch_unlabeled - len(order)
                    order = np.concatenate([order, order[:pad]])
                for s in range(steps_per_epoch):
                    lrs = schedule.at(it)
                    opt.param_groups[0]["lr"] = lrs["encoder"]
                    opt.param_groups[1]["lr"] = lrs["decoder"]

                    l_idx = rng_l_order.integers(0, len(labeled_ids),
                                                 size=cfg.batch_labeled)
                    batch_l = compose_labeled(ds, labeled_ids, l_idx,
                                              cfg.crop_size, rng_l_aug, cfg, mean)
                    batch_u = None
                    if needs_unlabeled:
                        u_idx = order[s * cfg.batch_unlabeled:
                                      (s + 1) * cfg.batch_unlabeled]
                        batch_u = compose_unlabeled(ds, unlabeled_ids, u_idx,
                                                    cfg.crop_size, rng_u_aug,
                                                    cfg, mean)
                    try:
                        out = run_step(cfg.framework, batch_l, batch_u,
                                       model, teacher, cfg, rng_step)
                        if not math.isfinite(float(out.loss.detach())):
                            raise FloatingPointError("non-finite total loss")
                        opt.zero_grad(set_to_none=True)
                        out.loss.backward()
                        opt.step()
                    except FloatingPointError as exc:
                        dump = run_dir / "nan_dump.json"
                        dump.write_text(json.dumps({
                            "step": it, "epoch": epoch, "error": str(exc),
                            "lrs": lrs}, sort_keys=True, indent=2) + "\n")
                        raise NanAbort(f"aborted at step {it}: {exc}",
                                       str(dump)) from exc
                    ema_update(teacher, model)
                    emit({"kind": "step", "step": it, "epoch": epoch,
                          "lr_encoder": round(lrs["encoder"], 10),
                          "lr_decoder": round(lrs["decoder"], 10),
                          "loss_total": round(out.breakdown.total, 6),
                          "loss_sup": round(out.breakdown.supervised, 6),
                          "loss_unsup": round(out.breakdown.unsupervised, 6),
                          **{k: round(v, 6) for k, v in out.diagnostics.items()}})
                    it += 1
                if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                    run_eval(epoch)
            save_checkpoint(ckpt_last, model, teacher, cfg, ds.num_classes)
    finally:
        _ACTIVE_RUN = False

    return RunArtifacts(
        run_dir=str(run_dir), metrics_path=str(metrics_path),
        ckpt_last=str(ckpt_last), ckpt_best=str(ckpt_best),
        config_hash=config_hash(cfg),
        final_student_miou=final_student,
        final_teacher_miou=final_teacher,
        best_teacher_miou=best_teacher)
