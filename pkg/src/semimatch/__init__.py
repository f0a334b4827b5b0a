"""Weak-to-strong consistency training for semi-supervised semantic
segmentation, at desk scale.

A small labeled set plus a larger unlabeled pool; a teacher labels
weakly-augmented views, a student learns them on strongly-perturbed
views. Ships the single-stream baseline, the triple-stream variant, and
the dual-stream form with complementary channel dropout, plus a toy
synthetic benchmark where all of it runs on a CPU in minutes.
"""

from .datamodel import (
    IGNORE_VALUE,
    AugmentConfig,
    ConfigError,
    LossConfig,
    ModelConfig,
    PerturbConfig,
    SplitManifest,
    TeacherConfig,
    TrainConfig,
    apply_overrides,
    validate_config,
)
from .data import DatasetHandle, DiskSpec, SyntheticSpec, generate_synthetic, \
    load_dataset, make_split
from .augment import AugRecord, CutMixRecord, apply_cutmix_to_targets, \
    cutmix_batch, replay_cutmix, replay_weak, strong_photometric, weak_augment
from .perturb import ChannelMask, apply_complementary_dropout, channel_dropout, \
    sample_complementary_masks
from .teacher import EmaState, PseudoLabel, ema_update, gamma_schedule, \
    init_teacher, make_pseudo_labels
from .loss import LossBreakdown, masked_unsup_loss, ohem_supervised_loss, \
    supervised_loss, total_loss, v1_unlabeled_loss, v2_unlabeled_loss
from .model import SegModel, ToyNetSpec, build_seg_model, build_toy_model, \
    parameter_groups, set_frozen
from .frameworks import LabeledBatch, StepOutput, UnlabeledBatch, run_step
from .engine import RunArtifacts, poly_lr, seed_everything, train
from .eval import ConfusionMatrix, accumulate, evaluate_dataset, miou, \
    sliding_window_predict

__version__ = "0.1.0"
