"""Training-step semantics shared across methods and the per-method
stream layouts (single strong stream, dual independent streams, fused
dual streams with complementary channel masks)."""

import copy

import numpy as np
import pytest
import torch

from semimatch.datamodel import ConfigError, TrainConfig
from semimatch.frameworks import (LabeledBatch, UnlabeledBatch,
                                  fixmatch_step, labeled_only_step, run_step,
                                  unimatch_v1_step, unimatch_v2_step,
                                  variant_step)
from semimatch.model import build_seg_model
from semimatch.perturb import sample_complementary_masks
from semimatch.teacher import init_teacher

UNSUP_FRAMEWORKS = ("fixmatch", "unimatch_v1", "unimatch_v2",
                    "variant_a", "variant_b", "variant_c")


def small_cfg(**kw):
    cfg = TrainConfig(crop_size=32, batch_labeled=2, batch_unlabeled=4)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def identity_cfg(**kw):
    """No photometric jitter, no CutMix: the strong view equals the weak
    view, so stream equalities become exact."""
    cfg = small_cfg(**kw)
    cfg.augment.jitter_p = 0.0
    cfg.augment.gray_p = 0.0
    cfg.augment.blur_p = 0.0
    cfg.augment.cutmix_p = 0.0
    return cfg


def make_batches(seed=0, b_l=2, b_u=4, size=32, k=3, all_ignored=False):
    g = torch.Generator().manual_seed(seed)
    batch_l = LabeledBatch(
        images=torch.rand(b_l, 3, size, size, generator=g),
        labels=torch.randint(0, k, (b_l, size, size), generator=g),
    )
    ignore = torch.full((b_u, size, size), all_ignored, dtype=torch.bool)
    batch_u = UnlabeledBatch(
        images_w=torch.rand(b_u, 3, size, size, generator=g), ignore=ignore)
    return batch_l, batch_u


def make_model(seed=7, k=3):
    torch.manual_seed(seed)
    return build_seg_model(TrainConfig().model, k)


class TestSharedSemantics:
    @pytest.mark.parametrize("framework", UNSUP_FRAMEWORKS)
    def test_confidence_saturation_zeroes_unsup(self, framework):
        # threshold above any reachable confidence -> every pixel filtered
        cfg = small_cfg(framework=framework, tau=2.0)
        model = make_model()
        teacher = init_teacher(model, cfg.ema_cap)
        batch_l, batch_u = make_batches()
        out = run_step(framework, batch_l, batch_u, model, teacher, cfg,
                       np.random.default_rng(0))
        assert out.breakdown.unsupervised == 0.0
        assert out.breakdown.kept_fraction == 0.0
        assert out.breakdown.total == pytest.approx(out.breakdown.supervised)

    @pytest.mark.parametrize("framework", ["fixmatch", "unimatch_v2"])
    def test_lambda_zero_matches_labeled_only_grads(self, framework):
        cfg = small_cfg(framework=framework, lambda_u=0.0, tau=0.0)
        batch_l, batch_u = make_batches()
        model_a = make_model()
        model_b = copy.deepcopy(model_a)
        teacher = init_teacher(model_b, cfg.ema_cap)

        labeled_only_step(batch_l, model_a, cfg).loss.backward()
        run_step(framework, batch_l, batch_u, model_b, teacher, cfg,
                 np.random.default_rng(3)).loss.backward()

        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            ga = torch.zeros_like(pa) if pa.grad is None else pa.grad
            gb = torch.zeros_like(pb) if pb.grad is None else pb.grad
            assert float((ga - gb).abs().max()) <= 1e-7

    def test_all_ignored_batch_reduces_to_supervised(self):
        for framework in ("fixmatch", "unimatch_v2"):
            cfg = small_cfg(framework=framework, tau=0.0)
            model = make_model()
            batch_l, batch_u = make_batches(all_ignored=True)
            out = run_step(framework, batch_l, batch_u, model,
                           init_teacher(model, cfg.ema_cap), cfg,
                           np.random.default_rng(0))
            assert out.breakdown.unsupervised == 0.0
            assert out.breakdown.kept_fraction == 0.0

    def test_tau_zero_keeps_everything(self):
        cfg = identity_cfg(framework="fixmatch", tau=0.0)
        model = make_model()
        batch_l, batch_u = make_batches()
        out = fixmatch_step(batch_l, batch_u, model,
                            init_teacher(model, cfg.ema_cap), cfg,
                            np.random.default_rng(0))
        assert out.breakdown.kept_fraction == 1.0

    def test_teacher_is_isolated_from_backward(self):
        cfg = small_cfg(framework="fixmatch", tau=0.0)
        model = make_model()
        teacher = init_teacher(model, cfg.ema_cap)
        before = [p.clone() for p in teacher.model.parameters()]
        batch_l, batch_u = make_batches()
        out = fixmatch_step(batch_l, batch_u, model, teacher, cfg,
                            np.random.default_rng(0))
        out.loss.backward()
        assert all(p.grad is None for p in teacher.model.parameters())
        for p, b in zip(teacher.model.parameters(), before):
            assert torch.equal(p, b)

    def test_agreement_is_one_for_fresh_teacher(self):
        # teacher == student copy, both predict the same weak view
        cfg = small_cfg(framework="fixmatch", tau=0.0)
        model = make_model()
        out = fixmatch_step(*make_batches(), model,
                            init_teacher(model, cfg.ema_cap), cfg,
                            np.random.default_rng(0))
        assert out.diagnostics["agreement"] == 1.0

    def test_student_as_predictor_needs_no_teacher(self):
        cfg = small_cfg(framework="fixmatch", tau=0.0)
        cfg.teacher.use_student = True
        out = fixmatch_step(*make_batches(), make_model(), None, cfg,
                            np.random.default_rng(0))
        assert out.breakdown.total > 0

    def test_model_mode_restored(self):
        cfg = small_cfg(framework="unimatch_v2", tau=0.0)
        model = make_model().train()
        run_step("unimatch_v2", *make_batches(), model,
                 init_teacher(model, cfg.ema_cap), cfg, np.random.default_rng(0))
        assert model.training

    def test_step_determinism(self):
        cfg = small_cfg(framework="unimatch_v2", tau=0.0)
        outs = []
        for _ in range(2):
            model = make_model()
            out = unimatch_v2_step(*make_batches(), model,
                                   init_teacher(model, cfg.ema_cap), cfg,
                                   np.random.default_rng(11))
            outs.append(out)
        assert torch.equal(outs[0].loss, outs[1].loss)
        assert outs[0].diagnostics == outs[1].diagnostics


class TestStreamLayouts:
    def test_v1_stream_weights(self):
        cfg = small_cfg(framework="unimatch_v1", tau=0.0)
        model = make_model()
        out = unimatch_v1_step(*make_batches(), model,
                               init_teacher(model, cfg.ema_cap), cfg,
                               np.random.default_rng(5))
        d = out.diagnostics
        expect = 0.5 * d["loss_f"] + 0.25 * d["loss_s1"] + 0.25 * d["loss_s2"]
        assert out.breakdown.unsupervised == pytest.approx(expect, abs=1e-5)

    def test_v2_stream_mean(self):
        cfg = small_cfg(framework="unimatch_v2", tau=0.0)
        model = make_model()
        out = unimatch_v2_step(*make_batches(), model,
                               init_teacher(model, cfg.ema_cap), cfg,
                               np.random.default_rng(5))
        d = out.diagnostics
        assert out.breakdown.unsupervised == pytest.approx(
            0.5 * (d["loss_sf1"] + d["loss_sf2"]), abs=1e-5)

    def _level_channels(self, model, batch_u):
        with torch.no_grad():
            feats = model.encode(batch_u.images_w)
        return [f.shape[1] for f in feats]

    def test_variant_c_with_complementary_draw_matches_v2(self):
        """Independent per-stream masks that happen to be exact
        complements reproduce the fused complementary formulation."""
        cfg = identity_cfg(tau=0.0)
        model = make_model()
        teacher = init_teacher(model, cfg.ema_cap)
        batch_l, batch_u = make_batches()
        b = batch_u.images_w.shape[0]
        rng = np.random.default_rng(2)
        pairs = [sample_complementary_masks(b, c, rng)
                 for c in self._level_channels(model, batch_u)]

        out_v2 = unimatch_v2_step(batch_l, batch_u, model, teacher, cfg,
                                  np.random.default_rng(0), masks=pairs)
        out_c = variant_step("c", batch_l, batch_u, model, teacher, cfg,
                             np.random.default_rng(0),
                             masks=([m for m, _ in pairs],
                                    [mc for _, mc in pairs]))
        assert torch.allclose(out_v2.loss, out_c.loss, atol=1e-6)
        assert out_v2.breakdown.unsupervised == pytest.approx(
            out_c.breakdown.unsupervised, abs=1e-6)

    def test_v2_mask_swap_symmetry(self):
        # swapping (M, 1-M) only exchanges the two streams; with identical
        # strong views the unsupervised term is unchanged
        cfg = identity_cfg(tau=0.0)
        model = make_model()
        teacher = init_teacher(model, cfg.ema_cap)
        batch_l, batch_u = make_batches()
        b = batch_u.images_w.shape[0]
        rng = np.random.default_rng(2)
        pairs = [sample_complementary_masks(b, c, rng)
                 for c in self._level_channels(model, batch_u)]
        swapped = [(mc, m) for m, mc in pairs]

        u1 = unimatch_v2_step(batch_l, batch_u, model, teacher, cfg,
                              np.random.default_rng(0), masks=pairs)
        u2 = unimatch_v2_step(batch_l, batch_u, model, teacher, cfg,
                              np.random.default_rng(0), masks=swapped)
        assert u1.breakdown.unsupervised == pytest.approx(
            u2.breakdown.unsupervised, abs=1e-6)

    def test_v2_grads_reach_both_groups(self):
        cfg = small_cfg(framework="unimatch_v2", tau=0.0)
        model = make_model()
        out = unimatch_v2_step(*make_batches(), model,
                               init_teacher(model, cfg.ema_cap), cfg,
                               np.random.default_rng(0))
        out.loss.backward()
        enc = sum(float(p.grad.abs().sum()) for p in model.encoder.parameters())
        dec = sum(float(p.grad.abs().sum()) for p in model.decoder.parameters())
        assert enc > 0 and dec > 0

    @pytest.mark.parametrize("position", ["encoder_decoder", "decoder_classifier"])
    def test_dropout_positions_run(self, position):
        for framework in ("unimatch_v1", "unimatch_v2", "variant_a", "variant_c"):
            cfg = small_cfg(framework=framework, tau=0.0)
            cfg.perturb.position = position
            model = make_model()
            out = run_step(framework, *make_batches(), model,
                           init_teacher(model, cfg.ema_cap), cfg,
                           np.random.default_rng(0))
            assert out.breakdown.unsupervised > 0

    def test_variant_b_is_pure_image_dual(self):
        # no feature perturbation: with identity augmentation both streams
        # see the same input, so their diagnostics coincide exactly
        cfg = identity_cfg(tau=0.0)
        model = make_model()
        out = variant_step("b", *make_batches(), model,
                           init_teacher(model, cfg.ema_cap), cfg,
                           np.random.default_rng(0))
        assert out.diagnostics["loss_s1"] == pytest.approx(
            out.diagnostics["loss_s2"], abs=1e-6)


class TestDispatch:
    def test_unknown_framework(self):
        cfg = small_cfg()
        with pytest.raises(ConfigError, match="unknown framework"):
            run_step("mystery", *make_batches(), make_model(), None, cfg,
                     np.random.default_rng(0))

    def test_unsup_framework_requires_unlabeled(self):
        cfg = small_cfg(framework="fixmatch")
        batch_l, _ = make_batches()
        with pytest.raises(ConfigError, match="unlabeled"):
            run_step("fixmatch", batch_l, None, make_model(), None, cfg,
                     np.random.default_rng(0))

    def test_labeled_only_ignores_unlabeled(self):
        cfg = small_cfg(framework="labeled_only")
        batch_l, _ = make_batches()
        out = run_step("labeled_only", batch_l, None, make_model(), None, cfg,
                       np.random.default_rng(0))
        assert out.breakdown.unsupervised == 0.0

    def test_variant_kind_validation(self):
        cfg = small_cfg()
        with pytest.raises(ConfigError, match="variant"):
            variant_step("z", *make_batches(), make_model(), None, cfg,
                         np.random.default_rng(0))

    def test_variant_dispatch_via_prefix(self):
        cfg = small_cfg(framework="variant_b", tau=0.0)
        model = make_model()
        out = run_step("variant_b", *make_batches(), model,
                       init_teacher(model, cfg.ema_cap), cfg,
                       np.random.default_rng(0))
        assert "loss_s1" in out.diagnostics
