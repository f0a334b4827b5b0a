"""Weak/strong augmentation, records, replay, CutMix provenance."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from semimatch.augment import (AugmentError, AugRecord, CutMixRecord,
                               apply_cutmix_to_targets, cutmix_batch,
                               replay_cutmix, replay_weak, strong_photometric,
                               weak_augment)
from semimatch.datamodel import IGNORE_VALUE, AugmentConfig


def fixed_cfg(**kw):
    base = dict(scale_min=1.0, scale_max=1.0, hflip_p=0.0,
                jitter_p=0.0, gray_p=0.0, blur_p=0.0)
    base.update(kw)
    return AugmentConfig(**base)


def rand_image(rng, size=32):
    return torch.from_numpy(rng.random((3, size, size)).astype(np.float32))


def rand_mask(rng, size=32, k=3):
    return torch.from_numpy(rng.integers(0, k, (size, size)).astype(np.int64))


class TestWeak:
    def test_identity_when_forced(self, rng):
        img, mask = rand_image(rng), rand_mask(rng)
        out, m_out, rec = weak_augment(img, mask, 32, rng, fixed_cfg())
        assert rec.scale == 1.0 and rec.crop == (0, 0) and not rec.flip
        assert torch.allclose(out, img, atol=1e-6)
        assert torch.equal(m_out, mask)

    def test_replay_on_mask_matches_joint(self, rng):
        img, mask = rand_image(rng), rand_mask(rng)
        _, m_joint, rec = weak_augment(img, mask, 16, rng)
        m_replay = replay_weak(mask, rec, is_mask=True, pad_value=IGNORE_VALUE)
        assert torch.equal(m_joint, m_replay)

    def test_deterministic_under_seed(self, rng_factory):
        img, mask = rand_image(np.random.default_rng(5)), rand_mask(np.random.default_rng(5))
        a = weak_augment(img, mask, 16, rng_factory(7))
        b = weak_augment(img, mask, 16, rng_factory(7))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) and a[2] == b[2]

    def test_padding_marks_ignore_and_uses_pad_value(self, rng):
        img = rand_image(rng, 32)
        mask = torch.zeros(32, 32, dtype=torch.long)
        cfg = fixed_cfg(scale_min=0.5, scale_max=0.5)
        pad = torch.tensor([0.1, 0.2, 0.3])
        out, m_out, rec = weak_augment(img, mask, 32, rng, cfg, pad_value=pad)
        # resized to 16x16, padded right/bottom to 32
        assert (m_out[16:, :] == IGNORE_VALUE).all()
        assert (m_out[:, 16:] == IGNORE_VALUE).all()
        region = out[:, 20:, 20:]
        for c in range(3):
            assert torch.allclose(region[c], torch.full_like(region[c], float(pad[c])))

    def test_scale_within_range_and_crop_inside(self, rng):
        img, mask = rand_image(rng, 48), rand_mask(rng, 48)
        for _ in range(25):
            _, _, rec = weak_augment(img, mask, 16, rng)
            assert 0.5 <= rec.scale <= 2.0
            nh = round(48 * rec.scale)
            avail = max(nh, 16)
            assert 0 <= rec.crop[0] <= avail - 16

    def test_no_new_classes(self, rng):
        img = rand_image(rng, 32)
        mask = rand_mask(rng, 32, k=2)  # only classes {0,1}
        for _ in range(10):
            _, m_out, _ = weak_augment(img, mask, 24, rng)
            classes = set(int(v) for v in torch.unique(m_out))
            assert classes <= {0, 1, IGNORE_VALUE}

    def test_flip_is_replayed(self, rng):
        img, mask = rand_image(rng), rand_mask(rng)
        rec = AugRecord(scale=1.0, crop=(0, 0), flip=True, crop_size=32)
        out = replay_weak(img, rec, is_mask=False, pad_value=0.0)
        assert torch.allclose(out, torch.flip(img, dims=[-1]), atol=1e-6)

    def test_corrupt_record_rejected(self, rng):
        img = rand_image(rng)
        rec = AugRecord(scale=1.0, crop=(10, 0), flip=False, crop_size=32)
        with pytest.raises(AugmentError):
            replay_weak(img, rec, is_mask=False, pad_value=0.0)


class TestStrongPhotometric:
    def test_all_probs_zero_is_identity(self, rng):
        img = rand_image(rng)
        out = strong_photometric(img, rng, fixed_cfg())
        assert torch.equal(out, img)

    def test_shape_preserved_and_clamped(self, rng):
        img = rand_image(rng)
        cfg = AugmentConfig(jitter_p=1.0, gray_p=1.0, blur_p=1.0)
        out = strong_photometric(img, rng, cfg)
        assert out.shape == img.shape
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_grayscale_forced_channels_equal(self, rng):
        img = rand_image(rng)
        cfg = fixed_cfg(gray_p=1.0)
        out = strong_photometric(img, rng, cfg)
        assert torch.allclose(out[0], out[1], atol=1e-6)
        assert torch.allclose(out[1], out[2], atol=1e-6)

    def test_deterministic_under_seed(self, rng_factory):
        img = rand_image(np.random.default_rng(3))
        cfg = AugmentConfig()
        a = strong_photometric(img, rng_factory(11), cfg)
        b = strong_photometric(img, rng_factory(11), cfg)
        assert torch.equal(a, b)


class TestCutMix:
    def test_b1_skipped(self, rng):
        imgs = torch.rand(1, 3, 16, 16)
        out, rec = cutmix_batch(imgs, rng)
        assert torch.equal(out, imgs)
        assert not rec.applied.any()

    def test_full_box_copies_source(self):
        imgs = torch.rand(2, 3, 8, 8)
        rec = CutMixRecord(source=torch.tensor([1, 0]),
                           box=torch.tensor([[0, 0, 8, 8], [0, 0, 8, 8]]),
                           applied=torch.tensor([True, False]))
        out = replay_cutmix(imgs, rec)
        assert torch.equal(out[0], imgs[1])
        assert torch.equal(out[1], imgs[1])

    def test_applied_false_is_identity(self, rng):
        imgs = torch.rand(4, 3, 16, 16)
        rec = CutMixRecord(source=torch.tensor([1, 2, 3, 0]),
                           box=torch.tensor([[0, 0, 4, 4]] * 4),
                           applied=torch.zeros(4, dtype=torch.bool))
        assert torch.equal(replay_cutmix(imgs, rec), imgs)

    def test_outside_box_unchanged(self, rng):
        imgs = torch.rand(4, 3, 16, 16)
        out, rec = cutmix_batch(imgs, rng, p=1.0)
        for i in range(4):
            top, left, bh, bw = (int(v) for v in rec.box[i])
            changed = torch.zeros(16, 16, dtype=torch.bool)
            changed[top:top + bh, left:left + bw] = True
            assert torch.equal(out[i][:, ~changed], imgs[i][:, ~changed])
            assert torch.equal(out[i][:, changed],
                               imgs[int(rec.source[i])][:, changed])

    def test_no_fixed_points_and_area_range(self, rng):
        imgs = torch.rand(6, 3, 32, 32)
        for _ in range(20):
            _, rec = cutmix_batch(imgs, rng, area_range=(0.25, 0.5), p=1.0)
            assert (rec.source != torch.arange(6)).all()
            for i in range(6):
                top, left, bh, bw = (int(v) for v in rec.box[i])
                assert 0 <= top and top + bh <= 32
                assert 0 <= left and left + bw <= 32
                frac = bh * bw / (32 * 32)
                assert 0.25 <= frac <= 0.5

    def test_replay_is_pure(self, rng):
        imgs = torch.rand(3, 3, 16, 16)
        _, rec = cutmix_batch(imgs, rng, p=1.0)
        a = replay_cutmix(imgs, rec)
        b = replay_cutmix(imgs, rec)
        assert torch.equal(a, b)
        # works on any shape-matched tensor, e.g. (B,H,W) labels
        labels = torch.randint(0, 3, (3, 16, 16))
        out = replay_cutmix(labels, rec)
        assert out.shape == labels.shape

    def test_targets_travel_with_pixels(self, rng):
        """Provenance: after mixing, every pixel's (image, label, conf)
        triple still comes from a single source item."""
        b, h, w = 5, 12, 12
        prov = torch.arange(b).view(b, 1, 1).expand(b, h, w)
        imgs = prov.view(b, 1, h, w).expand(b, 3, h, w).float()
        labels = prov.clone()
        conf = prov.float() / b
        for _ in range(10):
            mixed_imgs, rec = cutmix_batch(imgs, rng, p=1.0)
            lab_m, conf_m = apply_cutmix_to_targets(labels, conf, rec)
            src_from_img = mixed_imgs[:, 0].long()
            assert torch.equal(lab_m, src_from_img)
            assert torch.allclose(conf_m, src_from_img.float() / b)

    def test_shape_mismatch_rejected(self, rng):
        imgs = torch.rand(3, 3, 16, 16)
        _, rec = cutmix_batch(imgs, rng)
        with pytest.raises(AugmentError):
            apply_cutmix_to_targets(torch.zeros(2, 16, 16, dtype=torch.long),
                                    None, rec)
        with pytest.raises(AugmentError):
            apply_cutmix_to_targets(torch.zeros(3, 16, 16, dtype=torch.long),
                                    torch.zeros(3, 8, 8), rec)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_weak_record_invariants_property(seed):
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.random((3, 40, 40)).astype(np.float32))
    out, _, rec = weak_augment(img, None, 16, rng)
    assert out.shape == (3, 16, 16)
    assert 0.5 <= rec.scale <= 2.0
    resized = max(1, round(40 * rec.scale))
    avail = max(resized, 16)
    assert 0 <= rec.crop[0] <= avail - 16
    assert 0 <= rec.crop[1] <= avail - 16


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cutmix_record_invariants_property(seed):
    rng = np.random.default_rng(seed)
    imgs = torch.zeros(4, 3, 20, 20)
    _, rec = cutmix_batch(imgs, rng, p=0.7)
    assert (rec.source != torch.arange(4)).all()
    for i in range(4):
        top, left, bh, bw = (int(v) for v in rec.box[i])
        assert top + bh <= 20 and left + bw <= 20
        assert 0.25 * 400 <= bh * bw <= 0.5 * 400
