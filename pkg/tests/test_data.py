"""Synthetic generation, splits, disk ingestion."""

import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from PIL import Image

from semimatch.data import (DataError, DiskSpec, SyntheticSpec,
                            generate_synthetic, load_dataset, make_split)
from semimatch.datamodel import IGNORE_VALUE, ConfigError


def small_spec(**kw):
    base = dict(num_samples=20, image_size=32, num_classes=3, seed=0)
    base.update(kw)
    return SyntheticSpec(**base)


class TestSynthetic:
    def test_shapes_and_ranges(self):
        ds = generate_synthetic(small_spec())
        assert len(ds.ids) == 20
        img, mask = ds.get(ds.ids[0])
        assert img.shape == (3, 32, 32) and img.dtype == torch.float32
        assert mask.shape == (32, 32) and mask.dtype == torch.int64
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
        assert int(mask.min()) >= 0 and int(mask.max()) < 3

    def test_no_ignore_in_generated_masks(self):
        ds = generate_synthetic(small_spec())
        for sid in ds.ids:
            _, mask = ds.get(sid)
            assert not (mask == IGNORE_VALUE).any()

    def test_deterministic_per_seed(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        for sid in a.ids:
            ia, ma = a.get(sid)
            ib, mb = b.get(sid)
            assert torch.equal(ia, ib) and torch.equal(ma, mb)

    def test_seeds_differ(self):
        a = generate_synthetic(small_spec(seed=0))
        b = generate_synthetic(small_spec(seed=1))
        assert not torch.equal(a.get(a.ids[0])[0], b.get(b.ids[0])[0])

    def test_every_class_appears(self):
        ds = generate_synthetic(small_spec(num_samples=40))
        seen = set()
        for sid in ds.ids:
            _, mask = ds.get(sid)
            seen.update(int(v) for v in torch.unique(mask))
        assert seen == {0, 1, 2}

    def test_accessor_returns_fresh_tensors(self):
        ds = generate_synthetic(small_spec())
        img, _ = ds.get(ds.ids[0])
        img.zero_()
        img2, _ = ds.get(ds.ids[0])
        assert float(img2.abs().sum()) > 0

    def test_invalid_specs(self):
        with pytest.raises(ConfigError):
            generate_synthetic(small_spec(num_classes=1))
        with pytest.raises(ConfigError):
            generate_synthetic(small_spec(image_size=16))

    def test_channel_stats(self):
        ds = generate_synthetic(small_spec())
        mean, std = ds.channel_stats()
        assert mean.shape == (3,) and std.shape == (3,)
        assert (std > 0).all()
        # brute check over the whole set
        all_px = torch.cat([ds.get(s)[0].reshape(3, -1) for s in ds.ids], dim=1)
        assert torch.allclose(mean, all_px.mean(dim=1), atol=1e-5)


class TestMakeSplit:
    def test_round_half_up_sizes(self):
        ds = generate_synthetic(small_spec(num_samples=200))
        m = make_split(ds, Fraction(1, 16), seed=0)
        # 200/16 = 12.5 -> 13
        assert len(m.labeled_ids) == 13
        assert len(m.unlabeled_ids) == 187

    @pytest.mark.parametrize("n,ratio,expect", [
        (100, "1/16", 6), (32, "1/4", 8), (30, "1/4", 8), (20, "1/100", 1)])
    def test_rounding_table(self, n, ratio, expect):
        ds = generate_synthetic(small_spec(num_samples=n))
        m = make_split(ds, Fraction(ratio), seed=0)
        assert len(m.labeled_ids) == expect

    def test_partition_is_exact(self):
        ds = generate_synthetic(small_spec(num_samples=50))
        m = make_split(ds, Fraction(1, 5), seed=3)
        assert set(m.labeled_ids) | set(m.unlabeled_ids) == set(ds.ids)
        assert not set(m.labeled_ids) & set(m.unlabeled_ids)

    def test_deterministic_per_seed(self):
        ds = generate_synthetic(small_spec(num_samples=50))
        assert make_split(ds, "1/5", 1) == make_split(ds, "1/5", 1)
        assert make_split(ds, "1/5", 1) != make_split(ds, "1/5", 2)

    def test_bad_ratios(self):
        ds = generate_synthetic(small_spec())
        with pytest.raises(DataError):
            make_split(ds, Fraction(0), 0)
        with pytest.raises(DataError):
            make_split(ds, Fraction(1), 0)
        with pytest.raises(DataError):
            make_split(ds, Fraction(99, 100), 0)  # no unlabeled left


class TestDiskIngestion:
    def _write_pair(self, img_dir, mask_dir, stem, size=32, mask_value=1):
        rng = np.random.default_rng(0)
        arr = (rng.random((size, size, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{stem}.png")
        mask = np.full((size, size), mask_value, dtype=np.uint8)
        Image.fromarray(mask).save(mask_dir / f"{stem}.png")

    def test_load_ok(self, tmp_path):
        img_dir, mask_dir = tmp_path / "img", tmp_path / "msk"
        img_dir.mkdir(); mask_dir.mkdir()
        for stem in ("a", "b"):
            self._write_pair(img_dir, mask_dir, stem)
        ds = load_dataset(DiskSpec(str(img_dir), str(mask_dir), num_classes=3))
        assert ds.ids == ("a", "b")
        img, mask = ds.get("a")
        assert img.shape == (3, 32, 32)
        assert float(img.max()) <= 1.0
        assert int(mask.max()) == 1

    def test_missing_mask_listed(self, tmp_path):
        img_dir, mask_dir = tmp_path / "img", tmp_path / "msk"
        img_dir.mkdir(); mask_dir.mkdir()
        self._write_pair(img_dir, mask_dir, "a")
        rng_img = (np.zeros((8, 8, 3))).astype(np.uint8)
        Image.fromarray(rng_img).save(img_dir / "orphan.png")
        with pytest.raises(DataError, match="orphan"):
            load_dataset(DiskSpec(str(img_dir), str(mask_dir), num_classes=3))

    def test_out_of_range_mask_rejected(self, tmp_path):
        img_dir, mask_dir = tmp_path / "img", tmp_path / "msk"
        img_dir.mkdir(); mask_dir.mkdir()
        self._write_pair(img_dir, mask_dir, "a", mask_value=9)
        with pytest.raises(DataError, match="a"):
            load_dataset(DiskSpec(str(img_dir), str(mask_dir), num_classes=3))

    def test_ignore_value_allowed(self, tmp_path):
        img_dir, mask_dir = tmp_path / "img", tmp_path / "msk"
        img_dir.mkdir(); mask_dir.mkdir()
        self._write_pair(img_dir, mask_dir, "a", mask_value=255)
        ds = load_dataset(DiskSpec(str(img_dir), str(mask_dir), num_classes=3))
        assert ds.ids == ("a",)
