"""Datasets: synthetic shape scenes, on-disk ingestion, and split creation.

The synthetic generator is a desk-scale stand-in for the usual
segmentation benchmarks: colored geometric shapes (disks, rectangles,
triangles) over a noisy colored background. Class identity is carried by
both shape type and color family, with per-image variation in hue,
lighting, size, and placement, so a handful of labeled images
underdetermines the task while the unlabeled pool covers it.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch

from .datamodel import IGNORE_VALUE, ConfigError, SplitManifest


class DataError(ValueError):
    """Raised for ingestion and split failures."""


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int = 200
    image_size: int = 64
    num_classes: int = 3
    shapes_min: int = 1
    shapes_max: int = 3
    noise: float = 0.10
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background + shapes)")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.num_samples < self.num_classes:
            raise ConfigError("num_samples must be >= num_classes")
        if not (0 <= self.shapes_min <= self.shapes_max):
            raise ConfigError("need 0 <= shapes_min <= shapes_max")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass
class DatasetHandle:
    """Uniform accessor over a dataset: opaque sample IDs mapping to
    (image, mask) pairs. Accessors must be safe for concurrent reads."""

    dataset_id: str
    ids: Tuple[str, ...]
    num_classes: int
    ignore_value: int
    _get: Callable[[str], Tuple[torch.Tensor, torch.Tensor]]

    def get(self, sample_id: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (image (3,H,W) float32 in [0,1], mask (H,W) int64)."""
        return self._get(sample_id)

    def channel_stats(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Per-channel mean/std over the whole dataset, for padding and
        input normalization."""
        acc = torch.zeros(3, dtype=torch.float64)
        acc2 = torch.zeros(3, dtype=torch.float64)
        n = 0
        for sid in self.ids:
            img, _ = self.get(sid)
            flat = img.double().reshape(3, -1)
            acc += flat.sum(dim=1)
            acc2 += (flat ** 2).sum(dim=1)
            n += flat.shape[1]
        mean = acc / n
        std = (acc2 / n - mean ** 2).clamp_min(1e-12).sqrt()
        return mean.float(), std.float()


# --------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------

def _shape_mask(kind: int, size: int, cy: float, cx: float, r: float,
                rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if kind == 1:  # axis-aligned rectangle, aspect jittered
        ar = rng.uniform(0.6, 1.6)
        hh, hw = r * ar, r / ar
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    # triangle: three vertices around the center, filled by half-plane tests
    ang = rng.uniform(0, 2 * np.pi)
    angles = ang + np.array([0.0, 2.094395, 4.188790]) + rng.uniform(-0.3, 0.3, 3)
    vy = cy + 1.3 * r * np.sin(angles)
    vx = cx + 1.3 * r * np.cos(angles)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        ey, ex = vy[j] - vy[i], vx[j] - vx[i]
        cross = ey * (xx - vx[i]) - ex * (yy - vy[i])
        # orientation sign from the third vertex
        k = (i + 2) % 3
        ref = ey * (vx[k] - vx[i]) - ex * (vy[k] - vy[i])
        inside &= (cross * np.sign(ref)) >= 0
    return inside


def _class_color(cls: int, num_fg: int, rng: np.random.Generator) -> np.ndarray:
    # hue families evenly spaced but wide, so color is only weakly
    # informative; geometry has to carry most of the class identity
    base_hue = (cls - 1) / num_fg
    h = (base_hue + rng.uniform(-0.20, 0.20)) % 1.0
    s = rng.uniform(0.35, 0.95)
    v = rng.uniform(0.35, 0.95)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def generate_synthetic(spec: SyntheticSpec) -> DatasetHandle:
    """Deterministic for a fixed seed: all samples are generated eagerly
    with one seeded generator, then served from memory."""

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    num_fg = spec.num_classes - 1
    images: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    for idx in range(spec.num_samples):
        # colored low-saturation background with a lighting gradient;
        # saturation/value ranges brush against the shape ranges so low-
        # contrast scenes occur
        bg_h, bg_s, bg_v = rng.uniform(0, 1), rng.uniform(0.0, 0.30), rng.uniform(0.25, 0.85)
        img = np.ones((size, size, 3)) * np.array(colorsys.hsv_to_rgb(bg_h, bg_s, bg_v))
        gy, gx = rng.uniform(-0.15, 0.15, 2)
        ramp = (np.mgrid[0:size, 0:size][0] / size - 0.5) * gy \
            + (np.mgrid[0:size, 0:size][1] / size - 0.5) * gx
        img += ramp[..., None]
        mask = np.zeros((size, size), dtype=np.int64)

        n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
        # guarantee class coverage over the dataset: sample i always
        # contains class (i mod num_fg) + 1 when it has any shape at all
        forced = (idx % num_fg) + 1 if n_shapes > 0 else None
        for s_i in range(n_shapes):
            cls = forced if s_i == 0 and forced is not None else int(
                rng.integers(1, spec.num_classes))
            kind = (cls - 1) % 3
            r = rng.uniform(0.08, 0.26) * size
            cy = rng.uniform(0.10 * size, 0.90 * size)
            cx = rng.uniform(0.10 * size, 0.90 * size)
            inside = _shape_mask(kind, size, cy, cx, r, rng)
            color = _class_color(cls, num_fg, rng)
            img[inside] = color
            mask[inside] = cls

        img += rng.normal(0.0, spec.noise, img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        images.append(img.astype(np.float32).transpose(2, 0, 1))
        masks.append(mask)

    store: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {
        f"syn{idx:05d}": (torch.from_numpy(images[idx]), torch.from_numpy(masks[idx]))
        for idx in range(spec.num_samples)
    }

    def get(sample_id: str) -> Tuple[torch.Tensor, torch.Tensor]:
        img, mask = store[sample_id]
        return img.clone(), mask.clone()

    return DatasetHandle(
        dataset_id=f"synthetic-s{spec.seed}-n{spec.num_samples}",
        ids=tuple(sorted(store)),
        num_classes=spec.num_classes,
        ignore_value=IGNORE_VALUE,
        _get=get,
    )


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def make_split(ds: DatasetHandle, ratio: Fraction | float | str, seed: int) -> SplitManifest:
    """Uniformly sample ``round_half_up(ratio * N)`` labeled IDs (at
    least 1); the rest are unlabeled. Deterministic per seed."""

    ratio = Fraction(ratio).limit_denominator(10**6) if not isinstance(ratio, Fraction) \
        else ratio
    if not (0 < ratio < 1):
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(ds.ids)
    # round half up, to match the usual benchmark convention
    # (e.g. 1/16 of 1464 -> 92)
    n_labeled = max(1, int(np.floor(float(ratio) * n + 0.5)))
    if n_labeled >= n:
        raise DataError(f"ratio {ratio} leaves no unlabeled samples out of {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    labeled = tuple(sorted(ds.ids[i] for i in order[:n_labeled]))
    unlabeled = tuple(sorted(ds.ids[i] for i in order[n_labeled:]))
    return SplitManifest(
        dataset_id=ds.dataset_id,
        labeled_ids=labeled,
        unlabeled_ids=unlabeled,
        ratio=ratio,
        seed=seed,
    )


# --------------------------------------------------------------------------
# On-disk ingestion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiskSpec:
    image_dir: str
    mask_dir: str
    num_classes: int
    ignore_value: int = IGNORE_VALUE


def load_dataset(spec: DiskSpec) -> DatasetHandle:
    """Load image/mask pairs matched by basename. Images are standard
    raster files; masks are single-channel integer rasters."""

    from PIL import Image

    image_dir, mask_dir = Path(spec.image_dir), Path(spec.mask_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    if not mask_dir.is_dir():
        raise DataError(f"mask directory not found: {mask_dir}")
    images = sorted(p for p in image_dir.iterdir() if p.is_file())
    if not images:
        raise DataError(f"no images found in {image_dir}")

    pairs: Dict[str, Tuple[Path, Path]] = {}
    missing: List[str] = []
    for img_path in images:
        stem = img_path.stem
        candidates = sorted(mask_dir.glob(stem + ".*"))
        if not candidates:
            missing.append(stem)
            continue
        pairs[stem] = (img_path, candidates[0])
    if missing:
        raise DataError(f"missing masks for: {missing}")

    def get(sample_id: str) -> Tuple[torch.Tensor, torch.Tensor]:
        img_path, mask_path = pairs[sample_id]
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_path), dtype=np.int64)
        if mask.ndim == 3:
            mask = mask[..., 0]
        return torch.from_numpy(img.transpose(2, 0, 1)), torch.from_numpy(mask)

    handle = DatasetHandle(
        dataset_id=f"disk-{image_dir.name}",
        ids=tuple(sorted(pairs)),
        num_classes=spec.num_classes,
        ignore_value=spec.ignore_value,
        _get=get,
    )
    # eager mask validation: corrupt labels surface at load, not mid-run
    offenders = []
    for sid in handle.ids:
        _, mask = handle.get(sid)
        bad = (mask != spec.ignore_value) & ((mask < 0) | (mask >= spec.num_classes))
        if bad.any():
            offenders.append(sid)
    if offenders:
        raise DataError(
            f"masks contain values outside [0, {spec.num_classes}) + ignore: {offenders}"
        )
    return handle
