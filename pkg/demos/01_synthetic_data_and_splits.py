"""Walk through the synthetic shape dataset and split manifests.

Generates a small dataset, looks at what the generator produces, then
carves labeled/unlabeled partitions at several ratios and shows the
round-half-up sizing rule and manifest round-tripping.

Run from the repo root:  python3 demos/01_synthetic_data_and_splits.py
Writes figures and manifests under demos/out/.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from semimatch import (SplitManifest, SyntheticSpec, generate_synthetic,
                       make_split)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# ---------------------------------------------------------------------
# 1. Generate a dataset: colored shapes on noisy backgrounds. Class 0 is
#    background; classes 1..K-1 are hue families, so appearance varies
#    per sample but stays separable.
# ---------------------------------------------------------------------
spec = SyntheticSpec(num_samples=32, image_size=64, num_classes=3, seed=0)
ds = generate_synthetic(spec)
print(f"dataset {ds.dataset_id}: {len(ds.ids)} samples, "
      f"{ds.num_classes} classes, ignore={ds.ignore_value}")

img, mask = ds.get(ds.ids[0])
print(f"image {tuple(img.shape)} in [{img.min():.2f}, {img.max():.2f}], "
      f"mask {tuple(mask.shape)} classes {sorted(mask.unique().tolist())}")

mean, std = ds.channel_stats()
print(f"channel mean {mean.numpy().round(3)}, std {std.numpy().round(3)}")

fig, axes = plt.subplots(2, 6, figsize=(12, 4))
for col, sid in enumerate(ds.ids[:6]):
    img, mask = ds.get(sid)
    axes[0, col].imshow(img.permute(1, 2, 0))
    axes[1, col].imshow(mask, vmin=0, vmax=ds.num_classes - 1, cmap="viridis")
    axes[0, col].set_title(sid, fontsize=8)
for ax in axes.flat:
    ax.axis("off")
axes[0, 0].set_ylabel("image")
axes[1, 0].set_ylabel("mask")
fig.tight_layout()
fig.savefig(OUT / "01_samples.png", dpi=110)
print(f"wrote {OUT / '01_samples.png'}")

# ---------------------------------------------------------------------
# 2. Splits. The labeled count is round-half-up of ratio * N with a
#    floor of one sample, so 200 @ 1/16 gives 13, not 12.
# ---------------------------------------------------------------------
big = generate_synthetic(SyntheticSpec(num_samples=200, image_size=64, seed=0))
print("\nratio  labeled  unlabeled")
for ratio in ("1/2", "1/4", "1/8", "1/16", "1/100"):
    m = make_split(big, ratio, seed=0)
    print(f"{ratio:>5}  {len(m.labeled_ids):>7}  {len(m.unlabeled_ids):>9}")

# ---------------------------------------------------------------------
# 3. Manifests are the unit of reproducibility: same dataset + ratio +
#    seed is the same partition, and the YAML file round-trips exactly.
#    Every framework in a comparison should load the same manifest.
# ---------------------------------------------------------------------
m1 = make_split(big, "1/16", seed=0)
m2 = make_split(big, "1/16", seed=0)
assert m1.labeled_ids == m2.labeled_ids

path = OUT / "split_1_16.yaml"
m1.save(path)
loaded = SplitManifest.load(path)
assert loaded == m1
print(f"\nmanifest saved and reloaded identically: {path}")
print(f"first labeled ids: {list(loaded.labeled_ids[:4])} ...")

# different seed, different partition — but always a partition
m3 = make_split(big, "1/16", seed=1)
assert m3.labeled_ids != m1.labeled_ids
assert sorted(m3.labeled_ids + m3.unlabeled_ids) == sorted(big.ids)
print("seed 1 selects a different labeled subset (still a clean partition)")
