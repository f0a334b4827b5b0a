"""Weak and strong views of the same image, and CutMix with provenance.

The weak view is geometry only (scale/crop/flip) and comes with a replay
record, so the label mask can be pushed through the exact same geometry
— padded pixels come back as ignore. The strong view stacks photometric
noise on top. CutMix swaps a rectangle between batch items and records
(source, box, applied) so targets can be mixed identically later.

Run from the repo root:  python3 demos/02_weak_strong_views.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from semimatch import (AugmentConfig, IGNORE_VALUE, SyntheticSpec, cutmix_batch,
                       generate_synthetic, replay_cutmix, replay_weak,
                       strong_photometric, weak_augment)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

ds = generate_synthetic(SyntheticSpec(num_samples=8, image_size=64, seed=4))
cfg = AugmentConfig()
rng = np.random.default_rng(7)

# ---------------------------------------------------------------------
# 1. Weak view + replay. One record describes the sampled geometry; the
#    mask goes through the same record with nearest interpolation and
#    ignore-padding, so no fake classes appear at borders.
# ---------------------------------------------------------------------
img, mask = ds.get(ds.ids[0])
img_w, mask_w, record = weak_augment(img, mask, crop_size=64, rng=rng, cfg=cfg)
print(f"weak record: scale={record.scale:.2f} crop={record.crop} "
      f"flip={record.flip}")
padded = (mask_w == IGNORE_VALUE).float().mean()
print(f"ignore fraction after padding: {padded:.2%}")

# replaying the record on the raw mask reproduces mask_w exactly
again = replay_weak(mask, record, is_mask=True, pad_value=IGNORE_VALUE)
assert torch.equal(again, mask_w)
print("mask replay matches the jointly-augmented mask")

# ---------------------------------------------------------------------
# 2. Strong view: photometric only, geometry untouched. Applying it to
#    the weak view gives the (weak, strong) pair consistency training
#    consumes — same pixels labeled, different appearance.
# ---------------------------------------------------------------------
img_s = strong_photometric(img_w, rng, cfg)
assert img_s.shape == img_w.shape
print(f"strong view range [{img_s.min():.2f}, {img_s.max():.2f}] "
      f"(clamped to [0,1])")

fig, axes = plt.subplots(1, 4, figsize=(11, 3))
show = [("original", img), ("weak", img_w), ("strong(weak)", img_s)]
for ax, (title, t) in zip(axes, show):
    ax.imshow(t.permute(1, 2, 0).clamp(0, 1))
    ax.set_title(title)
masked = mask_w.float()
masked[mask_w == IGNORE_VALUE] = float("nan")  # show padding as blank
axes[3].imshow(masked, vmin=0, vmax=ds.num_classes - 1, cmap="viridis")
axes[3].set_title("weak mask (+ignore)")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "02_views.png", dpi=110)
print(f"wrote {OUT / '02_views.png'}")

# ---------------------------------------------------------------------
# 3. CutMix with provenance. The record is the contract: anything shaped
#    (B,...,H,W) — labels, confidence, validity — can be mixed with the
#    same source/box so pixels and their targets travel together.
# ---------------------------------------------------------------------
batch = torch.stack([ds.get(sid)[0] for sid in ds.ids[:4]])
masks = torch.stack([ds.get(sid)[1] for sid in ds.ids[:4]])
mixed, rec = cutmix_batch(batch, np.random.default_rng(3), (0.25, 0.5), p=1.0)
print(f"\ncutmix sources: {rec.source.tolist()}  (no item keeps itself)")
for i in range(4):
    top, left, h, w = rec.box[i].tolist()
    print(f"  item {i}: box {h}x{w} at ({top},{left}) from item {rec.source[i]}")

mixed_masks = replay_cutmix(masks, rec)
# inside each box the mask now belongs to the source item
i = 0
top, left, h, w = rec.box[i].tolist()
src = int(rec.source[i])
assert torch.equal(mixed_masks[i, top:top + h, left:left + w],
                   masks[src, top:top + h, left:left + w])
print("mask pixels inside the box come from the same item as the image pixels")

fig, axes = plt.subplots(2, 4, figsize=(10, 5))
for i in range(4):
    axes[0, i].imshow(mixed[i].permute(1, 2, 0))
    axes[1, i].imshow(mixed_masks[i], vmin=0, vmax=ds.num_classes - 1,
                      cmap="viridis")
    axes[0, i].set_title(f"item {i} < {int(rec.source[i])}", fontsize=9)
for ax in axes.flat:
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "02_cutmix.png", dpi=110)
print(f"wrote {OUT / '02_cutmix.png'}")
