"""Channel-wise feature dropout, plain and complementary.

Plain channel dropout zeroes each (sample, channel) slice independently
and rescales survivors. The complementary form draws ONE Bernoulli(0.5)
mask M per (sample, channel) and gives one stream M and the other 1-M,
both rescaled by 2: the two streams see disjoint channel subsets whose
rescaled sum reconstructs the original features exactly.

Run from the repo root:  python3 demos/03_complementary_dropout.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from semimatch import (apply_complementary_dropout, channel_dropout,
                       sample_complementary_masks)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
feat = [torch.randn(4, 32, 8, 8)]  # one feature level, (B,C,h,w)

# ---------------------------------------------------------------------
# 1. Plain channel dropout: whole channels vanish, survivors are scaled
#    by 1/(1-p) so the expectation is unchanged.
# ---------------------------------------------------------------------
dropped = channel_dropout(feat, p=0.5, rng=rng)[0]
zeroed = (dropped.abs().sum(dim=(2, 3)) == 0).float().mean()
print(f"plain dropout p=0.5: {zeroed:.0%} of channels zeroed")
kept = dropped[dropped != 0]
src = feat[0][dropped != 0]
assert torch.allclose(kept, 2.0 * src)
print("surviving channels are exactly 2x their original values")

# ---------------------------------------------------------------------
# 2. Complementary masks: M and 1-M partition the channels. Averaged
#    over many draws each entry keeps with probability ~1/2.
# ---------------------------------------------------------------------
m, mc = sample_complementary_masks(4, 32, rng)
assert torch.equal(m.data + mc.data, torch.ones(4, 32))
print("\nmask + complement is the all-ones matrix (disjoint, exhaustive)")

keep_rates = [sample_complementary_masks(4, 32, rng)[0].data.mean().item()
              for _ in range(2000)]
print(f"mean keep fraction over 2000 draws: {np.mean(keep_rates):.4f} "
      f"(Bernoulli(0.5) target)")

fig, ax = plt.subplots(figsize=(5, 3))
ax.hist(keep_rates, bins=40)
ax.axvline(0.5, color="k", ls="--")
ax.set_xlabel("per-draw keep fraction")
ax.set_ylabel("draws")
fig.tight_layout()
fig.savefig(OUT / "03_keep_fraction.png", dpi=110)
print(f"wrote {OUT / '03_keep_fraction.png'}")

# ---------------------------------------------------------------------
# 3. The reconstruction identity: e*M*2 + e*(1-M)*2 == 2e, so the two
#    streams together lose nothing — each just sees half of it.
# ---------------------------------------------------------------------
e1 = [t.clone() for t in feat]
e2 = [t.clone() for t in feat]
d1, d2 = apply_complementary_dropout(e1, e2, [(m, mc)])
assert torch.allclose(d1[0] + d2[0], 2.0 * feat[0], atol=1e-6)
print("\nstream1 + stream2 == 2 x features (exact channel partition)")

# per-channel view for one sample: wherever stream 1 is active stream 2
# is silent, and vice versa
active1 = d1[0][0].abs().sum(dim=(1, 2)) > 0
active2 = d2[0][0].abs().sum(dim=(1, 2)) > 0
assert not (active1 & active2).any()
fig, ax = plt.subplots(figsize=(7, 2))
ax.imshow(torch.stack([active1, active2]).float(), aspect="auto",
          cmap="Greys", interpolation="nearest")
ax.set_yticks([0, 1], ["stream 1", "stream 2"])
ax.set_xlabel("channel")
ax.set_title("disjoint channel activity (sample 0)")
fig.tight_layout()
fig.savefig(OUT / "03_disjoint_channels.png", dpi=110)
print(f"wrote {OUT / '03_disjoint_channels.png'}")
