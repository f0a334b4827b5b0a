"""The loss family: supervised CE, confidence-masked unsupervised CE,
and the multi-stream combinations.

Everything reduces to per-pixel cross-entropy; the interesting parts are
which pixels count (confidence gate, ignore map) and what the mean is
taken over (all scoreable pixels by default).

Run from the repo root:  python3 demos/05_losses_and_filtering.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from semimatch import (IGNORE_VALUE, make_pseudo_labels, masked_unsup_loss,
                       supervised_loss, total_loss, v1_unlabeled_loss,
                       v2_unlabeled_loss)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
torch.manual_seed(0)

# ---------------------------------------------------------------------
# 1. Supervised CE skips ignore pixels entirely: they change neither the
#    numerator nor the denominator.
# ---------------------------------------------------------------------
logits = torch.randn(2, 3, 16, 16) * 2
labels = torch.randint(0, 3, (2, 16, 16))
full = supervised_loss(logits, labels)

half = labels.clone()
half[:, 8:, :] = IGNORE_VALUE   # blank out the bottom half
top_only = supervised_loss(logits[:, :, :8, :], labels[:, :8, :])
assert torch.allclose(supervised_loss(logits, half), top_only, atol=1e-6)
print(f"supervised CE: full {full:.4f}, with bottom half ignored "
      f"{supervised_loss(logits, half):.4f} == top-half-only {top_only:.4f}")

# ---------------------------------------------------------------------
# 2. The unsupervised term is CE against thresholded teacher targets.
#    As tau rises fewer pixels pass the gate; the kept fraction falls
#    and with the "all" denominator the loss shrinks toward zero.
# ---------------------------------------------------------------------
teacher_logits = torch.randn(2, 3, 16, 16) * 2
student_logits = torch.randn(2, 3, 16, 16, requires_grad=True)

taus, losses, kepts = [], [], []
for tau in [i / 20 for i in range(21)]:
    pl = make_pseudo_labels(teacher_logits, tau)
    loss, kept = masked_unsup_loss(student_logits, pl)
    taus.append(tau)
    losses.append(float(loss))
    kepts.append(kept)
print(f"\ntau 0.0: loss {losses[0]:.4f} kept {kepts[0]:.0%}   "
      f"tau 1.0: loss {losses[-1]:.4f} kept {kepts[-1]:.0%}")

fig, ax1 = plt.subplots(figsize=(5.5, 3))
ax1.plot(taus, losses, label="unsup loss", color="C0")
ax1.set_xlabel("confidence threshold tau")
ax1.set_ylabel("loss", color="C0")
ax2 = ax1.twinx()
ax2.plot(taus, kepts, label="kept fraction", color="C1")
ax2.set_ylabel("kept fraction", color="C1")
fig.tight_layout()
fig.savefig(OUT / "05_tau_sweep.png", dpi=110)
print(f"wrote {OUT / '05_tau_sweep.png'}")

# gradient flows only through kept pixels
pl = make_pseudo_labels(teacher_logits, 0.9)
loss, _ = masked_unsup_loss(student_logits, pl)
loss.backward()
grad_map = student_logits.grad.abs().sum(dim=1) > 0
assert bool((grad_map == pl.valid).all())
print("per-pixel gradients appear exactly where the gate is open")

# ---------------------------------------------------------------------
# 3. Stream combinations. The triple-stream form weights the feature
#    stream 1/2 and each image stream 1/4; the dual-stream form is the
#    plain mean of its two streams. Identical streams collapse to the
#    single-stream loss — the multi-stream forms are pure averages.
# ---------------------------------------------------------------------
p = torch.randn(2, 3, 16, 16) * 2
pl = make_pseudo_labels(teacher_logits, 0.5)
single, _ = masked_unsup_loss(p, pl)
assert torch.allclose(v1_unlabeled_loss(p, p, p, pl), single, atol=1e-6)
assert torch.allclose(v2_unlabeled_loss(p, p, pl), single, atol=1e-6)
print(f"\nidentical streams collapse: v1 == v2 == single == {single:.4f}")

pa, pb, pc = (torch.randn(2, 3, 16, 16) * 2 for _ in range(3))
la, _ = masked_unsup_loss(pa, pl)
lb, _ = masked_unsup_loss(pb, pl)
lc, _ = masked_unsup_loss(pc, pl)
v1 = v1_unlabeled_loss(pa, pb, pc, pl)
print(f"v1 = 0.5*{la:.3f} + 0.25*{lb:.3f} + 0.25*{lc:.3f} = {v1:.4f}")
v2 = v2_unlabeled_loss(pb, pc, pl)
print(f"v2 = ({lb:.3f} + {lc:.3f}) / 2 = {v2:.4f}")

# the training objective is supervised + lambda * unsupervised
sup = supervised_loss(logits, labels)
print(f"total(lambda=1.0) = {total_loss(sup, v2, 1.0):.4f}; "
      f"total(lambda=0) = {total_loss(sup, v2, 0.0):.4f} == supervised")
