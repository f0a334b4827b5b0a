"""The EMA teacher and confidence-filtered pseudo-labels.

The teacher starts as an exact copy of the student and then trails it
with a warming-up momentum gamma = min(1 - 1/(iter+1), cap): early on it
follows closely, later it averages over a long window. Its predictions
on weak views, thresholded at tau, are the targets for the student's
strong views.

Run from the repo root:  python3 demos/04_teacher_and_pseudo_labels.py
"""

import copy
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from semimatch import (ModelConfig, build_seg_model, ema_update,
                       gamma_schedule, init_teacher, make_pseudo_labels)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# ---------------------------------------------------------------------
# 1. The momentum schedule: 0 at iteration 0 (exact copy), then rising
#    toward the cap. By iteration 500 it has reached 0.996.
# ---------------------------------------------------------------------
iters = list(range(0, 2000))
gammas = [gamma_schedule(i, cap=0.996) for i in iters]
for i in (0, 9, 99, 499, 1999):
    print(f"gamma({i:>4}) = {gamma_schedule(i, 0.996):.6f}")

fig, ax = plt.subplots(figsize=(5.5, 3))
ax.plot(iters, gammas)
ax.axhline(0.996, color="k", ls="--", lw=0.8, label="cap 0.996")
ax.set_xlabel("iteration")
ax.set_ylabel("gamma")
ax.legend()
fig.tight_layout()
fig.savefig(OUT / "04_gamma.png", dpi=110)
print(f"wrote {OUT / '04_gamma.png'}")

# ---------------------------------------------------------------------
# 2. The teacher trails a drifting student. Push the student's weights
#    with fake gradient steps and watch the teacher's distance shrink
#    slowly — it is a smoothed, lagged copy.
# ---------------------------------------------------------------------
torch.manual_seed(0)
student = build_seg_model(ModelConfig(), num_classes=3)
teacher = init_teacher(student, cap=0.996)
w0 = copy.deepcopy(student.state_dict())

dist = []
for step in range(300):
    with torch.no_grad():
        for p in student.parameters():
            p.add_(0.01 * torch.randn_like(p))
    ema_update(teacher, student)
    d = sum(float((pt - ps).norm()) for pt, ps in
            zip(teacher.model.parameters(), student.parameters()))
    dist.append(d)
print(f"\nteacher-student distance: step 1 {dist[0]:.3f} -> "
      f"step 300 {dist[-1]:.3f} (never zero, always trailing)")
assert teacher.iteration == 300

fig, ax = plt.subplots(figsize=(5.5, 3))
ax.plot(dist)
ax.set_xlabel("update")
ax.set_ylabel("sum of parameter distances")
ax.set_title("teacher trails the random-walking student")
fig.tight_layout()
fig.savefig(OUT / "04_lag.png", dpi=110)
print(f"wrote {OUT / '04_lag.png'}")

# ---------------------------------------------------------------------
# 3. Pseudo-labels: argmax + max-softmax confidence, thresholded. Raising
#    tau trades coverage for precision; tau > max confidence keeps zero
#    pixels (and the unsupervised loss vanishes with it).
# ---------------------------------------------------------------------
torch.manual_seed(1)
logits = torch.randn(2, 3, 32, 32) * 2.0
print("\n  tau   kept pixels")
for tau in (0.0, 0.5, 0.7, 0.9, 0.99):
    pl = make_pseudo_labels(logits, tau)
    print(f" {tau:.2f}   {pl.valid.float().mean():.1%}")
pl = make_pseudo_labels(logits, 0.0)
assert not pl.hard_labels.requires_grad  # targets never carry gradient
print("pseudo-labels are detached integer targets with a validity mask")
