"""End-to-end: train the labeled-only baseline and the dual-stream
method on the same split, then compare their curves and evaluate.

Uses a reduced setup (fewer samples and epochs than configs/desk.yaml)
so the whole script finishes in about a minute on a CPU.

Run from the repo root:  python3 demos/07_train_and_evaluate.py
"""

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from semimatch import TrainConfig, evaluate_dataset, train
from semimatch.data import SyntheticSpec, generate_synthetic, make_split
from semimatch.engine import load_checkpoint

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

ds = generate_synthetic(SyntheticSpec(num_samples=96, image_size=64, seed=0))
eval_ds = generate_synthetic(SyntheticSpec(num_samples=48, image_size=64, seed=1))
manifest = make_split(ds, "1/16", seed=0)
print(f"{len(manifest.labeled_ids)} labeled / "
      f"{len(manifest.unlabeled_ids)} unlabeled, {len(eval_ds.ids)} eval")

arts = {}
for fw in ("labeled_only", "unimatch_v2"):
    cfg = TrainConfig(framework=fw, epochs=16, eval_every=2,
                      decoder_lr=1e-3, seed=0)
    print(f"\ntraining {fw} ...")
    arts[fw] = train(cfg, manifest, ds, eval_ds=eval_ds,
                     out_dir=OUT / f"run-{fw}", progress=True)

# ---------------------------------------------------------------------
# The metrics log is JSONL with step and eval records; plot both.
# ---------------------------------------------------------------------
fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
for fw, art in arts.items():
    steps, losses, epochs, mious = [], [], [], []
    for line in open(art.metrics_path):
        r = json.loads(line)
        if r["kind"] == "step":
            steps.append(r["step"])
            losses.append(r["loss_total"])
        else:
            epochs.append(r["epoch"])
            mious.append(r["teacher_miou"])
    ax1.plot(steps, losses, label=fw, alpha=0.8)
    ax2.plot(epochs, mious, marker="o", label=fw)
ax1.set_xlabel("step")
ax1.set_ylabel("total loss")
ax1.legend()
ax2.set_xlabel("epoch")
ax2.set_ylabel("teacher mIoU")
ax2.legend()
fig.tight_layout()
fig.savefig(OUT / "07_curves.png", dpi=110)
print(f"\nwrote {OUT / '07_curves.png'}")

print("\nfinal teacher mIoU:")
for fw, art in arts.items():
    print(f"  {fw:<14} {art.final_teacher_miou:.4f}")

# ---------------------------------------------------------------------
# Checkpoints round-trip: reload the best teacher and re-evaluate, both
# whole-image and with an overlapping sliding window.
# ---------------------------------------------------------------------
_, teacher, meta = load_checkpoint(arts["unimatch_v2"].ckpt_best)
report = evaluate_dataset(teacher, eval_ds, eval_ds.ids)
print(f"\nreloaded best checkpoint (iteration {meta['iteration']}):")
print(report.table())

windowed = evaluate_dataset(teacher, eval_ds, eval_ds.ids, window=48, stride=32)
print(f"\nsliding-window (48/32) mIoU: {windowed.mean:.4f} "
      f"(whole-image: {report.mean:.4f})")
