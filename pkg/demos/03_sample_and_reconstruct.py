"""Use a trained prior: sample scenes, walk between two of them, and fit one view.

Expects the checkpoint written by ``02_train_small_prior.py`` (or pass
another checkpoint and dataset directory on the command line).
"""
import sys
from pathlib import Path

import numpy as np

from sceneprior.data import load_dataset, single_view_batch
from sceneprior.latent import random_latent
from sceneprior.model import load_model
from sceneprior.scene import Scene
from sceneprior.tasks import geometry_metrics, interpolate, reconstruct_single_view, synthesize

ckpt = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/small.spf")
data = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("demo_out/data")
model, _, _ = load_model(ckpt)
names = model.categories.names

for seed in range(3):
    scene = synthesize(model, seed)
    print(f"sample {seed}: " + ", ".join(names[o.label] for o in scene.objects))

za, zb = random_latent(model.anchors, 0), random_latent(model.anchors, 1)
for i, s in enumerate(interpolate(model, za, zb, 5)):
    print(f"t={i / 4:.2f}: {len(s)} objects")

ds = load_dataset(data)
rec = ds.records[0]
view = int(np.argmax(rec.visible.sum(axis=0)))
fit = reconstruct_single_view(model, single_view_batch(rec, view), iterations=300, decay_at=150)
gt = Scene([rec.scene.objects[j] for j in np.nonzero(rec.visible[:, view])[0]], rec.scene.categories)
m = geometry_metrics([fit.scene], [gt])
print(f"single view fit: loss {fit.losses[0]:.3f} -> {fit.losses[-1]:.3f}, "
      f"box IoU {m.box_iou:.3f}, chamfer {m.chamfer:.3f}")
