"""Generate a few scenes and fit a small prior to their 2D masks.

Stage 1 fits layouts (boxes, classes, completeness); stage 2 adds the
silhouette loss and the shape head. Runs in under a minute on one
core and leaves the checkpoint in ``demo_out/``.
"""
from pathlib import Path

from sceneprior.data import DatasetSpec, generate_dataset, load_dataset
from sceneprior.generator import GeneratorConfig
from sceneprior.model import ModelConfig
from sceneprior.training import TrainConfig, evaluate_epoch, train

out = Path("demo_out")
spec = DatasetSpec(n_scenes=3, min_objects=2, max_objects=3, n_views=8, image_size=(48, 48), seed=1)
generate_dataset(spec, out / "data")
ds = load_dataset(out / "data")
print(f"{len(ds)} scenes, {sum(r.n_objects for r in ds.records)} objects, {ds.records[0].n_views} views each")

model_cfg = ModelConfig(generator=GeneratorConfig(d_model=32, heads=4, ff_widths=(64, 32), n_max=4),
                        n_anchors=32, trunk=(64, 32), shape_hidden=(32,), template_level=1)
cfg = TrainConfig(stage1_epochs=1500, stage2_epochs=150, stage1_decay=1000, stage2_decay=100, views_per_step=4)


def progress(row):
    if row["epoch"] % 250 == 0 or row["epoch"] == cfg.total_epochs - 1:
        print(f"epoch {row['epoch']:4d}  stage {row['stage']}  loss {row['loss']:.3f}  box L1 {row['box_l1']:.4f}")


tr = train(ds, cfg, model_cfg, out=out / "small.spf", callback=progress)
final = evaluate_epoch(tr, stage=2)
print(f"box L1 {final['box_l1']:.4f}  completeness {final['completeness_acc']:.2f}  "
      f"object IoU {final['object_iou']:.3f}")
