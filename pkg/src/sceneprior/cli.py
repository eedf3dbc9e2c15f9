"""Command-line entry point: ``sceneprior <command> ...``.

Every failure prints one line ``error: <kind>: <message>`` on stderr and
exits with status 1; argument errors exit with status 2 after the usage.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _read_json(path):
    return json.loads(Path(path).read_text())


def _load_latent(path, model) -> np.ndarray:
    """A latent file holds either ``{"z": [...]}`` or ``{"logits": [...]}`` (or a bare list of z)."""
    data = _read_json(path)
    if isinstance(data, list):
        return np.asarray(data, dtype=np.float64)
    if "z" in data:
        return np.asarray(data["z"], dtype=np.float64)
    if "logits" in data:
        return model.latent(np.asarray(data["logits"], dtype=np.float64)).value
    raise ValueError(f"{path}: expected a 'z' or 'logits' entry")


def cmd_gen_data(args) -> int:
    from .data import DatasetSpec, generate_dataset

    spec = DatasetSpec.from_dict(_read_json(args.spec)) if args.spec else DatasetSpec()
    if args.seed is not None:
        spec = DatasetSpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    man = generate_dataset(spec, args.out)
    print(json.dumps({"scenes": len(man["scenes"]), "out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import TrainConfig, load_train_config, sidecar_paths, train

    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_dict(dict(cfg.to_dict(), seed=args.seed))
    ds = load_dataset(args.data)

    def report(row):
        if args.verbose and (row["epoch"] % 100 == 0 or row["epoch"] == cfg.total_epochs - 1):
            print(json.dumps({k: row[k] for k in ("epoch", "stage", "loss", "box_l1")}), flush=True)

    train(ds, cfg, out=args.out, callback=report)
    side = sidecar_paths(args.out)
    print(json.dumps({"checkpoint": str(args.out), "stage1": str(side["stage1"]),
                      "metrics": str(side["metrics"])}))
    return 0


def cmd_synthesize(args) -> int:
    from .model import load_model
    from .scene import write_scene
    from .tasks import synthesize

    model, _, _ = load_model(args.ckpt)
    scene = synthesize(model, args.seed)
    write_scene(args.out, scene)
    print(json.dumps({"objects": len(scene), "out": str(args.out)}))
    return 0


def cmd_interpolate(args) -> int:
    from .model import load_model
    from .scene import write_scene
    from .tasks import interpolate

    model, _, _ = load_model(args.ckpt)
    za = _load_latent(args.from_, model)
    zb = _load_latent(args.to, model)
    scenes = interpolate(model, za, zb, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        write_scene(out / f"step_{i:03d}.json", s)
    print(json.dumps({"steps": len(scenes), "objects": [len(s) for s in scenes]}))
    return 0


def load_view(path):
    """Single annotated view: camera, image size, and per-object label/box/mask."""
    from .geometry import Camera
    from .losses import ViewBatch
    from .render import read_mask

    path = Path(path)
    data = _read_json(path)
    cam = data["camera"]
    cam = Camera.from_dict(_read_json(path.parent / cam) if isinstance(cam, str) else cam)
    objs = data["objects"]
    n = len(objs)
    W, H = cam.width, cam.height
    masks = np.zeros((1, n, 1, H, W), dtype=bool)
    for j, o in enumerate(objs):
        if o.get("mask"):
            masks[0, j, 0] = read_mask(path.parent / o["mask"])
    return ViewBatch(cam.R[None, None], cam.t[None, None], cam.intrinsics[None, None], (W, H),
                     np.array([[o["label"] for o in objs]], dtype=np.int64), np.array([n]),
                     np.array([[[o["box"]] for o in objs]], dtype=np.float64).reshape(1, n, 1, 4),
                     np.ones((1, n, 1), dtype=bool), masks)


def cmd_reconstruct(args) -> int:
    from .model import load_model
    from .scene import write_scene
    from .tasks import reconstruct_single_view

    model, _, _ = load_model(args.ckpt)
    view = load_view(args.view)
    rec = reconstruct_single_view(model, view, iterations=args.iterations)
    write_scene(args.out, rec.scene)
    print(json.dumps({"objects": len(rec.scene), "final_loss": rec.losses[-1] if rec.losses else None}))
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_run
    from .tasks import write_report

    report = evaluate_run(args.ckpt, args.data, samples=args.samples, recon_views=args.recon_views,
                          recon_iterations=args.recon_iterations)
    write_report(args.report, report)
    print(json.dumps(report))
    return 0


def cmd_render(args) -> int:
    from .geometry import load_camera
    from .render import RasterConfig, rasterize_instance_ids, write_pgm
    from .scene import read_scene

    scene = read_scene(args.scene)
    cam = load_camera(args.camera)
    ids = rasterize_instance_ids([(o.world_vertices(), o.mesh.faces) for o in scene.objects],
                                 cam, RasterConfig(cam.width, cam.height))
    img = np.where(ids < 0, 0, 255 - (ids * 200) // max(len(scene), 1)).astype(np.uint8)
    write_pgm(args.out, img)
    print(json.dumps({"out": str(args.out), "covered": int((ids >= 0).sum())}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(points=args.points)
    worst = {}
    for r in results:
        group = r.name.split(".")[0]
        worst[group] = max(worst.get(group, 0.0), r.error)
        if args.verbose:
            print(f"{r.name:40s} {r.error:.3e}  tol {r.tol:.0e}  {'ok' if r.ok else 'FAIL'}")
    print(json.dumps({k: float(f"{v:.3e}") for k, v in worst.items()}))
    bad = [r.name for r in results if not r.ok]
    if bad:
        raise RuntimeError("gradient check failed for " + ", ".join(bad))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sceneprior", description="Scene priors learned from 2D masks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the procedural multi-view dataset")
    s.add_argument("--spec", help="dataset spec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="two-stage training")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="training config JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("synthesize", help="decode a random latent into a scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synthesize)

    s = sub.add_parser("interpolate", help="scenes along the geodesic between two latents")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--from", dest="from_", required=True)
    s.add_argument("--to", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_interpolate)

    s = sub.add_parser("reconstruct", help="fit a latent to one annotated view")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--view", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=1000)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="training, synthesis and reconstruction metrics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--recon-views", type=int, default=8)
    s.add_argument("--recon-iterations", type=int, default=1000)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("render", help="instance-id image of a scene file")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("gradcheck", help="tape gradients against finite differences")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one machine-parsable line per failure
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
