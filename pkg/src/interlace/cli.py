"""Command-line surface: gen-data / train / infer / eval / gradcheck / report."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gradsuite
from .camseg import IGNORE
from .config import Config, parse_config
from .model import Model
from .scenes import SceneRecipe, generate_scene, read_dataset, write_dataset
from .train import (
    Trainer,
    evaluate_scenes,
    load_scene_dirs,
    model_from_checkpoint,
    write_report,
)


def _worker_cap() -> int:
    try:
        return max(1, int(os.environ.get("MIT_THREADS", "1")))
    except ValueError:
        return 1


def cmd_gen_data(args) -> int:
    recipe = SceneRecipe(n_classes=args.classes, n_points=args.points,
                         n_views=args.views, image_hw=(args.res, args.res))
    seeds = [args.seed + i for i in range(args.scenes)]
    make = lambda s: generate_scene(s, recipe, scene_id=f"scene_{s:06d}")
    workers = _worker_cap()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(make, seeds))
    else:
        scenes = [make(s) for s in seeds]
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _load_config(path: str) -> Config:
    text = Path(path).read_text()
    cfg = parse_config(text)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if not cfg.data_dir:
        print("config error: missing key 'data_dir' (training dataset path)",
              file=sys.stderr)
        return 2
    train_scenes, val_scenes, class_names = load_scene_dirs(cfg)
    trainer = Trainer(cfg, train_scenes, val_scenes)
    if args.resume:
        trainer.restore(args.resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    with open(log_path, "a") as fh:
        def log(msg):
            print(msg)
        trainer.train_epochs(cfg.epochs - trainer.epoch, log=log)
        for i, loss in enumerate(trainer.loss_history, start=1):
            fh.write(f"{i}\t{loss:.8f}\n")
    trainer.save(out / "model.ckpt")
    if val_scenes:
        report = evaluate_scenes(trainer.model, val_scenes, trainer.val_partitions)
        write_report(report, out / "val_metrics.tsv", class_names)
        print(report.summary_line())
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    model, cfg = model_from_checkpoint(args.checkpoint)
    scenes, _ = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        labels, fused, _, _ = model.infer_scene(scene)
        path = out / f"{scene.scene_id}.labels.tsv"
        with open(path, "w") as fh:
            for lab, conf in zip(labels.labels, labels.confidence):
                fh.write(f"{int(lab)}\t{conf:.6f}\n")
        print(f"{scene.scene_id}: {np.mean(labels.labels != IGNORE):.1%} points labeled")
    return 0


def cmd_eval(args) -> int:
    scenes, class_names = read_dataset(args.data)
    if args.checkpoint:
        model, cfg = model_from_checkpoint(args.checkpoint)
    else:
        cfg = Config(n_classes=len(class_names))
        if args.config:
            cfg = _load_config(args.config)
        model = Model(cfg)   # untrained weights: chance-level sanity path
    report = evaluate_scenes(model, scenes)
    if args.out:
        write_report(report, args.out, class_names)
    print(report.summary_line())
    print(f"mAP={report.map_score:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_all(seeds=args.seeds, tol=args.tol)
    failed = [name for name, res in results if not res.passed]
    for name, res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} {name}: max rel err {res.max_rel_error:.3e} "
              f"(tol {res.tol:g}, {res.n_checked} partials)")
    return 1 if failed else 0


def _write_loss_svg(losses, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _write_iou_svg(class_names, ious, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3.5))
    vals = [0.0 if np.isnan(v) else v for v in ious]
    ax.bar(class_names, vals)
    ax.set_ylabel("IoU")
    ax.set_title("per-class IoU")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(args) -> int:
    run = Path(args.run)
    log_path = run / "train_log.tsv"
    made = []
    if log_path.exists():
        losses = [float(line.split("\t")[1])
                  for line in log_path.read_text().splitlines() if line.strip()]
        _write_loss_svg(losses, run / "loss_curve.svg")
        made.append("loss_curve.svg")
    metrics = run / "val_metrics.tsv"
    if metrics.exists():
        lines = metrics.read_text().splitlines()
        header = lines[0].split("\t")
        class_names = [h[len("iou_"):] for h in header if h.startswith("iou_")]
        all_row = next(ln for ln in lines if ln.startswith("ALL\t")).split("\t")
        ious = [float(x) for x in all_row[1:1 + len(class_names)]]
        _write_iou_svg(class_names, ious, run / "per_class_iou.svg")
        made.append("per_class_iou.svg")
    if not made:
        print(f"nothing to report in {run} (no train_log.tsv or val_metrics.tsv)",
              file=sys.stderr)
        return 1
    print("wrote " + ", ".join(made))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interlace",
        description="Weakly supervised 2D-3D point cloud segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--res", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write pseudo labels for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="labels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="pseudo-label metrics over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="emit SVG plots and tables for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
