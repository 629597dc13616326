"""Command-line entry point: train, eval, infer, gradcheck, visualize.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss aborts training), 1 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .config import config_from_file, toy_config
from .data import load_dataset, read_tensor
from .evaluation import detections_from_stage
from .exceptions import ConfigError, DataError, NumericError
from .gradcheck import run_suite
from .train import Trainer, evaluate_model, model_from_checkpoint
from .visualize import render_scene


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=str, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsedet",
        description="Sparse set-prediction detector: training, evaluation, inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector from a config file")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help="dataset directory (save_dataset layout)")
    p.add_argument("--config", default=None,
                   help="config whose validation split is used when --dataset is omitted")
    _add_common(p)

    p = sub.add_parser("infer", help="print detections for one image blob")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image tensor blob (3, H, W)")
    p.add_argument("--score-floor", type=float, default=0.0)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--config", default=None, help="config for the full-loss check")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("visualize", help="render ground truth and per-stage boxes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="directory for PPM images")
    p.add_argument("--stages", default="all",
                   help="comma-separated 1-based stage numbers, or 'all'")
    p.add_argument("--score-floor", type=float, default=0.3)
    return parser


def cmd_train(args) -> int:
    cfg = config_from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    trainer = Trainer(cfg)
    if args.resume:
        trainer.resume_from(args.resume)
    history = trainer.train()
    if history and history[-1].val_ap50 is not None:
        print(f"final val AP50 {history[-1].val_ap50:.4f}")
    return 0


def _load_eval_scenes(args):
    if args.dataset:
        _, scenes = load_dataset(args.dataset)
        return scenes
    if args.config:
        cfg = config_from_file(args.config)
        from .data import generate_dataset

        return generate_dataset(cfg.dataset, cfg.dataset.num_images, cfg.num_val_images)
    raise ConfigError("eval needs --dataset or --config")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    scenes = _load_eval_scenes(args)
    if not scenes:
        raise DataError("evaluation dataset is empty")
    report = evaluate_model(model, scenes, cfg.batch_size)
    print(report.format_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.format_table() + "\n", encoding="utf-8")
        (out / "results.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = model_from_checkpoint(ckpt)
    image = read_tensor(args.image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"{args.image}: expected a (3, H, W) image blob, got {image.shape}")
    with ad.no_grad():
        stages = model.forward(image[None])
    dets = detections_from_stage(stages[-1], [0], args.score_floor)[0]
    for d in dets:
        print(f"{d.label} {d.score:.6f} {d.box[0]:.6f} {d.box[1]:.6f} {d.box[2]:.6f} {d.box[3]:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = config_from_file(args.config) if args.config else toy_config()
    return 0 if run_suite(cfg, seed=args.seed) else 1


def _parse_stages(text: str, num_stages: int) -> list[int]:
    if text.strip().lower() == "all":
        return list(range(num_stages))
    try:
        stages = [int(part) - 1 for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --stages value {text!r}: {e}") from e
    for s in stages:
        if not 0 <= s < num_stages:
            raise ConfigError(f"stage {s + 1} out of range (model has {num_stages} stages)")
    return stages


def cmd_visualize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    _, scenes = load_dataset(args.dataset)
    stages_wanted = _parse_stages(args.stages, cfg.model.num_stages)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probs = lambda logits: 1.0 / (1.0 + np.exp(-np.clip(logits, -60, 60)))
    for pos, scene in enumerate(scenes):
        with ad.no_grad():
            outputs = model.forward(scene.image[None])
        stage_boxes = []
        for s in stages_wanted:
            boxes = outputs[s].boxes.data[0]
            scores = probs(outputs[s].class_logits.data[0]).max(axis=1)
            stage_boxes.append((boxes, scores))
        render_scene(
            scene.image, scene.boxes, stage_boxes,
            out / f"scene_{pos:06d}.ppm", score_floor=args.score_floor,
        )
    print(f"wrote {len(scenes)} images to {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "infer": cmd_infer,
        "gradcheck": cmd_gradcheck,
        "visualize": cmd_visualize,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
