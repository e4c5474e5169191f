"""Command-line entry point: train / eval / predict / inspect / make-toy."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import evaluation, training
from .config import ConfigError, RunConfig, load_run_config
from .data import (DatasetError, build_manifest, load_image, preprocess_eval,
                   save_manifest, split_manifest)
from .toydata import generate_toy_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", dest="data_root", help="dataset root directory")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--stages", dest="num_stages", type=int,
                        help="number of backbone stages U")
    parser.add_argument("--steps", type=int, help="progressive steps S")
    parser.add_argument("--backbone")
    parser.add_argument("--batch-size", dest="batch_size", type=int)


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in ("data_root", "out_dir", "seed", "epochs", "alpha", "beta",
                    "num_stages", "steps", "backbone", "batch_size")
    }
    if args.config:
        return load_run_config(args.config, overrides)
    values = {k: v for k, v in overrides.items() if v is not None}
    return RunConfig.from_dict(values)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if not cfg.data_root:
        raise ConfigError("no dataset root given (config data_root or --data)")
    manifest = build_manifest(cfg.data_root)
    split = split_manifest(manifest, cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, split, out_dir / "manifest.json")
    log = training.fit(cfg, manifest, split, resume=args.resume)
    final = log.epochs[-1]
    print(f"trained {len(log.epochs)} epochs; "
          f"final val top1 {final.val_top1:.4f}, best {log.best_val_top1:.4f}")
    print(f"metrics: {log.metrics_csv}")
    print(f"checkpoints: {log.last_checkpoint} (best: {log.best_checkpoint})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg, payload = training.load_model(args.checkpoint)
    data_root = args.data_root or cfg.data_root
    manifest = build_manifest(data_root)
    if manifest.num_classes != payload["num_classes"]:
        raise ConfigError(
            f"dataset has {manifest.num_classes} classes but checkpoint was "
            f"trained with {payload['num_classes']}"
        )
    split = split_manifest(manifest, cfg.seed)
    indices = list(split.indices(args.split))
    report = evaluation.evaluate(model, manifest, indices, cfg.eval_config(),
                                 batch_size=cfg.batch_size, mode=cfg.combine_mode)
    print(f"split: {args.split}")
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        header = ["split", "n_samples", "top1", "top5", "concat_top1"] + [
            f"stage{i + 1}_top1" for i in range(len(report.per_stage_top1))
        ]
        row = [args.split, report.n_samples, f"{report.top1:.4f}",
               f"{report.top5:.4f}", f"{report.concat_top1:.4f}"] + [
            f"{a:.4f}" for a in report.per_stage_top1
        ]
        with open(out, "w") as fh:
            fh.write(",".join(header) + "\n")
            fh.write(",".join(str(v) for v in row) + "\n")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    model, cfg, payload = training.load_model(args.checkpoint)
    class_names = payload["class_names"]
    if args.topk > len(class_names):
        raise ConfigError(
            f"--topk {args.topk} exceeds the {len(class_names)} known classes"
        )
    eval_cfg = cfg.eval_config()
    for image_path in args.images:
        image = preprocess_eval(load_image(image_path), eval_cfg)
        [pred] = evaluation.predict(model, image.unsqueeze(0), mode=cfg.combine_mode)
        order = pred.combined_scores.argsort()[::-1][:args.topk]
        print(image_path)
        for class_id in order:
            print(f"  {class_names[class_id]}: {pred.combined_scores[class_id]:.4f}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    model, cfg, payload = training.load_model(args.checkpoint)
    out_dir = Path(args.out_dir)
    image = preprocess_eval(load_image(args.image), cfg.eval_config())
    stem = Path(args.image).stem
    paths = evaluation.export_heatmaps(model, image, out_dir, stem)
    [pred] = evaluation.predict(model, image.unsqueeze(0), mode=cfg.combine_mode)
    sidecar = {
        "image": str(args.image),
        "predicted_class": payload["class_names"][pred.predicted_class],
        "per_stage_probs": [row.tolist() for row in pred.per_stage_probs],
        "concat_probs": pred.concat_probs.tolist(),
        "combined_scores": pred.combined_scores.tolist(),
        "class_names": payload["class_names"],
    }
    sidecar_path = out_dir / f"{stem}_probs.json"
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=1)
    for p in paths:
        print(p)
    print(sidecar_path)
    return EXIT_OK


def cmd_make_toy(args: argparse.Namespace) -> int:
    root = generate_toy_dataset(args.out_dir, per_class=args.per_class,
                                side=args.side, seed=args.seed)
    print(f"toy dataset written to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prenet",
        description="Progressive region enhancement network for fine-grained "
                    "food recognition: training, evaluation, and visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--config", help="YAML run config")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    _add_override_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", dest="data_root")
    p_eval.add_argument("--split", choices=["train", "val", "test"], default="test")
    p_eval.add_argument("--out", help="write a metrics CSV here")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="rank classes for images")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--topk", type=int, default=5)
    p_pred.add_argument("images", nargs="+")
    p_pred.set_defaults(func=cmd_predict)

    p_inspect = sub.add_parser("inspect", help="export per-stage heatmaps")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--image", required=True)
    p_inspect.add_argument("--out-dir", required=True)
    p_inspect.set_defaults(func=cmd_inspect)

    p_toy = sub.add_parser("make-toy", help="generate the synthetic toy dataset")
    p_toy.add_argument("--out-dir", required=True)
    p_toy.add_argument("--per-class", type=int, default=32)
    p_toy.add_argument("--side", type=int, default=64)
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.set_defaults(func=cmd_make_toy)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
