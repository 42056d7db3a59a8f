"""Batch command-line entry points.

Commands: train, eval, predict, selfcheck, make-synthetic. Every command is
deterministic under a fixed seed. Exit codes: 0 success, 1 usage or config
error, 2 data or checkpoint error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, apply_preset, load_config_file
from .data import (
    DATASET_KINDS,
    FundusSample,
    decode_image,
    load_dataset,
    make_synthetic,
    pad_sample,
    save_mask_png,
    save_probability_png,
    select_fold,
    write_dataset,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import evaluate_model, predict_probabilities
from .network import build_network, load_weights, save_weights
from .reporting import (
    format_metrics_table,
    render_roc,
    render_training_curves,
    write_history_tsv,
    write_metrics_files,
)
from .training import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1 here
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="carunet", description="Channel-attention residual U-Net for vessel segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="plain-text config file (key = value sections)")
        p.add_argument("--preset", help="drive | chase | stare | smoke")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")

    p_train = sub.add_parser("train", help="train a network and write checkpoint, history, figures")
    add_config_flags(p_train)
    p_train.add_argument("--dataset", choices=DATASET_KINDS, help="shortcut for --set training.dataset=...")
    p_train.add_argument("--data-root", help="dataset directory (images/ + masks/)")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int, help="override both network and training seeds")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p_eval.add_argument("checkpoint")
    add_config_flags(p_eval)
    p_eval.add_argument("--dataset", choices=DATASET_KINDS)
    p_eval.add_argument("--data-root")
    p_eval.add_argument("--out")
    p_eval.add_argument("--threshold", type=float, help="binarization threshold (default 0.5)")

    p_pred = sub.add_parser("predict", help="segment one image with a trained checkpoint")
    p_pred.add_argument("checkpoint")
    p_pred.add_argument("image")
    p_pred.add_argument("--out", required=True, help="output directory for probability and mask images")
    p_pred.add_argument("--threshold", type=float, default=0.5)

    p_check = sub.add_parser("selfcheck", help="run the built-in verification suite")
    p_check.add_argument("--trials", type=int, default=10_000, help="DropBlock Monte-Carlo trials")

    p_synth = sub.add_parser("make-synthetic", help="write a synthetic vessel dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--count", type=int, default=4)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=42)
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config_file(args.config) if args.config else RunConfig.defaults()
    if args.preset:
        apply_preset(config, args.preset)
    if getattr(args, "dataset", None):
        config.set("training", "dataset", args.dataset)
    if getattr(args, "data_root", None):
        config.set("data", "root", args.data_root)
    if getattr(args, "out", None):
        config.set("output", "dir", args.out)
    if getattr(args, "threshold", None) is not None:
        config.set("output", "threshold", str(args.threshold))
    if getattr(args, "seed", None) is not None:
        config.set("network", "seed", str(args.seed))
        config.set("training", "seed", str(args.seed))
    apply_overrides(config, args.set)
    return config


def _load_samples(config: RunConfig):
    kind = config.get("training", "dataset")
    root = config.get("data", "root")
    depth = config.get("network", "depth")
    if kind == "synthetic" and not root:
        rng = np.random.default_rng(np.random.SeedSequence([config.get("data", "synthetic_seed")]))
        samples = [
            pad_sample(s, depth)
            for s in make_synthetic(config.get("data", "synthetic_count"), config.get("data", "synthetic_size"), rng)
        ]
        ids = [s.id for s in samples]
        from .data import SplitPlan

        return samples, SplitPlan(train=ids, validation=[], test=list(ids))
    if not root:
        raise DataError(f"dataset '{kind}' needs data.root (--data-root) pointing at images/ + masks/")
    samples, plan = load_dataset(root, kind, depth=depth, seed=config.get("training", "seed"))
    if plan.folds is not None:
        plan = select_fold([s.id for s in samples], plan.folds, config.get("data", "fold"))
    return samples, plan


def cmd_train(args) -> int:
    config = _resolve_config(args)
    net_cfg = config.network_config()
    train_cfg = config.train_config()
    samples, plan = _load_samples(config)
    out_dir = Path(config.get("output", "dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.cfg").write_text(config.render())

    net = build_network(net_cfg)
    result = train(net, samples, plan, train_cfg)

    write_history_tsv(out_dir / "history.tsv", result.history)
    if config.get("output", "figures"):
        render_training_curves(out_dir / "training_curves.png", result.history)
    save_weights(net, out_dir / "checkpoint_final.ckpt")
    final_state = net.snapshot_state()
    net.load_state(result.best_state)
    save_weights(net, out_dir / "checkpoint_best.ckpt")
    net.load_state(final_state)
    summary = [
        f"steps = {result.steps}",
        f"train_pool = {result.pool_size}",
        f"best_epoch = {result.best_epoch}",
        f"best_val_auc = {result.best_val_auc!r}",
        f"final_train_dice = {result.final_train_dice!r}",
        f"seconds = {result.seconds:.1f}",
    ]
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    print(f"trained {result.steps} steps in {result.seconds:.1f}s; best val AUC {result.best_val_auc:.4f} (epoch {result.best_epoch}); training Dice {result.final_train_dice:.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    net = load_weights(args.checkpoint)
    if net.config.depth != config.get("network", "depth"):
        config.set("network", "depth", str(net.config.depth))  # pad geometry follows the checkpoint
    samples, plan = _load_samples(config)
    by_id = {s.id: s for s in samples}
    test_samples = [by_id[i] for i in plan.test]
    threshold = config.get("output", "threshold")
    report = evaluate_model(net, test_samples, threshold=threshold)

    out_dir = Path(config.get("output", "dir"))
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    scores, labels = [], []
    for s in test_samples:
        prob = predict_probabilities(net, s)
        save_mask_png(out_dir / "masks" / f"{s.id}.png", prob > threshold)
        from .data import crop_to_original

        scores.append(prob.ravel())
        labels.append(crop_to_original(s.mask, s.pad_offsets, s.original_size).ravel().astype(np.uint8))
    write_metrics_files(out_dir, report)
    if config.get("output", "figures"):
        render_roc(out_dir / "roc.png", np.concatenate(scores), np.concatenate(labels), report.auc)
    print(format_metrics_table(report))
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_weights(args.checkpoint)
    image = decode_image(Path(args.image))
    sample = FundusSample(image=image, mask=np.zeros((1, *image.shape[-2:]), dtype=np.float32), original_size=image.shape[-2:], pad_offsets=(0, 0), id=Path(args.image).stem)
    sample = pad_sample(sample, net.config.depth)
    prob = predict_probabilities(net, sample)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = sample.id
    save_probability_png(out_dir / f"{stem}_prob.png", prob)
    save_mask_png(out_dir / f"{stem}_mask.png", prob > args.threshold)
    print(f"wrote {out_dir / (stem + '_prob.png')} and {out_dir / (stem + '_mask.png')} ({prob.shape[0]}x{prob.shape[1]})")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results, _ = run_selfcheck(trials=args.trials)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_make_synthetic(args) -> int:
    samples = make_synthetic(args.count, args.size, np.random.default_rng(np.random.SeedSequence([args.seed])))
    write_dataset(samples, args.out)
    print(f"wrote {args.count} samples of {args.size}x{args.size} to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "train": cmd_train,
            "eval": cmd_eval,
            "predict": cmd_predict,
            "selfcheck": cmd_selfcheck,
            "make-synthetic": cmd_make_synthetic,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
