"""Command-line entry point: train, eval, infer, gradcheck, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import gradcheck as gc
from .data import DataError, SynthConfig
from .model import (CheckpointError, Model, ModelSpec, load_checkpoint,
                    save_checkpoint)
from .tensor import ShapeError
from .train import TrainConfig, evaluate, stratified_split, train_loop, \
    write_metrics_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="veinnet",
                     description="Lightweight attention CNN for finger-vein "
                                 "identification")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads (1 = reproducibility mode)")

    p = sub.add_parser("train", help="train a model on a class-directory tree")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--checkpoint", default="model.ckpt")
    p.add_argument("--metrics", default="metrics.csv")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=36)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reduction", type=int, default=16)
    p.add_argument("--no-cbam", action="store_true",
                   help="train the plain-CNN baseline without attention")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering curve PNGs next to the metrics CSV")
    add_threads(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--batch-size", type=int, default=36)
    add_threads(p)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    add_threads(p)

    p = sub.add_parser("gradcheck",
                       help="verify every backward pass against finite "
                            "differences (float64)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    add_threads(p)

    p = sub.add_parser("synth", help="write a synthetic PGM dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--out", required=True)
    add_threads(p)

    return parser


def cmd_train(args) -> int:
    ds = datamod.load_dataset(args.data)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, train_fraction=args.train_fraction,
                      seed=args.seed, reduction=args.reduction,
                      use_cbam=not args.no_cbam)
    spec = ModelSpec(num_classes=ds.num_classes, use_cbam=cfg.use_cbam,
                     reduction=cfg.reduction)
    model = Model(spec, seed=cfg.seed)
    metrics = train_loop(model, ds, cfg, log=print)
    write_metrics_csv(args.metrics, metrics)
    save_checkpoint(model, args.checkpoint)
    if not args.no_figures:
        from .report import save_training_curves
        for path in save_training_curves(metrics, args.metrics):
            print(f"wrote {path}")
    best = max(m.test_acc for m in metrics)
    print(f"final test accuracy: {metrics[-1].test_acc:.4f}")
    print(f"best test accuracy:  {best:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = datamod.load_dataset(args.data,
                              target_h=model.spec.input_h,
                              target_w=model.spec.input_w)
    if ds.num_classes != model.spec.num_classes:
        raise DataError(
            f"checkpoint expects {model.spec.num_classes} classes, "
            f"dataset has {ds.num_classes}")
    _, test_idx = stratified_split(ds.labels, args.train_fraction, model.seed)
    assert test_idx.size > 0, "stratified split left the test set empty"
    acc, preds = evaluate(model, ds, test_idx, args.batch_size)
    print(f"test accuracy: {acc:.4f} ({test_idx.size} samples)")
    truth = ds.labels[test_idx]
    for cls in range(ds.num_classes):
        mask = truth == cls
        errors = int((preds[mask] != cls).sum())
        if errors:
            print(f"class {ds.class_names[cls]}: {errors} error(s) "
                  f"of {int(mask.sum())}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    img = datamod._decode_image_file(Path(args.image),
                                     model.spec.input_h, model.spec.input_w)
    probs = model.forward(img[None, None], training=False).reshape(-1)
    order = np.argsort(-probs, kind="stable")[:5]
    for rank, cls in enumerate(order, start=1):
        print(f"{rank}. class {cls}  p={probs[cls]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gc.run_suite(seeds=range(args.seeds), rel_tol=args.tolerance)
    all_ok = True
    for r in reports:
        ok = r.passed(args.tolerance)
        all_ok &= ok
        print(f"{r.name:26s} max_rel_err={r.max_rel_err:.3e}  "
              f"checked={r.checked}  skipped={r.skipped}  "
              f"{'pass' if ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_VERIFY


def cmd_synth(args) -> int:
    cfg = SynthConfig(num_classes=args.classes,
                      images_per_class=args.per_class,
                      noise=args.noise, jitter=args.jitter, seed=args.seed)
    ds = datamod.generate_synthetic(cfg)
    count = datamod.write_dataset_pgm(ds, args.out)
    print(f"wrote {count} images across {ds.num_classes} classes to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return _COMMANDS[args.command](args)
        return _COMMANDS[args.command](args)
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
