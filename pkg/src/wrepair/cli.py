"""Command-line interface: data generation, training, repair, evaluation,
grid search, and the full comparison protocol."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from . import data as D
from . import harness as H
from . import metrics as M
from . import repair as R
from .layers import TrainConfig, load_model, mlp, save_model_bytes
from .repair import RepairConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad input; the message names the offending flag."""


def _atomic_write_bytes(path, raw: bytes) -> None:
    H.atomic_write(path, raw, mode="wb")


def print_version_and_capabilities(out=sys.stdout) -> None:
    lines = [
        f"wrepair {__version__}",
        "repair methods: w-aug, w-bn, w-loss, w-dbr, w-os",
        "baselines: orig, orig-ft",
        "rho grid: 0.1, 0.3, 0.5, 0.7, 0.9 (w-os extends to 0.01, 0.001, 0.0001)",
        "selection: lambda1=0.25 error cut, lambda2=0.01 accuracy tolerance",
        "tasks: single-label (accuracy, pairwise confusion),"
        " multi-label (mAP, co-prediction confusion)",
        "data formats: csv, idx",
    ]
    out.write("\n".join(lines) + "\n")


def _parse_target(text: str, ds: D.LabeledDataset, flag="--target") -> D.TargetSpec:
    try:
        return D.TargetSpec.parse(text, ds.class_names)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from None


def _load_dataset(path, flag="--data") -> D.LabeledDataset:
    if not os.path.exists(path):
        raise UsageError(f"{flag}: no such file {path!r}")
    try:
        return D.load_csv(path)
    except (ValueError, OSError) as exc:
        raise UsageError(f"{flag}: cannot parse {path!r}: {exc}") from None


def _load_model(path, flag="--model"):
    if not os.path.exists(path):
        raise UsageError(f"{flag}: no such file {path!r}")
    try:
        return load_model(path)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"{flag}: cannot load {path!r}: {exc}") from None


def _train_config(args, seed=None) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                           lr=args.lr, momentum=args.momentum,
                           seed=args.seed if seed is None else seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_train_flags(p, epochs):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)


def cmd_gen_data(args) -> int:
    if args.kind == "toy2d":
        ds = D.gen_toy2d(args.seed, n_per_class=args.n_per_class)
    else:
        if args.pair is None:
            raise UsageError("--pair is required for multilabel data (a:b:rate)")
        parts = args.pair.split(":")
        if len(parts) != 3:
            raise UsageError(f"--pair: expected a:b:rate, got {args.pair!r}")
        try:
            pair = (int(parts[0]), int(parts[1]), float(parts[2]))
        except ValueError:
            raise UsageError(f"--pair: expected a:b:rate, got {args.pair!r}") from None
        try:
            ds = D.gen_multilabel(args.seed, args.n, args.classes, pair,
                                  noise_sd=args.noise_sd)
        except D.GenerationError as exc:
            raise UsageError(f"--pair: {exc}") from None
    D.save_csv(ds, args.out)
    print(f"wrote {ds.n} samples ({ds.task}, {ds.num_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    try:
        hidden = [int(h) for h in args.hidden.split(",") if h]
    except ValueError:
        raise UsageError(f"--hidden: expected comma-separated ints, got {args.hidden!r}") from None
    model = mlp(ds.d, hidden, ds.num_classes, batchnorm=not args.no_bn,
                task=ds.task, seed=args.seed)
    cfg = RepairConfig(method="orig-ft", rho=1.0, target=None, train=_train_config(args))
    outcome = R.finetune_orig(model, ds, cfg)
    _atomic_write_bytes(args.out, save_model_bytes(outcome.model))
    print(f"trained {args.epochs} epochs, final loss {outcome.loss_trace[-1]:.4f},"
          f" saved to {args.out}")
    return EXIT_OK


def cmd_repair(args) -> int:
    if args.method == "w-os":
        raise UsageError("--method: w-os is a post-processing method; use the"
                         " postprocess command")
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    target = _parse_target(args.target, ds)
    try:
        cfg = RepairConfig(method=args.method, rho=args.rho, target=target,
                           train=_train_config(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    outcome = R.run_repair(model, ds, cfg)
    _atomic_write_bytes(args.out, save_model_bytes(outcome.model))
    print(f"{args.method}(rho={args.rho:g}): {args.epochs} epochs,"
          f" final loss {outcome.loss_trace[-1]:.4f}, saved to {args.out}")
    return EXIT_OK


def cmd_postprocess(args) -> int:
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    target = _parse_target(args.target, ds)
    if not 0.0 <= args.rho <= 1.0:
        raise UsageError(f"--rho: must be in [0,1], got {args.rho}")
    preds = R.postprocess_wos(M.predict(model, ds), target, args.rho)
    if args.out:
        lines = [",".join(f"s{k}" for k in range(preds.num_classes))]
        for row in preds.scores:
            lines.append(",".join(repr(float(v)) for v in row))
        H.atomic_write(args.out, "\n".join(lines) + "\n")
    report = {"accuracy": M.overall_quality(preds),
              "error": M.target_error(preds, target)}
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    report = {}
    preds = M.predict(model, ds)
    if args.wos_rho is not None:
        if args.target is None:
            raise UsageError("--wos-rho requires --target")
        target = _parse_target(args.target, ds)
        preds = R.postprocess_wos(preds, target, args.wos_rho)
    report["quality"] = M.overall_quality(preds)
    if args.target:
        target = _parse_target(args.target, ds)
        report["target_error"] = M.target_error(preds, target)
    if args.confusion_out and ds.task == D.SINGLE_LABEL:
        cm = M.confusion_matrix(preds, ds.class_names)
        M.export_confusion_csv(cm, args.confusion_out)
    print(json.dumps(report))
    return EXIT_OK


def cmd_grid(args) -> int:
    model = _load_model(args.model)
    train_ds = _load_dataset(args.train_data, "--train-data")
    test_ds = _load_dataset(args.test_data, "--test-data")
    target = _parse_target(args.target, train_ds)
    policy = H.SelectionPolicy()
    cfg = _train_config(args)
    orig_ft_error = None
    if args.method == "w-os":
        ft = R.run_repair(model, train_ds, RepairConfig("orig-ft", 1.0, None, cfg))
        orig_ft_error = H.evaluate_model(ft.model, test_ds, target)["error"]
    result = H.grid_search(args.method, model, train_ds, test_ds, target, policy,
                           cfg, orig_ft_error=orig_ft_error)
    payload = {"method": result.method,
               "cells": [{"rho": c.rho, "accuracy": c.accuracy, "error": c.error,
                          "failure": c.failure} for c in result.cells],
               "selected": [{"rho": rho, "reason": reason}
                            for rho, reason in result.selected]}
    text = json.dumps(payload, indent=2)
    if args.out:
        H.atomic_write(args.out, text + "\n")
    print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    if not os.path.exists(args.config):
        raise UsageError(f"--config: no such file {args.config!r}")
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON: {exc}") from None
    for key in ("dataset", "target"):
        if key not in config:
            raise UsageError(f"--config: missing required key {key!r}")
    report = H.run_repair_experiment(config)
    written = H.emit_report(report, args.out_dir)
    for path in written:
        print(path)
    if report.failures:
        for f in report.failures:
            print(f"failed: {f['label']}: {f['reason']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wrepair",
        description="Repair targeted group errors of a classifier by weighted"
                    " fine-tuning or score post-processing.")
    parser.add_argument("--version", action="store_true",
                        help="print version and capabilities, then exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset CSV")
    p.add_argument("--kind", choices=("toy2d", "multilabel"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--pair", help="a:b:rate co-occurrence spec (multilabel)")
    p.add_argument("--noise-sd", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a fresh model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", default="16")
    p.add_argument("--no-bn", action="store_true")
    _add_train_flags(p, epochs=100)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("repair", help="fine-tune a model with a repair method")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=R.ALL_METHODS, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--target", required=True,
                   help="A:B confusion pair(s) or A:B:C bias triplet(s)")
    _add_train_flags(p, epochs=20)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_repair)

    p = sub.add_parser("postprocess", help="apply score smoothing (w-os)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--out", help="write post-processed scores CSV here")
    p.set_defaults(fn=cmd_postprocess)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--wos-rho", type=float)
    p.add_argument("--confusion-out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="rho grid search with selection")
    p.add_argument("--model", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--method", choices=R.ALL_METHODS[1:], required=True)
    p.add_argument("--target", required=True)
    _add_train_flags(p, epochs=20)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("compare", help="run the full comparison protocol")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print_version_and_capabilities()
        return EXIT_OK
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"wrepair {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"wrepair {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
