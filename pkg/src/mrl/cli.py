"""Command-line harness.

Subcommands:

    mrl gradcheck    [--seed N] [--seeds K]
    mrl equivariance [--seed N] [--seeds K]
    mrl cost         [--spec NAME] [--input N] [--out DIR]
    mrl train        [--config PATH] [--spec NAME] [--seed N] [--epochs N]
                     [--batch-size N] [--out DIR]
    mrl eval         [--config PATH] [--checkpoint PATH] [--transform T]

Exit codes: 0 success, 1 suite or check failure, 2 usage or config error.
BLAS thread pools are pinned to one thread at package import (see the
package __init__), keeping output byte-stable across machines.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint
from .cost import compare_variants, write_comparison_json, write_cost_csv
from .data import synth_dataset
from .errors import CheckpointError, ConfigError, MrlError
from .model import build_model, model_names, model_spec
from .suites import equivariance_suite, format_rows, gradcheck_suite
from .train import evaluate, parse_run_config, resolve_model_spec, train

USAGE_ERROR = 2
CHECK_FAILURE = 1


def _add_seed_args(p, default_seeds: int):
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--seeds", type=int, default=default_seeds,
                   help="number of seeds to sweep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrl", description="MRL block verification and training harness")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_seed_args(g, 5)

    e = sub.add_parser("equivariance", help="p4 rotation-commutation suite")
    _add_seed_args(e, 10)

    c = sub.add_parser("cost", help="analytic cost reports for SA/MRL/CQ+MRL")
    c.add_argument("--spec", default="mrl-cvt-13", choices=list(model_names()))
    c.add_argument("--input", type=int, default=None,
                   help="input size (defaults to the model's native size)")
    c.add_argument("--out", default=".", help="directory for CSV/JSON reports")

    t = sub.add_parser("train", help="train on oriented-bars")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--spec", default=None, help="model name override")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--out", default="runs/latest", help="output directory")

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("--config", default=None, help="JSON config file")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--transform", default="identity", choices=["identity", "rot90"])
    return parser


def _load_config(path, overrides: dict):
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for key, value in overrides.items():
        if value is not None:
            if key == "spec":
                raw.setdefault("model", {})["name"] = value
            else:
                raw[key] = value
    return parse_run_config(raw)


def _cmd_suite(rows) -> int:
    print(format_rows(rows))
    if all(r.passed for r in rows):
        print("all checks passed")
        return 0
    print("FAILURES present", file=sys.stderr)
    return CHECK_FAILURE


def _cmd_cost(args) -> int:
    comparison = compare_variants(model_spec(args.spec), args.input)
    os.makedirs(args.out, exist_ok=True)
    for variant, report in comparison.reports.items():
        fname = f"cost_{variant.replace('+', '_')}.csv"
        write_cost_csv(report, os.path.join(args.out, fname))
    write_comparison_json(comparison, os.path.join(args.out, "cost_compare.json"))
    print(f"spec {args.spec} at input {comparison.input_size}")
    for variant, report in comparison.reports.items():
        att = report.group_flops("attention-module")
        print(f"  {variant:7s} total {report.total_params:>12,} params "
              f"{report.total_flops / 1e9:7.3f} GFLOPs | attention-module "
              f"{att / 1e9:7.3f} GFLOPs")
    for label, delta in comparison.deltas.items():
        print(f"  {label}: attention-module FLOPs "
              f"{delta['attention_module_flops_pct']:+.1f}%")
    print(f"reports written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config, {
        "spec": args.spec, "seed": args.seed, "epochs": args.epochs,
        "batch_size": args.batch_size,
    })
    result = train(config, out_dir=args.out)
    for line in result.log_lines:
        print(line)
    print(f"final test accuracy {result.final_test_acc:.4f}; artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args.config, {})
    model = build_model(resolve_model_spec(config), seed=config.seed)
    load_checkpoint(model, args.checkpoint)
    _, (test_x, test_y) = synth_dataset(config.dataset, config.seed)
    acc = evaluate(model, test_x, test_y, transform=args.transform)
    print(f"accuracy ({args.transform}): {acc:.4f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _cmd_suite(gradcheck_suite(args.seed, args.seeds))
        if args.command == "equivariance":
            return _cmd_suite(equivariance_suite(args.seed, args.seeds))
        if args.command == "cost":
            return _cmd_cost(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return CHECK_FAILURE
    except MrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CHECK_FAILURE
    return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
