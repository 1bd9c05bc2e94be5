"""Command-line entry point.

    isaac train --mode zeta-star --lambda-x 0.1 --batch-size 60 --output-dir runs/zs
    isaac grid --config grid.json --tune-lr
    isaac bench --widths 100,400,1600
    isaac layer-mask --width 400 --tune-lr
    isaac autoencoder --mode zeta --lambda-g 0.1 --lambda-x 0.1

Values come from the defaults, then an optional flat JSON ``--config`` file,
then command-line flags. Exit codes: 0 success, 2 configuration error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import (NumericFailure, RunConfig, run_bench, run_grid, run_layer_mask, run_train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
EXPERIMENTS = {"train": "train", "grid": "grid", "bench": "bench",
               "layer-mask": "layer_mask", "autoencoder": "autoencoder"}


def _enum_value(text: str) -> str:
    return text.replace("-", "_").lower()


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def _mask(text):
    text = text.replace(",", "")
    if set(text) - {"0", "1"}:
        raise argparse.ArgumentTypeError("layer mask must be a string of 0/1, e.g. 10001")
    return [c == "1" for c in text]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isaac", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    add = common.add_argument
    add("--config", help="flat JSON file with RunConfig fields")
    add("--data-dir", help="directory with MNIST/Fashion-MNIST IDX files")
    add("--full-mnist", action="store_true", help="use the full training/test sets from --data-dir")
    add("--train-size", type=int)
    add("--depth", type=int, help="number of weight layers")
    add("--width", type=int, help="neurons per hidden layer")
    add("--hidden", type=_ints, help="explicit hidden widths, comma separated")
    add("--activation", type=_enum_value, choices=["relu", "identity"])
    add("--no-bias", dest="bias", action="store_false")
    add("--loss", type=_enum_value, choices=["mse", "softmax_cross_entropy"])
    add("--mode", type=_enum_value, choices=["gradient", "kfac", "zeta", "zeta_star"])
    add("--curvature-source", type=_enum_value, choices=["sampled_ggn", "exact_ggn", "fisher"])
    add("--lambda-g", type=float)
    add("--lambda-x", type=float)
    add("--r", type=int, help="Monte-Carlo samples per input")
    add("--layer-mask", type=_mask)
    add("--no-large-batch-switch", dest="large_batch_switch", action="store_false")
    add("--optimizer", type=_enum_value, choices=["sgd", "momentum", "adam"])
    add("--lr", type=float)
    add("--momentum", type=float)
    add("--tune-lr", action="store_true", help="tune the learning rate on the standard grid")
    add("--epochs", type=int)
    add("--max-steps", type=int)
    add("--batch-size", type=int)
    add("--seed", type=int)
    add("--no-eval", dest="evaluate", action="store_false")
    add("--output-dir")
    add("--lambdas", dest="grid_lambdas", type=_floats, help="grid values, comma separated")
    add("--masks", type=lambda s: s.split(","), help="layer-mask names, comma separated")
    add("--widths", type=_ints)
    add("--bench-steps", type=int)
    add("--bench-lambda", type=float)
    add("--warmup", type=int)
    add("--workers", type=int)
    add("-v", "--verbose", action="store_true")
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = dict(vars(args))
    command = values.pop("command")
    values.pop("verbose", None)
    config_path = values.pop("config", None)
    base = {}
    if config_path:
        base = RunConfig.from_json_file(config_path).to_dict()
    base.update(values)
    base["experiment"] = EXPERIMENTS[command]
    return RunConfig.from_dict(base)


def _report(experiment, result):
    if experiment in ("train", "autoencoder"):
        print(f"final train loss {result.final_loss():.6g}  test accuracy {result.final_accuracy():.4g}"
              f"  lr {result.config['lr']}")
    elif experiment == "grid":
        print("sector learning rates:", result.sector_lr)
        for path in result.paths.values():
            print("wrote", path)
    elif experiment == "layer_mask":
        for name, run_log in result.items():
            print(f"{name:12s} lr {run_log.config['lr']:<6g} final train loss {run_log.final_loss():.6g}")
    elif experiment == "bench":
        for row in result.summary:
            print(f"n={row['width']:<5d} {row['method']:10s} total {row['wall_ms_total']:.3f} ms"
                  f"  condition {row['wall_ms_condition']:.3f} ms  peak {row['peak_bytes']} B")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"isaac: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runner = {"train": run_train, "autoencoder": run_train, "grid": run_grid,
              "layer_mask": run_layer_mask, "bench": run_bench}[cfg.experiment]
    try:
        result = runner(cfg)
    except NumericFailure as exc:
        print(f"isaac: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"isaac: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _report(cfg.experiment, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
