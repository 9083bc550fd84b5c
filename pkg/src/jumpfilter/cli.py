"""Command-line entry point.

Subcommands: generate, train, eval, sensitivity, mismatch. Each takes
--config (JSON file of RunConfig fields; sensitivity reads sweep_axis and
sweep_values from it, mismatch reads m_q_values), --seed, --out,
--paper-scale, --test-only and --workers. Exit codes: 0 success, 2 bad
configuration, 3 training aborted, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import sys

from .harness import (ConfigError, cmd_eval, cmd_generate, cmd_mismatch,
                      cmd_sensitivity, cmd_train, load_config)
from .neural_filter import TrainingAborted


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="replace the seed list with one seed")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--paper-scale", action="store_true",
                     help="full-size datasets and epochs")
    sub.add_argument("--test-only", action="store_true",
                     help="evaluate classical baselines on the test split only")
    sub.add_argument("--workers", type=int, help="worker pool size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jumpfilter",
        description="State estimation experiments for jump Markov systems.")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (
            ("generate", "simulate and persist train/val/test datasets"),
            ("train", "train the configured method, one job per seed"),
            ("eval", "evaluate against the persisted datasets"),
            ("sensitivity", "sweep one axis (seed | lr | batch | clip), report CoVar"),
            ("mismatch", "quadratic mismatch sweep over m_q levels")):
        _add_common(commands.add_parser(name, help=text))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cli = {"seed": args.seed, "out": args.out, "paper_scale": args.paper_scale,
           "test_only": args.test_only, "workers": args.workers}
    try:
        config = load_config(args.config, cli)
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "eval":
            cmd_eval(config)
        elif args.command == "sensitivity":
            axis = getattr(config, "_sweep_axis", None)
            values = getattr(config, "_sweep_values", None)
            if axis is None:
                raise ConfigError("sensitivity needs sweep_axis and sweep_values "
                                  "in the config file")
            cmd_sensitivity(config, axis, values)
        elif args.command == "mismatch":
            cmd_mismatch(config, getattr(config, "_m_q_values", None))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
