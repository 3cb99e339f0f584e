"""Command-line entry point: ``foanil {train,evaluate,sweep,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foanil", description="FO-ANIL simulator and checks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train n_runs independent runs"),
                            ("evaluate", "excess-risk table for trained params"),
                            ("sweep", "retrain over a list of values for one config key"),
                            ("verify", "run the theory checks and exit 2 on failure")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML config (defaults used when omitted)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--runs", type=int, help="override config n_runs")
        if name == "evaluate":
            p.add_argument("--params", nargs="*", default=[], type=Path,
                           help="train output directories or params.npz files")
            p.add_argument("--no-baselines", action="store_true")
        if name == "sweep":
            p.add_argument("--param", help="dotted config key, e.g. training.m_in")
            p.add_argument("--values", help="YAML list, e.g. '[10, 20, 30]'")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_override("seed", args.seed)
    if args.runs is not None:
        cfg = cfg.with_override("n_runs", args.runs)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import harness

    try:
        cfg = _load(args)
        if args.command == "train":
            manifest = harness.cmd_train(cfg, args.out)
            print(f"wrote {len(manifest.seeds)} runs to {args.out}")
        elif args.command == "evaluate":
            payload = harness.cmd_evaluate(cfg, args.out, args.params, not args.no_baselines)
            for row in payload["rows"]:
                print(f"{row['method']:>16s} {row['adaptation']:>8s} m_test={row['m_test']:<3d} "
                      f"{row['mean']:.3f} +/- {row['std']:.3f}")
        elif args.command == "sweep":
            values = yaml.safe_load(args.values) if args.values else None
            if values is not None and not isinstance(values, list):
                raise ConfigError(["--values must be a YAML list"])
            path = harness.cmd_sweep(cfg, args.out, args.param, values)
            print(f"wrote {path}")
        else:
            results = harness.cmd_verify(cfg, args.out)
            width = max(len(r.name) for r in results)
            for r in results:
                print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}s}  {r.detail}")
            if not all(r.passed for r in results):
                return EXIT_VERIFY
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
