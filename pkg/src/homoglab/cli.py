"""Command-line entry point: ``homoglab <subcommand> --config <path>``."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from .harness import ConfigError, emit_outputs, load_config, run_experiment

SUBCOMMANDS = {
    "tensors": "effective_tensors",
    "converge": "convergence",
    "invariance": "invariance",
    "spde-var": "spde_variance",
    "aronson": "aronson",
    "malliavin": "malliavin",
    "condition-s": "condition_s",
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homoglab",
                                     description="Homogenization and fluctuation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=_u64, default=None, help="override base_seed")
        p.add_argument("--replicates", type=_positive, default=None, help="override replicates")
        p.add_argument("--threads", type=_positive, default=None, help="worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    kind = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, kind)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    overrides = {k: v for k, v in (("base_seed", args.seed), ("replicates", args.replicates),
                                   ("threads", args.threads), ("outputs", args.out))
                 if v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    rec = run_experiment(cfg)
    try:
        emit_outputs(rec, cfg.outputs)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for c in rec.checks:
        status = "PASS" if c["pass"] else "FAIL"
        print(f"{status}  {c['quantity']:<36} {c['method']:<28} value={c['value']:.6g} "
              f"tol={c['tolerance']:.3g}")
    print(f"{'PASS' if rec.passed else 'FAIL'}  {cfg.kind} -> {cfg.outputs}")
    return 0 if rec.passed else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
