"""Command-line entry point: ``arcvc <study> [--config PATH] [--seeds LIST] [--out DIR] ...``.

Exit codes: 0 success, 1 configuration error, 2 a run diverged, 3 degenerate shaping fit.
"""
from __future__ import annotations

import argparse
import sys

from .config import SCHEMA, load_config
from .experiments import run_experiment
from .nn import ConfigurationError
from .shaping import DegenerateFitError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DEGENERATE = 0, 1, 2, 3
SUBCOMMANDS = ("risk-comparison", "reference-study", "penalty-study", "shaping")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with "diverged"
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arcvc", description="Risk-constrained actor-critic experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="sectioned key-value config file")
        p.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-9")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--workers", type=int, help="parallel runs")
        p.add_argument("--full-scale", action="store_true",
                       help="use the full-size sweep (50 seeds, 50 discount factors x 30 repeats)")
        group = p.add_argument_group("overrides", "any config key, as --section.key VALUE")
        for section, keys in SCHEMA.items():
            for key in keys:
                group.add_argument(f"--{section}.{key}", dest=f"ov:{section}.{key}", metavar="V")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("ov:") and v is not None}
    if args.seeds is not None:
        overrides["experiment.seeds"] = args.seeds
    if args.workers is not None:
        overrides["experiment.workers"] = str(args.workers)
    try:
        cfg = load_config(args.command, args.config, overrides, full_scale=args.full_scale, out=args.out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
    except DegenerateFitError as exc:
        print(f"degenerate fit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, path in result.paths.items():
        print(f"{name}: {path}")
    if result.diverged:
        for msg in result.diverged:
            print(f"diverged: {msg}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
