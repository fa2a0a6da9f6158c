"""Command line entry point.

    faun run CONFIG [--out DIR] [--seed N] [--override key=value ...]
    faun compare SUMMARY SUMMARY ... [--csv PATH]
    faun validate CONFIG

Runs without ``--out`` write under ``$FAUN_OUTPUT_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import FaunError
from .runner import compare_runs, default_output_dir, run_experiment

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_BAD_INPUT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faun", description="Federated adversarial unlearning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its artifacts")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: $FAUN_OUTPUT_ROOT/<run name>)")
    run.add_argument("--seed", type=int, help="master seed, overrides the config")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted key with a JSON value, e.g. faun.eliminate_rounds=2 (repeatable)")

    cmp = sub.add_parser("compare", help="tabulate final metrics of several runs")
    cmp.add_argument("summaries", nargs="+", help="summary.json files or run directories")
    cmp.add_argument("--csv", help="also write the table as CSV")

    val = sub.add_parser("validate", help="check a config file and print its resolved form")
    val.add_argument("config")
    return parser


def _load(args):
    overrides = list(getattr(args, "override", []))
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            cfg = _load(args)
            print(cfg.to_json())
            print(f"config_hash {cfg.config_hash()}")
            return EXIT_OK
        if args.command == "compare":
            print(compare_runs(args.summaries, args.csv))
            return EXIT_OK
        cfg = _load(args)
    except (FaunError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    out = args.out or cfg.output_dir or default_output_dir(cfg)
    status = run_experiment(cfg, out)
    if status == 0:
        print(out)
    else:
        print(f"error: run failed, see {out}/error.json", file=sys.stderr)
    return EXIT_RUN_FAILED if status else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
