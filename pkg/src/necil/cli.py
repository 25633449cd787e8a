"""Command-line entry point: ``necil train|eval|dump-weights|ablate``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import (ConfigError, IngestionError, NumericalFailureError, ProtocolViolationError,
                     RejectedInputError)
from .runner import (ABLATION_AXES, ablate, dump_patch_weights, evaluate_run, format_ablation,
                     format_report, train_run)

EXPECTED_ERRORS = (ConfigError, IngestionError, NumericalFailureError, ProtocolViolationError,
                   RejectedInputError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="necil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train all tasks of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("eval", help="fill the accuracy matrix and report metrics")
    p.add_argument("run_dir")

    p = sub.add_parser("dump-weights", help="export one image's patch weights as CSV")
    p.add_argument("run_dir")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--image", type=int, required=True, help="index into the test set")
    p.add_argument("--mode", choices=["inverse_distance", "uniform", "distance"])
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="compare method variants at fixed seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            run_dir = train_run(load_config(args.config, args.override))
            print(run_dir)
        elif args.command == "eval":
            print(format_report(evaluate_run(args.run_dir)))
        elif args.command == "dump-weights":
            path, _ = dump_patch_weights(args.run_dir, args.task, args.image, args.mode, args.out)
            print(path)
        elif args.command == "ablate":
            rows = ablate(load_config(args.config, args.override), args.axis, args.seeds)
            print(format_ablation(rows))
    except EXPECTED_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
