"""Command-line entry point: ``etage {pretrain,run,sweep-batchsize,report}``.

Exit codes: 0 success, 2 configuration or user error, 3 runtime failure
(divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import AdaptationDivergenceError, ConfigError, EtageError, SchemaVersionError, TrainingDivergenceError
from .experiment import cmd_pretrain, cmd_report, cmd_run, cmd_sweep_batchsize, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("etage")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("size list is empty")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    common.add_argument("--strategy", action="append", help="strategy to run; repeat for several")
    common.add_argument("--corruption", action="append", metavar="KIND:SEVERITY", help="repeat for several")
    common.add_argument("--batch-size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="etage", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the source model and save a checkpoint")
    sub.add_parser("run", parents=[common], help="adapt on every corruption x strategy and write a report")
    sw = sub.add_parser("sweep-batchsize", parents=[common], help="accuracy across adaptation batch sizes")
    sw.add_argument("--sizes", type=_sizes, help="comma-separated batch sizes")
    rp = sub.add_parser("report", help="comparison table from run reports")
    rp.add_argument("reports", nargs="+", type=Path)
    rp.add_argument("--out", type=Path, help="also write table.txt and table.csv here")
    rp.add_argument("--metric", default="accuracy", choices=["accuracy", "ece", "mce", "brier", "auroc",
                                                             "post_stream_accuracy"])
    return p


def _flag_overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.strategy:
        o["strategies"] = args.strategy
    if args.corruption:
        o["corruptions"] = args.corruption
    if args.batch_size is not None:
        o["adapt"] = {"batch_size": args.batch_size}
    return o


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.reports, args.out, args.metric), end="")
            return EXIT_OK
        config = load_config(args.config, _flag_overrides(args))
        if args.command == "pretrain":
            path = cmd_pretrain(config, args.out)
        elif args.command == "run":
            path = cmd_run(config, args.out)
        else:
            path = cmd_sweep_batchsize(config, args.out, args.sizes)
        print(path)
        return EXIT_OK
    except (ConfigError, SchemaVersionError, FileNotFoundError) as exc:
        print(f"etage: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, AdaptationDivergenceError, FloatingPointError, EtageError) as exc:
        print(f"etage: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
