"""Command-line entry point: ``run``, ``sweep`` and ``compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner
from .config import ConfigError
from .fedsim import RunFailure

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmpt", description="Federated multi-label prompt-tuning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one configured experiment")
    p.add_argument("config")

    p = sub.add_parser("sweep", help="repeat a run over one benchmark axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=sorted(runner.AXES))
    p.add_argument("--values", required=True, type=_values, help="comma-separated, e.g. 10,40,100")

    p = sub.add_parser("compare", help="metric deltas between two reports (b minus a)")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("-o", "--output", help="write the delta table here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            report = runner.run(args.config)
            final = report["records"][-1]
            print(f"round {final['round']}: mAP={final['mAP']:.4f} CF1={final['CF1']:.4f} OF1={final['OF1']:.4f}")
        elif args.command == "sweep":
            for row in runner.sweep(args.config, args.axis, args.values):
                status = row["status"]
                detail = f"mAP={row['mAP']:.4f}" if status == "ok" else status
                print(f"{args.axis}={row['value']:g}: {detail}")
        else:
            table = runner.compare(runner.load_report(args.report_a), runner.load_report(args.report_b))
            text = json.dumps(table, indent=2)
            if args.output:
                with open(args.output, "w", encoding="utf-8") as fh:
                    fh.write(text + "\n")
            else:
                print(text)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
