"""Command line: ``secchain run | logs | compare``."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import WorkloadMismatch, compare, query_logs, run_scenario
from .records import KINDS, SEVERITIES
from .simengine import EventOverflow
from .topology import ConfigError

EXIT_CONFIG = 2
EXIT_ABORT = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="secchain", description="Security chain simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a built-in scenario or a config file")
    r.add_argument("scenario", help="burst7a, scalein7b, failure8, web9, email10, or a JSON path")
    r.add_argument("--out", default=None, help="output directory (default: ./out/<scenario>)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--duration", type=float, default=None)
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path; value parsed as JSON")
    r.add_argument("--variant", dest="variants", action="append", default=None,
                   help="run only the named variant (repeatable)")

    lg = sub.add_parser("logs", help="query a log file")
    lg.add_argument("file")
    lg.add_argument("--from", dest="start", type=float, default=None)
    lg.add_argument("--to", dest="end", type=float, default=None)
    lg.add_argument("--severity", choices=SEVERITIES, default=None)
    lg.add_argument("--kind", choices=KINDS, default=None)
    lg.add_argument("--source", default=None)

    c = sub.add_parser("compare", help="overheads of a run against a baseline run")
    c.add_argument("run")
    c.add_argument("baseline")
    return p


def _cmd_run(args: argparse.Namespace) -> int:
    out = args.out
    if out is None:
        out = f"out/{args.scenario.rsplit('/', 1)[-1].removesuffix('.json')}"
    results = run_scenario(args.scenario, out, args.seed, args.duration, args.overrides,
                           args.variants)
    for variant, res in results.items():
        means = res.summary["means"]
        shown = " ".join(f"{k}={v:.4g}" for k, v in means.items())
        print(f"{res.scenario}: {shown}")
    print(f"wrote {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "logs":
            for rec in query_logs(args.file, args.start, args.end, args.severity, args.kind,
                                  args.source):
                print(rec.line())
            return 0
        report = compare(args.run, args.baseline)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    except ConfigError as exc:
        for err in exc.errors or [exc]:
            where = f"{err.path}: " if err.path else ""
            print(f"config error: {where}{err.message}", file=sys.stderr)
        if args.command == "run":
            parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (WorkloadMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EventOverflow as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
