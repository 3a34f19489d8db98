"""Command-line entry points: run, report, validate-dataset, ground-check."""

from __future__ import annotations

import argparse
import json
import sys

from .dataset import DatasetError
from .runner import ConfigError, RunConfig, ground_check, report, run, validate_datasets


def _cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    run_dir = run(config)
    print(f"run complete: {run_dir}")
    print(f"summary: {run_dir / 'summary.csv'}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    table, _csv_text = report(args.run_dir, weighted=args.weighted)
    print(table)
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    summaries = validate_datasets(args.manifest)
    bad = 0
    for s in summaries:
        status = "ok" if not s["ungrounded_golden"] else f"UNGROUNDED: {s['ungrounded_golden']}"
        bad += len(s["ungrounded_golden"])
        print(
            f"{s['category']}: {s['tasks']} tasks, {s['actions']} actions, "
            f"{s['domain_kind']}, {s['split']} [{status}]"
        )
    return 0 if bad == 0 else 1


def _cmd_ground_check(args: argparse.Namespace) -> int:
    mismatches = ground_check(args.run_dir)
    if mismatches:
        print(json.dumps(mismatches, indent=2))
        print(f"{len(mismatches)} executability mismatches")
        return 1
    print("all stored executability verdicts verified")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundplan",
        description="Grounded planning experiments over large action libraries",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a planner x benchmark grid")
    p_run.add_argument("--config", required=True, help="run config JSON file")
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="print tables and write report.csv for a run")
    p_report.add_argument("run_dir")
    p_report.add_argument(
        "--weighted", action="store_true", help="task-weighted instead of per-category mean"
    )
    p_report.set_defaults(func=_cmd_report)

    p_val = sub.add_parser("validate-dataset", help="check a benchmark manifest")
    p_val.add_argument("manifest")
    p_val.set_defaults(func=_cmd_validate)

    p_gc = sub.add_parser("ground-check", help="re-verify executability of stored results")
    p_gc.add_argument("run_dir")
    p_gc.set_defaults(func=_cmd_ground_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
