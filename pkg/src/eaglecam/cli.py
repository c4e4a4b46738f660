"""Command line entry point.

    eaglecam-sim run <scenario> [--seed N] [--trace PATH] [--report PATH]
                     [--archive PATH] [--override key=value ...]
    eaglecam-sim replay <trace> <scenario> [--seed N] [--override key=value ...]

Exit status: 0 mission success (or replay PASS), 2 mission failure (or
trace mismatch), 1 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .mission import TraceMismatch, build_report, replay_trace, run_mission
from .scenario import ConfigInvalid, Scenario, load_scenario

EXIT_SUCCESS = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2


def _scenario(args: argparse.Namespace) -> Scenario:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_scenario(args.scenario, overrides)


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _scenario(args)
    mission = run_mission(scenario)
    report = build_report(mission)
    if args.trace:
        mission.trace.write(args.trace)
    if args.archive:
        mission.novac.mission_control.write_archive(args.archive)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    verdict = "SUCCESS" if report.success else "FAILURE"
    print(f"{verdict}: {report.rationale}", file=sys.stderr)
    return EXIT_SUCCESS if report.success else EXIT_FAILURE


def _cmd_replay(args: argparse.Namespace) -> int:
    scenario = _scenario(args)
    try:
        verdict = replay_trace(args.trace, scenario)
    except TraceMismatch as exc:
        print(f"MISMATCH: {exc}")
        return EXIT_FAILURE
    print(verdict)
    return EXIT_SUCCESS


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors, not mission failures."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eaglecam-sim", description="EagleCam mission simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings from the run")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and judge mission success")
    run.add_argument("scenario", type=Path)
    run.add_argument("--trace", type=Path, help="write the event trace here")
    run.add_argument("--report", type=Path, help="write the mission report here (default stdout)")
    run.add_argument("--archive", type=Path, help="write the mission-control packet archive here")
    run.set_defaults(func=_cmd_run)

    replay = sub.add_parser("replay", help="re-run a scenario and byte-compare against a trace")
    replay.add_argument("trace", type=Path)
    replay.add_argument("scenario", type=Path)
    replay.set_defaults(func=_cmd_replay)

    for p in (run, replay):
        p.add_argument("--seed", type=int)
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override one scenario key (repeatable)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
