"""``ds`` command line: setup, submit-jobs, start-cluster, monitor, simulate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .lifecycle import EXIT_BAD_INPUT, CommandError, Session


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run config file (JSON)")
    parser.add_argument("--fleet", help="fleet file (JSON)")
    parser.add_argument("--jobs", help="job file (JSON)")
    parser.add_argument("--backend", choices=("sim", "local"), default="sim")
    parser.add_argument("--backend-options", help="JSON file with backend knobs (market, executor, agent)")
    parser.add_argument("--seed", type=int, default=None, help="simulation seed")
    parser.add_argument("--report", help="where monitor/simulate write the final report")
    parser.add_argument("--export-dir", help="telemetry export directory (default: next to the report)")
    parser.add_argument("--state-dir", help="run state directory (default: $DS_STATE_DIR or ./.ds-state)")
    parser.add_argument("--force", action="store_true", help="setup: replace an existing run")
    parser.add_argument("--delete-logs", action="store_true", help="monitor: drop logs after export")
    parser.add_argument("--requeue", action="store_true", help="submit-jobs: allow another submission")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ds", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, aliases, help_ in (
        ("setup", [], "create the queue, task definition and telemetry for a run"),
        ("submit-jobs", ["submitJobs"], "expand the job file and enqueue one message per task"),
        ("start-cluster", ["startCluster"], "request the fleet; agents start as machines come up"),
        ("monitor", [], "downscale as the queue drains, then tear everything down"),
        ("simulate", [], "setup, submit-jobs, start-cluster and monitor on the simulated backend"),
    ):
        _common(sub.add_parser(name, aliases=aliases, help=help_))
    return parser


_CANONICAL = {"submitJobs": "submit-jobs", "startCluster": "start-cluster"}


def _need(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise CommandError(EXIT_BAD_INPUT, f"{args.command} requires {', '.join(missing)}")


def _options(args: argparse.Namespace) -> dict:
    opts: dict = {}
    if args.backend_options:
        try:
            opts = json.loads(Path(args.backend_options).read_text())
        except (OSError, ValueError) as exc:
            raise CommandError(EXIT_BAD_INPUT, f"--backend-options: {exc}") from exc
    if args.seed is not None:
        opts["seed"] = args.seed
    return opts


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    command = _CANONICAL.get(args.command, args.command)
    session = Session(args.state_dir)
    try:
        if command == "setup":
            _need(args, "config", "fleet")
            opts = _options(args)
            if args.backend == "local":
                opts.pop("seed", None)
            return session.setup(args.config, args.fleet, args.backend, opts, args.force)
        if command == "submit-jobs":
            _need(args, "jobs")
            return session.submit_jobs(args.jobs, args.config, args.requeue)
        if command == "start-cluster":
            return session.start_cluster(args.config)
        if command == "monitor":
            return session.monitor(args.config, args.report, args.delete_logs, args.export_dir)
        _need(args, "config", "fleet", "jobs")
        opts = _options(args)
        seed = opts.pop("seed", 0)
        if args.state_dir is None:
            import tempfile
            with tempfile.TemporaryDirectory(prefix="ds-sim-") as tmp:
                return Session(tmp).simulate(args.config, args.fleet, args.jobs, seed,
                                             args.report, opts, args.export_dir)
        return session.simulate(args.config, args.fleet, args.jobs, seed, args.report, opts, args.export_dir)
    except CommandError as exc:
        print(f"ds {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
