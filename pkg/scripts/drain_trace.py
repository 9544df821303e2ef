"""Print how queue depth, fleet target and running machines evolve during a run.

Useful for seeing the monitor's downscaling and teardown timing for a given
config. Reads the series the monitor records on every tick.

    python scripts/drain_trace.py --seed 7 --period 30
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from dsomething.backends import SimOptions
from dsomething.lifecycle import load_config, load_fleet, load_jobs, simulate_run
from dsomething.worker import SimulatedExecutor

SAMPLE = Path(__file__).resolve().parent / "sample"
SERIES = ("queue_visible", "queue_in_flight", "fleet_target", "fleet_running", "cost_total")


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(SAMPLE / "config.json"))
    p.add_argument("--fleet", default=str(SAMPLE / "fleet.json"))
    p.add_argument("--jobs", default=str(SAMPLE / "jobs.json"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, help="override monitor_period_s")
    p.add_argument("--hysteresis", type=int, help="override teardown_hysteresis_ticks")
    p.add_argument("--durations", type=int, nargs=2, default=(60, 300), metavar=("MIN", "MAX"))
    args = p.parse_args(argv)

    config = load_config(args.config)
    if args.period is not None:
        config = dataclasses.replace(config, monitor_period_s=args.period)
    if args.hysteresis is not None:
        config = dataclasses.replace(config, teardown_hysteresis_ticks=args.hysteresis)
    options = SimOptions(executor=SimulatedExecutor(duration_s=tuple(args.durations))).with_seed(args.seed)
    report, backend = simulate_run(config, load_fleet(args.fleet), load_jobs(args.jobs), options)

    series = backend._world.telemetry.series
    times = [t for t, _ in series["queue_visible"].points]
    print(f"{'t':>7} " + " ".join(f"{name:>15}" for name in SERIES))
    for i, t in enumerate(times):
        cells = []
        for name in SERIES:
            value = series[name].points[i][1]
            cells.append(f"{value:15.5f}" if name == "cost_total" else f"{value:15d}")
        print(f"{t:7.0f} " + " ".join(cells))
    print(f"torn down at t={report['timings']['torn_down_at']:g}s, "
          f"{report['tasks']['succeeded']} succeeded, total ${report['ledger']['total']:.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
