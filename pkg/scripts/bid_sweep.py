"""Sweep the max-price bid and report cost, interruptions and makespan.

Runs the sample workload on the simulated backend under a volatile spot
market, several seeds per bid, and prints one row per bid (means over seeds).

    python scripts/bid_sweep.py --bids 0.08 0.12 0.2 0.4 --seeds 5
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import statistics
import sys
from pathlib import Path

from dsomething.backends import SimOptions
from dsomething.fleet import MarketModel
from dsomething.lifecycle import load_config, load_fleet, load_jobs, simulate_run
from dsomething.worker import SimulatedExecutor

SAMPLE = Path(__file__).resolve().parent / "sample"


def run_one(config, fleet, job, bid: float, seed: int, args: argparse.Namespace) -> dict:
    config = dataclasses.replace(config, max_price_per_hour=bid)
    options = SimOptions(
        seed=seed,
        market=MarketModel(seed=seed, base_price_per_hour=args.base_price, volatility=args.volatility,
                           spike_probability=args.spike_probability, price_step_s=args.price_step),
        executor=SimulatedExecutor(seed=seed, duration_s=(args.min_duration, args.max_duration)),
    )
    report, _ = simulate_run(config, fleet, job, options)
    return {
        "makespan_h": report["timings"]["wall_seconds"] / 3600,
        "cost": report["ledger"]["total"],
        "launched": report["fleet"]["instances_launched"],
        "interrupted": report["fleet"]["market_interrupted"],
        "succeeded": report["tasks"]["succeeded"],
    }


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(SAMPLE / "config.json"))
    p.add_argument("--fleet", default=str(SAMPLE / "fleet.json"))
    p.add_argument("--jobs", default=str(SAMPLE / "jobs.json"))
    p.add_argument("--bids", type=float, nargs="+", default=[0.08, 0.10, 0.12, 0.15, 0.2, 0.3, 0.5])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--base-price", type=float, default=0.10)
    p.add_argument("--volatility", type=float, default=0.3)
    p.add_argument("--spike-probability", type=float, default=0.05)
    p.add_argument("--price-step", type=float, default=300.0)
    p.add_argument("--min-duration", type=int, default=60)
    p.add_argument("--max-duration", type=int, default=600)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)

    config, fleet, job = load_config(args.config), load_fleet(args.fleet), load_jobs(args.jobs)
    rows = []
    for bid in args.bids:
        runs = [run_one(config, fleet, job, bid, seed, args) for seed in range(args.seeds)]
        row = {"bid": bid}
        for key in runs[0]:
            row[key] = statistics.fmean(r[key] for r in runs)
        rows.append(row)

    header = f"{'bid':>6} {'makespan_h':>10} {'cost_usd':>9} {'launched':>8} {'interrupted':>11} {'succeeded':>9}"
    print(header)
    for r in rows:
        print(f"{r['bid']:6.2f} {r['makespan_h']:10.2f} {r['cost']:9.4f} {r['launched']:8.1f} "
              f"{r['interrupted']:11.1f} {r['succeeded']:9.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
