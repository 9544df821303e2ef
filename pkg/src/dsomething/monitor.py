"""Downscale the fleet as the queue drains; tear everything down once idle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .fleet import EMPTY_LEDGER, CAPACITY_REDUCED, FLEET_CANCELLED, MARKET_INTERRUPTED, CostLedger, Fleet
from .placement import ClusterState
from .queue import QueueCounts, WorkQueue
from .specfiles import RunConfig
from .telemetry import Telemetry

WATCHING, DRAINING, TORN_DOWN = "watching", "draining", "torn_down"
_ORDER = {WATCHING: 0, DRAINING: 1, TORN_DOWN: 2}


@dataclass
class MonitorState:
    period_s: int
    hysteresis_ticks: int
    consecutive_idle: int = 0
    phase: str = WATCHING
    delete_logs: bool = False
    started_at: float | None = None
    torn_down_at: float | None = None
    ticks: int = 0
    dead_letter_task_ids: list[str] = field(default_factory=list)
    final_ledger: CostLedger | None = None

    @classmethod
    def for_config(cls, config: RunConfig, delete_logs: bool = False) -> "MonitorState":
        return cls(config.monitor_period_s, config.teardown_hysteresis_ticks, delete_logs=delete_logs)

    def advance(self, phase: str) -> None:
        if _ORDER[phase] < _ORDER[self.phase]:
            raise ValueError(f"monitor cannot move from {self.phase} back to {phase}")
        self.phase = phase


@dataclass(frozen=True)
class MonitorAction:
    kind: str  # set_target | export | cancel_fleet | stop_placements | purge_queue | delete_logs | final_ledger
    detail: Any = None


def desired_capacity(demand: int, tasks_per_machine: int, fleet_size: int) -> int:
    return min(fleet_size, math.ceil(demand / tasks_per_machine))


def monitor_tick(
    state: MonitorState,
    config: RunConfig,
    queue: WorkQueue,
    fleet: Fleet,
    cluster: ClusterState,
    telemetry: Telemetry,
    now: float,
    export_dir: str | Path | None = None,
) -> list[MonitorAction]:
    """One observation: record metrics, maybe lower the target, maybe tear down.

    Never raises the target. Teardown fires once ``hysteresis_ticks``
    consecutive ticks have seen zero visible and zero in-flight messages.
    """
    if state.phase == TORN_DOWN:
        return []
    if state.started_at is None:
        state.started_at = now
    state.ticks += 1
    actions: list[MonitorAction] = []

    counts = queue.counts(now) if not queue.deleted else QueueCounts(0, 0, 0)
    demand = counts.visible + counts.in_flight
    ledger = fleet.accrue_cost(now)
    telemetry.put_metric("queue_visible", counts.visible, now)
    telemetry.put_metric("queue_in_flight", counts.in_flight, now)
    telemetry.put_metric("queue_dlq", counts.dlq, now)
    telemetry.put_metric("fleet_running", len(fleet.running()), now)
    telemetry.put_metric("fleet_target", fleet.target_capacity, now)
    telemetry.put_metric("cost_total", ledger.total, now)

    if fleet.active:
        desired = desired_capacity(demand, config.tasks_per_machine, config.fleet_size)
        if desired < fleet.target_capacity:
            fleet.set_target_capacity(desired)
            actions.append(MonitorAction("set_target", desired))
            if state.phase == WATCHING:
                state.advance(DRAINING)

    state.consecutive_idle = state.consecutive_idle + 1 if demand == 0 else 0
    if state.consecutive_idle >= state.hysteresis_ticks:
        actions.extend(teardown(state, config, queue, fleet, cluster, telemetry, now, export_dir))
    return actions


def teardown(
    state: MonitorState,
    config: RunConfig,
    queue: WorkQueue,
    fleet: Fleet,
    cluster: ClusterState,
    telemetry: Telemetry,
    now: float,
    export_dir: str | Path | None = None,
) -> list[MonitorAction]:
    if state.phase == TORN_DOWN:
        return []
    if state.phase == WATCHING:
        state.advance(DRAINING)
    actions = []
    if export_dir is not None:
        manifest = telemetry.export(export_dir)
        actions.append(MonitorAction("export", manifest["file_count"]))
    events = fleet.cancel(now)
    actions.append(MonitorAction("cancel_fleet", len(events)))
    taskdef = cluster.task_definitions.get(config.app_name)
    if taskdef is not None:
        stops = cluster.reconcile(fleet.instances.values(), taskdef, config.tasks_per_machine)
        actions.append(MonitorAction("stop_placements", len(stops)))
    dead = queue.purge_and_delete(now)
    state.dead_letter_task_ids = [m.body.task_id for m in dead]
    actions.append(MonitorAction("purge_queue", list(state.dead_letter_task_ids)))
    if state.delete_logs:
        telemetry.delete_logs()
        actions.append(MonitorAction("delete_logs"))
    state.final_ledger = fleet.accrue_cost(now)
    actions.append(MonitorAction("final_ledger", state.final_ledger.total))
    state.torn_down_at = now
    state.advance(TORN_DOWN)
    return actions


def build_final_report(world: Any) -> dict[str, Any]:
    """Assemble the end-of-run document from a torn-down world."""
    state: MonitorState = world.monitor
    fleet: Fleet | None = world.fleet
    ledger = state.final_ledger or (fleet.accrue_cost(state.torn_down_at or 0.0) if fleet else EMPTY_LEDGER)
    events = fleet.events if fleet else []
    terminations = [e for e in events if e.transition == "terminate"]
    tallies = world.tallies.to_dict()
    exit_code = 0 if not state.dead_letter_task_ids and tallies["failed"] == 0 else 1
    started = world.created_at
    finished = state.torn_down_at
    return {
        "app_name": world.app_name,
        "backend": world.backend,
        "tasks": {"submitted": world.submitted, **tallies},
        "dlq": list(state.dead_letter_task_ids),
        "ledger": ledger.to_dict(),
        "timings": {
            "run_started_at": started,
            "monitor_started_at": state.started_at,
            "torn_down_at": finished,
            "wall_seconds": None if finished is None else finished - started,
            "monitor_ticks": state.ticks,
        },
        "fleet": {
            "instances_launched": sum(1 for e in events if e.transition == "launch"),
            "market_interrupted": sum(1 for e in terminations if e.reason == MARKET_INTERRUPTED),
            "interrupted_mid_task": world.interrupted_mid_task,
            "capacity_reduced": sum(1 for e in terminations if e.reason == CAPACITY_REDUCED),
            "fleet_cancelled": sum(1 for e in terminations if e.reason == FLEET_CANCELLED),
            "events": [e.to_dict() for e in events],
        },
        "placements": [a.to_dict() for a in world.placement_log],
        "exit_code": exit_code,
    }
