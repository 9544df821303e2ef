"""Spot-fleet lifecycle and cost accounting.

A fleet holds a target capacity of one machine type under a max-price bid.
All state changes happen in :meth:`Fleet.tick`, :meth:`Fleet.cancel` and
:meth:`Fleet.set_target_capacity`; the market is a pure function of
``(seed, time)`` so replays are exact.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

from .errors import FleetAlreadyActive, FleetCancelled
from .specfiles import FleetSpec, MachineType, RunConfig

MONITORING_RATE_PER_MACHINE_HOUR = 0.0001
DEFAULT_STARTUP_DELAY_S = 30.0

PENDING, RUNNING, TERMINATED = "pending", "running", "terminated"
CAPACITY_REDUCED = "capacity_reduced"
MARKET_INTERRUPTED = "market_interrupted"
FLEET_CANCELLED = "fleet_cancelled"


@dataclass(frozen=True)
class MarketModel:
    """Seeded spot price path, piecewise constant over ``price_step_s`` windows.

    ``schedule`` pins the price explicitly: a sorted sequence of
    ``(start_time, price)`` pairs that overrides the random path.
    """

    seed: int = 0
    base_price_per_hour: float = 0.10
    volatility: float = 0.0
    spike_probability: float = 0.0
    spike_multiplier: float = 5.0
    price_step_s: float = 300.0
    interruption_hazard_per_hour: float = 0.0
    schedule: tuple[tuple[float, float], ...] = ()

    def price(self, t: float) -> float:
        if self.schedule:
            current = self.base_price_per_hour
            for start, p in self.schedule:
                if start <= t:
                    current = p
                else:
                    break
            return current
        step = math.floor(t / self.price_step_s)
        rng = random.Random(f"{self.seed}:price:{step}")
        p = self.base_price_per_hour
        if self.volatility:
            p *= math.exp(self.volatility * rng.gauss(0.0, 1.0))
        if rng.random() < self.spike_probability:
            p *= self.spike_multiplier
        return round(max(p, 0.0), 6)

    def hazard_hits(self, instance_id: str, now: float, dt: float) -> bool:
        """Independent per-instance interruption draw for the interval ending at ``now``."""
        if self.interruption_hazard_per_hour <= 0 or dt <= 0:
            return False
        p = 1.0 - math.exp(-self.interruption_hazard_per_hour * dt / 3600.0)
        rng = random.Random(f"{self.seed}:hazard:{instance_id}:{round(now * 1000)}")
        return rng.random() < p


@dataclass
class Instance:
    instance_id: str
    state: str
    launch_time: float
    price_per_hour: float
    ready_time: float | None = None
    termination_time: float | None = None
    termination_reason: str = "none"


@dataclass(frozen=True)
class FleetEvent:
    time: float
    instance_id: str
    transition: str  # launch | running | terminate
    reason: str
    price: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LedgerEntry:
    instance_id: str
    seconds_billed: int
    price_per_hour: float
    compute_cost: float


@dataclass(frozen=True)
class CostLedger:
    entries: tuple[LedgerEntry, ...]
    monitoring_overhead: float
    total: float

    @property
    def compute_cost(self) -> float:
        return sum(e.compute_cost for e in self.entries)

    @property
    def machine_seconds(self) -> int:
        return sum(e.seconds_billed for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "machine_seconds": self.machine_seconds,
            "compute_cost": self.compute_cost,
            "monitoring_overhead": self.monitoring_overhead,
            "total": self.total,
        }


def billed_seconds(start: float, end: float) -> int:
    """Per-second billing; a started second is a billed second."""
    return max(0, math.ceil(round(end - start, 6)))


class Fleet:
    def __init__(
        self,
        fleet_id: str,
        machine_type: MachineType,
        target_capacity: int,
        max_price_per_hour: float,
        startup_delay_s: float = DEFAULT_STARTUP_DELAY_S,
    ) -> None:
        self.fleet_id = fleet_id
        self.machine_type = machine_type
        self.target_capacity = target_capacity
        self.max_price_per_hour = max_price_per_hour
        self.startup_delay_s = startup_delay_s
        self.state = "active"
        self.instances: dict[str, Instance] = {}
        self.events: list[FleetEvent] = []
        self._next_instance = 0
        self._last_tick: float | None = None

    @property
    def active(self) -> bool:
        return self.state == "active"

    def live(self) -> list[Instance]:
        return [i for i in self.instances.values() if i.state != TERMINATED]

    def running(self) -> list[Instance]:
        return [i for i in self.instances.values() if i.state == RUNNING]

    def set_target_capacity(self, n: int) -> None:
        if not self.active:
            raise FleetCancelled(self.fleet_id)
        if n < 0:
            raise ValueError("target capacity must be >= 0")
        self.target_capacity = n

    def _terminate(self, inst: Instance, now: float, reason: str, price: float) -> FleetEvent:
        inst.state = TERMINATED
        inst.termination_time = now
        inst.termination_reason = reason
        ev = FleetEvent(now, inst.instance_id, "terminate", reason, price)
        self.events.append(ev)
        return ev

    def tick(
        self,
        market: MarketModel,
        now: float,
        live_slots: Callable[[str], int] = lambda _iid: 0,
    ) -> list[FleetEvent]:
        """Reconcile the fleet against the market and the target capacity.

        Order: market interruption, scale-down, launch, pending->running.
        ``live_slots`` reports attached agents per instance; scale-down kills
        the emptiest instances first.
        """
        if not self.active:
            raise FleetCancelled(self.fleet_id)
        dt = 0.0 if self._last_tick is None else now - self._last_tick
        self._last_tick = now
        price = market.price(now)
        out: list[FleetEvent] = []

        if price > self.max_price_per_hour:
            for inst in sorted(self.live(), key=lambda i: i.instance_id):
                out.append(self._terminate(inst, now, MARKET_INTERRUPTED, price))
        else:
            for inst in sorted(self.live(), key=lambda i: i.instance_id):
                if market.hazard_hits(inst.instance_id, now, dt):
                    out.append(self._terminate(inst, now, MARKET_INTERRUPTED, price))

        live = self.live()
        excess = len(live) - self.target_capacity
        if excess > 0:
            victims = sorted(live, key=lambda i: (live_slots(i.instance_id), i.instance_id))
            for inst in victims[:excess]:
                out.append(self._terminate(inst, now, CAPACITY_REDUCED, price))

        deficit = self.target_capacity - len(self.live())
        if deficit > 0 and price <= self.max_price_per_hour:
            for _ in range(deficit):
                self._next_instance += 1
                iid = f"i-{self._next_instance:06d}"
                self.instances[iid] = Instance(iid, PENDING, now, price)
                ev = FleetEvent(now, iid, "launch", "none", price)
                self.events.append(ev)
                out.append(ev)

        for inst in sorted(self.instances.values(), key=lambda i: i.instance_id):
            if inst.state == PENDING and inst.launch_time + self.startup_delay_s <= now:
                inst.state = RUNNING
                inst.ready_time = now
                ev = FleetEvent(now, inst.instance_id, "running", "none", price)
                self.events.append(ev)
                out.append(ev)
        return out

    def cancel(self, now: float, price: float = 0.0) -> list[FleetEvent]:
        if not self.active:
            return []
        self.state = "cancelled"
        return [self._terminate(i, now, FLEET_CANCELLED, price)
                for i in sorted(self.live(), key=lambda i: i.instance_id)]

    def accrue_cost(self, now: float) -> CostLedger:
        entries = []
        for inst in sorted(self.instances.values(), key=lambda i: i.instance_id):
            end = inst.termination_time if inst.termination_time is not None else now
            secs = billed_seconds(inst.launch_time, end)
            entries.append(LedgerEntry(
                inst.instance_id, secs, inst.price_per_hour, secs / 3600.0 * inst.price_per_hour
            ))
        return ledger_from_entries(entries)

    def event_lines(self) -> list[str]:
        return [json.dumps(ev.to_dict(), sort_keys=True) for ev in self.events]


def ledger_from_entries(entries: Iterable[LedgerEntry]) -> CostLedger:
    entries = tuple(entries)
    machine_seconds = sum(e.seconds_billed for e in entries)
    monitoring = machine_seconds / 3600.0 * MONITORING_RATE_PER_MACHINE_HOUR
    return CostLedger(entries, monitoring, sum(e.compute_cost for e in entries) + monitoring)


EMPTY_LEDGER = ledger_from_entries(())


@dataclass
class FleetService:
    """One fleet request per app name."""

    fleets: dict[str, Fleet] = field(default_factory=dict)

    def request_fleet(
        self,
        config: RunConfig,
        fleet_spec: FleetSpec,
        startup_delay_s: float = DEFAULT_STARTUP_DELAY_S,
    ) -> Fleet:
        existing = self.fleets.get(config.app_name)
        if existing is not None and existing.active:
            raise FleetAlreadyActive(config.app_name)
        fleet = Fleet(
            fleet_id=f"sfr-{config.app_name}-{fleet_spec.region}",
            machine_type=config.machine_type,
            target_capacity=config.fleet_size,
            max_price_per_hour=config.max_price_per_hour,
            startup_delay_s=startup_delay_s,
        )
        self.fleets[config.app_name] = fleet
        return fleet

    def get(self, app_name: str) -> Fleet | None:
        return self.fleets.get(app_name)
