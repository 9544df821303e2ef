"""Execution backends.

Both backends keep all run state in one :class:`World` object. Persistent
backends pickle it under ``<state_dir>/<app_name>/world.pkl`` and guard every
access with a file lock, so separate CLI invocations (and, for the local
backend, the cluster daemon's agent threads) see one linearizable state.

* ``sim``: virtual clock. Nothing moves between commands; ``monitor`` runs the
  whole cluster (fleet ticks, placement, agents, monitor) on an event loop.
* ``local``: wall clock. ``start-cluster`` forks a daemon that ticks the fleet
  and runs agents as threads executing real subprocesses.
"""
from __future__ import annotations

import logging
import os
import pickle
import subprocess
import sys
import tempfile
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterator

from filelock import FileLock

from .clock import NEVER, EventLoop, Process, WallClock, drive
from .fleet import MARKET_INTERRUPTED, Fleet, FleetService, MarketModel
from .monitor import TORN_DOWN, MonitorState, build_final_report, monitor_tick
from .objectstore import FilesystemStore, MemoryStore, ObjectStore
from .placement import ClusterState, PlacementAction, TaskDefinition
from .queue import QueueService, WorkQueue
from .specfiles import FleetSpec, RunConfig
from .telemetry import Telemetry
from .worker import AgentReport, AgentSettings, LocalCommandExecutor, SimulatedExecutor, agent_loop

log = logging.getLogger(__name__)


class SimulationStalled(RuntimeError):
    pass


@dataclass
class World:
    app_name: str
    backend: str
    config: RunConfig
    fleet_spec: FleetSpec
    store: ObjectStore
    created_at: float
    clock: float = 0.0  # virtual time for the sim backend
    queues: QueueService = field(default_factory=QueueService)
    fleets: FleetService = field(default_factory=FleetService)
    cluster: ClusterState = field(default_factory=ClusterState)
    telemetry: Telemetry = field(default_factory=Telemetry)
    submitted: int = 0
    tallies: AgentReport = field(default_factory=AgentReport)
    interrupted_mid_task: int = 0
    placement_log: list[PlacementAction] = field(default_factory=list)
    monitor: MonitorState | None = None
    final_report: dict | None = None
    daemon_done: bool = False

    @property
    def queue(self) -> WorkQueue:
        return self.queues.get(self.config.queue_name)

    @property
    def fleet(self) -> Fleet | None:
        return self.fleets.get(self.app_name)

    @property
    def taskdef(self) -> TaskDefinition:
        return self.cluster.task_definitions[self.app_name]


# ---------------------------------------------------------------------------
# options


def _build(cls: type, data: dict | None) -> Any:
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} option(s): {', '.join(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class SimOptions:
    seed: int = 0
    startup_delay_s: float = 30.0
    fleet_tick_s: float = 10.0
    horizon_s: float = 30 * 86400.0
    market: MarketModel = MarketModel()
    executor: SimulatedExecutor = SimulatedExecutor()
    agent: AgentSettings = AgentSettings()

    def with_seed(self, seed: int) -> "SimOptions":
        return replace(
            self, seed=seed,
            market=replace(self.market, seed=seed),
            executor=replace(self.executor, seed=seed),
        )

    @classmethod
    def from_dict(cls, data: dict | None) -> "SimOptions":
        data = dict(data or {})
        market = dict(data.pop("market", {}) or {})
        if "schedule" in market:
            market["schedule"] = tuple(tuple(p) for p in market["schedule"])
        executor = dict(data.pop("executor", {}) or {})
        if "duration_s" in executor:
            executor["duration_s"] = tuple(executor["duration_s"])
        if "deny_list" in executor:
            executor["deny_list"] = frozenset(executor["deny_list"])
        agent = data.pop("agent", None)
        data["market"] = _build(MarketModel, market)
        data["executor"] = _build(SimulatedExecutor, executor)
        data["agent"] = _build(AgentSettings, agent)
        opts = _build(cls, data)
        # an explicit seed fans out unless the sub-models pin their own
        seed = opts.seed
        return replace(
            opts,
            market=opts.market if "seed" in market else replace(opts.market, seed=seed),
            executor=opts.executor if "seed" in executor else replace(opts.executor, seed=seed),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["executor"]["deny_list"] = sorted(self.executor.deny_list)
        return d


@dataclass(frozen=True)
class LocalOptions:
    startup_delay_s: float = 0.0
    fleet_tick_s: float = 0.5
    price_per_hour: float = 0.0
    store_root: str | None = None
    scratch_root: str | None = None
    daemon_wait_s: float = 30.0
    agent: AgentSettings = AgentSettings(poll_interval_s=0.5, max_empty_polls=5)

    @classmethod
    def from_dict(cls, data: dict | None) -> "LocalOptions":
        data = dict(data or {})
        agent = data.pop("agent", None)
        return _build(cls, {**data, "agent": _build(AgentSettings, agent) if agent else cls.agent})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# base


class Backend:
    kind = "base"

    def __init__(self, run_dir: str | Path | None) -> None:
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._world: World | None = None
        self._depth = 0
        self._pinned = False
        self._rlock = threading.RLock()
        self._flock = FileLock(str(self.run_dir / "world.lock")) if self.run_dir else None

    # -- persistence -------------------------------------------------------
    @property
    def world_path(self) -> Path:
        assert self.run_dir is not None
        return self.run_dir / "world.pkl"

    def _load(self) -> World:
        with open(self.world_path, "rb") as fh:
            return pickle.load(fh)

    def _save(self, world: World) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.run_dir, prefix=".world-")
        with os.fdopen(fd, "wb") as fh:
            pickle.dump(world, fh, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp, self.world_path)

    def install(self, world: World) -> None:
        with self._rlock:
            if self.run_dir is None:
                self._world = world
                return
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with self._flock:
                self._save(world)

    def exists(self) -> bool:
        if self.run_dir is None:
            return self._world is not None
        return self.world_path.exists()

    @contextmanager
    def transaction(self) -> Iterator[World]:
        """Exclusive access to the world; persisted on clean exit."""
        with self._rlock:
            if self._depth > 0 or self._pinned or self.run_dir is None:
                if self._world is None:
                    raise RuntimeError("no run state installed")
                self._depth += 1
                try:
                    yield self._world
                finally:
                    self._depth -= 1
                return
            with self._flock:
                world = self._load()
                self._world, self._depth = world, 1
                try:
                    yield world
                    self._save(world)
                finally:
                    self._depth = 0
                    self._world = None

    @contextmanager
    def pinned(self) -> Iterator[World]:
        """Hold the world in memory (and the file lock) for a long in-process run."""
        with self._rlock:
            if self.run_dir is None:
                assert self._world is not None
                yield self._world
                return
            with self._flock:
                self._world = self._load()
                self._pinned = True
                try:
                    yield self._world
                    self._save(self._world)
                finally:
                    self._pinned = False
                    self._world = None

    # -- backend-specific --------------------------------------------------
    def now(self, world: World) -> float:
        raise NotImplementedError

    def new_store(self) -> ObjectStore:
        raise NotImplementedError

    @property
    def startup_delay_s(self) -> float:
        raise NotImplementedError

    def start_cluster(self) -> None:
        pass

    def run_monitor(self, delete_logs: bool = False, export_dir: str | Path | None = None) -> dict:
        raise NotImplementedError


def _monitor_proc(backend: Backend, export_dir: str | Path | None, after_tick: Callable[[World], None]):
    while True:
        with backend.transaction() as world:
            monitor_tick(world.monitor, world.config, world.queue, world.fleet, world.cluster,
                         world.telemetry, backend.now(world), export_dir)
            after_tick(world)
            period = world.monitor.period_s
            done = world.monitor.phase == TORN_DOWN
        if done:
            return
        yield period


def _prepare_monitor(world: World, delete_logs: bool) -> None:
    if world.monitor is None:
        world.monitor = MonitorState.for_config(world.config, delete_logs)


# ---------------------------------------------------------------------------
# simulation


class SimBackend(Backend):
    kind = "sim"

    def __init__(self, run_dir: str | Path | None = None, options: SimOptions = SimOptions()) -> None:
        super().__init__(run_dir)
        self.options = options
        self._loop: EventLoop | None = None
        self._agents: dict[str, tuple[Process, AgentReport]] = {}

    def now(self, world: World) -> float:
        return self._loop.now() if self._loop is not None else world.clock

    def new_store(self) -> ObjectStore:
        return MemoryStore()

    @property
    def startup_delay_s(self) -> float:
        return self.options.startup_delay_s

    def run_monitor(self, delete_logs: bool = False, export_dir: str | Path | None = None) -> dict:
        with self.pinned() as world:
            if world.final_report is not None:
                return world.final_report
            _prepare_monitor(world, delete_logs)
            loop = self._loop = EventLoop(world.clock)
            try:
                loop.spawn(self._cluster_driver(world))
                mon = loop.spawn(_monitor_proc(self, export_dir, self._sync_agents))
                loop.run(until=lambda: not mon.alive, horizon=world.clock + self.options.horizon_s)
                world.clock = loop.now()
                if mon.alive:
                    raise SimulationStalled(
                        f"monitor did not tear down within {self.options.horizon_s}s of simulated time"
                    )
                self._sync_agents(world)
            finally:
                self._loop = None
            world.final_report = build_final_report(world)
            return world.final_report

    def _cluster_driver(self, world: World):
        opts = self.options
        while True:
            fleet = world.fleet
            if fleet is None or not fleet.active:
                self._sync_agents(world)
                return
            now = self._loop.now()
            events = fleet.tick(opts.market, now, world.cluster.live_placements)
            for ev in events:
                if ev.reason == MARKET_INTERRUPTED and self._busy_on(world, ev.instance_id):
                    world.interrupted_mid_task += 1
            actions = world.cluster.reconcile(
                fleet.instances.values(), world.taskdef, world.config.tasks_per_machine,
                fleet.machine_type.cpu_units, fleet.machine_type.memory_mb,
            )
            world.placement_log.extend(actions)
            self._sync_agents(world)
            yield opts.fleet_tick_s

    def _busy_on(self, world: World, instance_id: str) -> bool:
        for p in world.cluster.live_on(instance_id):
            entry = self._agents.get(p.placement_id)
            if entry is not None and entry[1].current_task is not None:
                return True
        return False

    def _sync_agents(self, world: World) -> None:
        """Kill agents whose placement stopped; spawn agents for new placements."""
        live = {p.placement_id: p for p in world.cluster.all_live()}
        for pid in sorted(self._agents):
            if pid not in live:
                proc, report = self._agents.pop(pid)
                proc.kill()
                world.tallies.merge(report)
        queue = world.queue
        for pid, placement in live.items():
            if pid in self._agents:
                continue
            report = AgentReport()
            gen = agent_loop(
                queue, world.store, self.options.executor, world.config, world.telemetry,
                self._loop.now, NEVER, instance_id=placement.instance_id,
                settings=self.options.agent, report=report,
            )
            world.cluster.mark_running(pid)
            proc = self._loop.spawn(gen, on_exit=self._on_agent_exit(world, pid))
            self._agents[pid] = (proc, report)

    def _on_agent_exit(self, world: World, pid: str) -> Callable[[Any], None]:
        def done(_report: Any) -> None:
            _proc, report = self._agents.pop(pid)
            world.tallies.merge(report)
            world.cluster.mark_stopped(pid, "agent_exited")
        return done


# ---------------------------------------------------------------------------
# local processes


class _Proxy:
    """Forward method calls to a world component inside a transaction."""

    def __init__(self, backend: Backend, getter: Callable[[World], Any]) -> None:
        self._backend = backend
        self._getter = getter

    def __getattr__(self, name: str) -> Callable[..., Any]:
        def call(*args: Any, **kwargs: Any) -> Any:
            with self._backend.transaction() as world:
                return getattr(self._getter(world), name)(*args, **kwargs)
        return call


class LocalBackend(Backend):
    kind = "local"

    def __init__(self, run_dir: str | Path, options: LocalOptions = LocalOptions()) -> None:
        super().__init__(run_dir)
        self.options = options
        self.clock = WallClock()

    def now(self, world: World) -> float:
        return self.clock.now()

    @property
    def store_root(self) -> Path:
        return Path(self.options.store_root) if self.options.store_root else self.run_dir / "store"

    @property
    def scratch_root(self) -> Path:
        return Path(self.options.scratch_root) if self.options.scratch_root else self.run_dir / "scratch"

    def new_store(self) -> ObjectStore:
        return FilesystemStore(self.store_root)

    @property
    def startup_delay_s(self) -> float:
        return self.options.startup_delay_s

    def start_cluster(self) -> None:
        logfile = open(self.run_dir / "daemon.log", "ab")
        proc = subprocess.Popen(
            [sys.executable, "-m", "dsomething.daemon", str(self.run_dir)],
            stdout=logfile, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
        logfile.close()
        (self.run_dir / "daemon.pid").write_text(str(proc.pid))

    def run_monitor(self, delete_logs: bool = False, export_dir: str | Path | None = None) -> dict:
        with self.transaction() as world:
            if world.final_report is not None:
                return world.final_report
            _prepare_monitor(world, delete_logs)
        drive(_monitor_proc(self, export_dir, lambda _w: None), self.clock)
        deadline = time.time() + self.options.daemon_wait_s
        while time.time() < deadline:
            with self.transaction() as world:
                if world.daemon_done:
                    break
            time.sleep(0.1)
        else:
            log.warning("cluster daemon did not confirm shutdown; tallies may be incomplete")
        with self.transaction() as world:
            world.final_report = build_final_report(world)
            return world.final_report

    # -- daemon side -------------------------------------------------------
    def run_daemon(self) -> None:
        """Tick the fleet, reconcile placements and run agent threads until cancelled."""
        market = MarketModel(base_price_per_hour=self.options.price_per_hour)
        executor = LocalCommandExecutor(str(self.scratch_root))
        self.scratch_root.mkdir(parents=True, exist_ok=True)
        queue = _Proxy(self, lambda w: w.queue)
        telemetry = _Proxy(self, lambda w: w.telemetry)
        threads: dict[str, tuple[threading.Thread, threading.Event]] = {}

        def agent(pid: str, instance_id: str, stop: threading.Event, config: RunConfig, store: ObjectStore) -> None:
            report = AgentReport()
            try:
                drive(agent_loop(queue, store, executor, config, telemetry, self.clock.now, stop,
                                 instance_id=instance_id, settings=self.options.agent, report=report),
                      self.clock, stop)
            except Exception:
                log.exception("agent %s crashed", pid)
            finally:
                with self.transaction() as world:
                    world.tallies.merge(report)
                    world.cluster.mark_stopped(pid, "agent_exited")

        while True:
            with self.transaction() as world:
                fleet = world.fleet
                active = fleet is not None and fleet.active
                if active:
                    fleet.tick(market, self.clock.now(), world.cluster.live_placements)
                    actions = world.cluster.reconcile(
                        fleet.instances.values(), world.taskdef, world.config.tasks_per_machine,
                        fleet.machine_type.cpu_units, fleet.machine_type.memory_mb,
                    )
                    world.placement_log.extend(actions)
                live = {p.placement_id: p.instance_id for p in world.cluster.all_live()}
                for pid in live:
                    world.cluster.mark_running(pid)
                config, store = world.config, world.store
            for pid, (thread, stop) in list(threads.items()):
                if pid not in live or not active:
                    stop.set()
                if not thread.is_alive():
                    thread.join()
                    del threads[pid]
            if active:
                for pid, instance_id in live.items():
                    if pid not in threads:
                        stop = threading.Event()
                        t = threading.Thread(target=agent, args=(pid, instance_id, stop, config, store),
                                             name=f"agent-{pid}", daemon=True)
                        threads[pid] = (t, stop)
                        t.start()
            elif not threads:
                break
            time.sleep(self.options.fleet_tick_s)
        with self.transaction() as world:
            world.daemon_done = True


def make_backend(kind: str, run_dir: str | Path | None, options: dict | None = None) -> Backend:
    if kind == "sim":
        return SimBackend(run_dir, SimOptions.from_dict(options))
    if kind == "local":
        if run_dir is None:
            raise ValueError("the local backend needs a state directory")
        return LocalBackend(run_dir, LocalOptions.from_dict(options))
    raise ValueError(f"unknown backend {kind!r}")
