"""The four run commands plus the one-shot simulation, independent of argument parsing.

Every command checks its phase preconditions before touching any state and
returns a process exit code:

    0  success
    1  run finished with failures or dead letters
    2  bad input (parse errors, validation diagnostics)
    3  phase violation or name collision
"""
from __future__ import annotations

import json
import os
import shutil
import signal
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from filelock import FileLock, Timeout

from .backends import Backend, SimBackend, SimOptions, World, make_backend
from .errors import DSError, FleetAlreadyActive, QueueDeleted
from .specfiles import (
    FleetSpec,
    JobSpec,
    RunConfig,
    expand_jobs,
    parse_fleet_spec,
    parse_job_spec,
    parse_run_config,
    validate_run,
)

EXIT_OK, EXIT_FAILURES, EXIT_BAD_INPUT, EXIT_PHASE = 0, 1, 2, 3
PHASES = ("setup_done", "jobs_submitted", "cluster_started", "torn_down")
DEFAULT_STATE_DIR = ".ds-state"


def default_state_dir() -> Path:
    return Path(os.environ.get("DS_STATE_DIR", DEFAULT_STATE_DIR))


@dataclass
class RunState:
    app_name: str
    backend: str
    config_path: str
    fleet_path: str
    job_path: str | None = None
    backend_options: dict = field(default_factory=dict)
    phases: dict[str, bool] = field(default_factory=lambda: {p: False for p in PHASES})

    @staticmethod
    def path(run_dir: Path) -> Path:
        return run_dir / "run.json"

    @classmethod
    def load(cls, run_dir: Path) -> "RunState":
        return cls(**json.loads(cls.path(run_dir).read_text()))

    def save(self, run_dir: Path) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        self.path(run_dir).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


class CommandError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CommandError(EXIT_BAD_INPUT, f"cannot read {path}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        return parse_run_config(_read(path))
    except DSError as exc:
        raise CommandError(EXIT_BAD_INPUT, f"{path}: {type(exc).__name__}: {exc}") from exc


def load_fleet(path: str | Path) -> FleetSpec:
    try:
        return parse_fleet_spec(_read(path))
    except DSError as exc:
        raise CommandError(EXIT_BAD_INPUT, f"{path}: {type(exc).__name__}: {exc}") from exc


def load_jobs(path: str | Path) -> JobSpec:
    try:
        return parse_job_spec(_read(path))
    except DSError as exc:
        raise CommandError(EXIT_BAD_INPUT, f"{path}: {type(exc).__name__}: {exc}") from exc


class Session:
    """Binds a state directory to one run and exposes the commands."""

    def __init__(self, state_dir: str | Path | None = None, out: Callable[[str], None] = print) -> None:
        self.state_dir = Path(state_dir) if state_dir is not None else default_state_dir()
        self.out = out

    def run_dir(self, app_name: str) -> Path:
        return self.state_dir / app_name

    def resolve_app(self, config_path: str | Path | None) -> str:
        if config_path is not None:
            return load_config(config_path).app_name
        runs = sorted(p.parent.name for p in self.state_dir.glob("*/run.json"))
        if len(runs) != 1:
            raise CommandError(EXIT_BAD_INPUT, "pass --config to choose the run")
        return runs[0]

    def _open(self, app_name: str) -> tuple[RunState, Backend]:
        run_dir = self.run_dir(app_name)
        if not RunState.path(run_dir).exists():
            raise CommandError(EXIT_PHASE, f"no run named {app_name!r}; run setup first")
        run = RunState.load(run_dir)
        return run, _backend(run.backend, run_dir, run.backend_options)

    # -- commands ------------------------------------------------------------
    def setup(
        self,
        config_path: str | Path,
        fleet_path: str | Path,
        backend: str = "sim",
        backend_options: dict | None = None,
        force: bool = False,
    ) -> int:
        config = load_config(config_path)
        fleet_spec = load_fleet(fleet_path)
        diags = validate_run(config, fleet_spec)
        for d in diags:
            self.out(str(d))
        if any(d.severity == "error" for d in diags):
            raise CommandError(EXIT_BAD_INPUT, "validation failed")
        run_dir = self.run_dir(config.app_name)
        if RunState.path(run_dir).exists():
            if not force:
                raise CommandError(EXIT_PHASE, f"run {config.app_name!r} already exists (use --force)")
            _stop_daemon(run_dir)
            shutil.rmtree(run_dir)

        handle = _backend(backend, run_dir, backend_options)
        run_dir.mkdir(parents=True, exist_ok=True)
        world = World(
            app_name=config.app_name,
            backend=backend,
            config=config,
            fleet_spec=fleet_spec,
            store=handle.new_store(),
            created_at=0.0 if backend == "sim" else time.time(),
        )
        queue = world.queues.create_queue(config.queue_name, config.visibility_timeout_s,
                                          config.max_receive_count)
        taskdef = world.cluster.register_task_definition(config)
        handle.install(world)
        RunState(
            app_name=config.app_name,
            backend=backend,
            config_path=str(Path(config_path).resolve()),
            fleet_path=str(Path(fleet_path).resolve()),
            backend_options=dict(backend_options or {}),
            phases={**{p: False for p in PHASES}, "setup_done": True},
        ).save(run_dir)
        self.out(f"queue: {queue.name} (dead letters after {queue.max_receive_count} receives)")
        self.out(f"task definition: {taskdef.taskdef_id} ({taskdef.cpu_units} cpu, {taskdef.memory_mb} MB)")
        self.out(f"telemetry: {config.app_name}")
        return EXIT_OK

    def submit_jobs(self, job_path: str | Path, config_path: str | Path | None = None,
                    requeue: bool = False) -> int:
        run, backend = self._open(self.resolve_app(config_path))
        if not run.phases["setup_done"] or run.phases["torn_down"]:
            raise CommandError(EXIT_PHASE, "submit-jobs needs a set-up, live run")
        if run.phases["jobs_submitted"] and not requeue:
            raise CommandError(EXIT_PHASE, "jobs already submitted (use --requeue to add more)")
        job = load_jobs(job_path)
        with backend.transaction() as world:
            messages = expand_jobs(job, world.config)
            now = backend.now(world)
            try:
                for msg in messages:
                    world.queue.enqueue(msg, now)
            except QueueDeleted as exc:
                raise CommandError(EXIT_PHASE, f"queue is gone: {exc}") from exc
            world.submitted += len(messages)
        run.job_path = str(Path(job_path).resolve())
        run.phases["jobs_submitted"] = True
        run.save(self.run_dir(run.app_name))
        self.out(f"submitted {len(messages)} tasks")
        return EXIT_OK

    def start_cluster(self, config_path: str | Path | None = None) -> int:
        run, backend = self._open(self.resolve_app(config_path))
        if not run.phases["setup_done"] or run.phases["cluster_started"]:
            raise CommandError(EXIT_PHASE, "start-cluster needs setup and may run only once")
        with backend.transaction() as world:
            try:
                fleet = world.fleets.request_fleet(world.config, world.fleet_spec, backend.startup_delay_s)
            except FleetAlreadyActive as exc:
                raise CommandError(EXIT_PHASE, f"fleet already active for {exc}") from exc
            fleet_id = fleet.fleet_id
        run.phases["cluster_started"] = True
        run.save(self.run_dir(run.app_name))
        backend.start_cluster()
        self.out(f"fleet: {fleet_id} (target {fleet.target_capacity})")
        return EXIT_OK

    def monitor(
        self,
        config_path: str | Path | None = None,
        report_path: str | Path | None = None,
        delete_logs: bool = False,
        export_dir: str | Path | None = None,
    ) -> int:
        run, backend = self._open(self.resolve_app(config_path))
        if not run.phases["cluster_started"]:
            raise CommandError(EXIT_PHASE, "monitor needs a started cluster")
        run_dir = self.run_dir(run.app_name)
        report_path = Path(report_path) if report_path else run_dir / "final_report.json"
        if export_dir is None:
            export_dir = report_path.with_name(report_path.stem + "_telemetry")
        lock = FileLock(str(run_dir / "monitor.lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout as exc:
            raise CommandError(EXIT_PHASE, "another monitor is running for this run") from exc
        try:
            report = backend.run_monitor(delete_logs=delete_logs, export_dir=export_dir)
        finally:
            lock.release()
        if not run.phases["torn_down"]:
            run.phases["torn_down"] = True
            run.save(run_dir)
        write_report(report, report_path)
        self.out(
            f"torn down: {report['tasks']['succeeded']} succeeded, {report['tasks']['failed']} failed, "
            f"{report['tasks']['skipped']} skipped, {len(report['dlq'])} dead-lettered, "
            f"total ${report['ledger']['total']:.6f}"
        )
        return report["exit_code"]

    def simulate(
        self,
        config_path: str | Path,
        fleet_path: str | Path,
        job_path: str | Path,
        seed: int = 0,
        report_path: str | Path | None = None,
        backend_options: dict | None = None,
        export_dir: str | Path | None = None,
    ) -> int:
        opts = dict(backend_options or {})
        opts["seed"] = seed
        self.setup(config_path, fleet_path, "sim", opts, force=True)
        self.submit_jobs(job_path, config_path)
        self.start_cluster(config_path)
        return self.monitor(config_path, report_path, export_dir=export_dir)


def _backend(kind: str, run_dir: Path, options: dict | None) -> Backend:
    try:
        return make_backend(kind, run_dir, options)
    except (TypeError, ValueError) as exc:
        raise CommandError(EXIT_BAD_INPUT, f"backend options: {exc}") from exc


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_bytes(report).decode())


def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()


def _stop_daemon(run_dir: Path) -> None:
    pid_file = run_dir / "daemon.pid"
    if not pid_file.exists():
        return
    try:
        os.kill(int(pid_file.read_text()), signal.SIGTERM)
    except (OSError, ValueError):
        pass


def simulate_run(
    config: RunConfig,
    fleet_spec: FleetSpec,
    job: JobSpec,
    options: SimOptions = SimOptions(),
    export_dir: str | Path | None = None,
    delete_logs: bool = False,
) -> tuple[dict, SimBackend]:
    """In-memory setup -> submit -> start -> monitor; returns (report, backend)."""
    backend = SimBackend(None, options)
    world = World(config.app_name, "sim", config, fleet_spec, backend.new_store(), created_at=0.0)
    world.queues.create_queue(config.queue_name, config.visibility_timeout_s, config.max_receive_count)
    world.cluster.register_task_definition(config)
    backend.install(world)
    with backend.transaction() as w:
        for msg in expand_jobs(job, config):
            w.queue.enqueue(msg, w.clock)
            w.submitted += 1
        w.fleets.request_fleet(config, fleet_spec, options.startup_delay_s)
    report = backend.run_monitor(delete_logs=delete_logs, export_dir=export_dir)
    return report, backend
