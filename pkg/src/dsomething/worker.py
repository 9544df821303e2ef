"""The per-container agent: lease, done-check, execute, upload, ack.

Agents are generator processes (see :mod:`dsomething.clock`). A failed task is
never acked; the lease runs out and the queue redelivers it.
"""
from __future__ import annotations

import json
import os
import random
import re
import shutil
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .clock import NEVER, Proc, drive
from .errors import (
    ExecutionFailed,
    MissingDeclaredOutput,
    QueueDeleted,
    StaleReceipt,
    TaskInterrupted,
    UnboundPlaceholder,
)
from .objectstore import ObjectStore
from .specfiles import RunConfig, TaskMessage

_PLACEHOLDER = re.compile(r"\{([A-Za-z0-9_]+)\}")


@dataclass(frozen=True)
class AgentSettings:
    poll_interval_s: float = 5.0
    max_empty_polls: int = 5


@dataclass
class AgentReport:
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    stale_acks: int = 0
    # task currently held by the agent; used to tell mid-task interruptions apart
    current_task: str | None = field(default=None, compare=False, repr=False)

    def merge(self, other: "AgentReport") -> None:
        self.succeeded += other.succeeded
        self.failed += other.failed
        self.skipped += other.skipped
        self.stale_acks += other.stale_acks

    def to_dict(self) -> dict[str, int]:
        return {k: v for k, v in asdict(self).items() if k != "current_task"}


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    status: str  # success | failure | skipped_done
    wall_seconds: float
    outputs_written: int
    log_key: str


@dataclass
class TaskContext:
    store: ObjectStore
    config: RunConfig
    now: Callable[[], float]
    log: Callable[[str, str], None]
    heartbeat: Callable[[], None]
    attempt: int = 1
    stop: Any = NEVER


class Executor(Protocol):
    def execute(self, msg: TaskMessage, ctx: TaskContext) -> Proc: ...


def output_prefix_of(msg: TaskMessage) -> str:
    return msg.output_prefix.rstrip("/") + "/"


def check_done(store: ObjectStore, msg: TaskMessage, config: RunConfig) -> bool:
    return store.count_prefix(output_prefix_of(msg)) >= config.done_check.expected_file_count


def render_command(template: str, msg: TaskMessage) -> list[str]:
    """Fill ``{name}`` placeholders and split into an argument vector.

    Literal text splits on whitespace; a substituted value never does, so
    ``{well}`` bound to ``"A 01"`` stays a single argument.
    """
    argv: list[str] = []
    current: list[str] = []
    in_arg = False
    pos = 0

    def literal(text: str) -> None:
        nonlocal in_arg
        for ch in text:
            if ch.isspace():
                if in_arg:
                    argv.append("".join(current))
                    current.clear()
                    in_arg = False
            else:
                current.append(ch)
                in_arg = True

    for m in _PLACEHOLDER.finditer(template):
        literal(template[pos:m.start()])
        name = m.group(1)
        if name not in msg.parameters:
            raise UnboundPlaceholder(name)
        value = msg.parameters[name]
        current.append(json.dumps(value) if isinstance(value, bool) else str(value))
        in_arg = True
        pos = m.end()
    literal(template[pos:])
    if in_arg:
        argv.append("".join(current))
    return argv


@dataclass(frozen=True)
class SimulatedExecutor:
    """Deterministic stand-in for the containerized tool.

    Durations are whole seconds drawn per task from ``duration_s`` (inclusive
    range). Failures come from the deny list or a per-(task, attempt) draw.
    Outputs upload one file at a time, so an interruption can leave a partial set.
    """

    seed: int = 0
    duration_s: tuple[int, int] = (60, 60)
    failure_probability: float = 0.0
    deny_list: frozenset[str] = frozenset()
    upload_s_per_file: int = 1

    def duration_for(self, msg: TaskMessage) -> int:
        lo, hi = self.duration_s
        return random.Random(f"{self.seed}:duration:{msg.task_id}").randint(lo, hi)

    def fails(self, msg: TaskMessage, attempt: int) -> bool:
        if msg.task_id in self.deny_list:
            return True
        if self.failure_probability <= 0:
            return False
        return random.Random(f"{self.seed}:fail:{msg.task_id}:{attempt}").random() < self.failure_probability

    def execute(self, msg: TaskMessage, ctx: TaskContext) -> Proc:
        duration = self.duration_for(msg)
        period = ctx.config.heartbeat_period_s
        ctx.log("info", f"simulated run of {duration}s")
        remaining = float(duration)
        while remaining > 0:
            step = min(remaining, period)
            yield step
            remaining -= step
            if remaining > 0:
                ctx.heartbeat()
        if self.fails(msg, ctx.attempt):
            raise ExecutionFailed(f"simulated failure of {msg.task_id}")
        n = ctx.config.done_check.expected_file_count if ctx.config.done_check.enabled else 1
        ctx.heartbeat()
        body = json.dumps(msg.to_dict(), sort_keys=True).encode()
        for i in range(n):
            ctx.store.put(f"{output_prefix_of(msg)}output_{i:03d}.json", body)
            if self.upload_s_per_file:
                yield self.upload_s_per_file
        return n


@dataclass(frozen=True)
class LocalCommandExecutor:
    """Runs the rendered command as a subprocess in ``scratch_root/<task_id>``.

    Task parameters are exported as ``DS_PARAM_<name>``. After exit code 0
    every file matching a declared pattern is uploaded under the task's
    output prefix; a pattern with no match fails the task.
    """

    scratch_root: str
    declared_outputs: tuple[str, ...] | None = None
    poll_s: float = 0.1

    def execute(self, msg: TaskMessage, ctx: TaskContext) -> Proc:
        yield from ()
        config = ctx.config
        argv = render_command(config.command_template, msg)
        if not argv:
            raise ExecutionFailed("command template renders to an empty command")
        root = Path(self.scratch_root)
        scratch = root / msg.task_id
        capture = root / f".{msg.task_id}.out"
        shutil.rmtree(scratch, ignore_errors=True)
        scratch.mkdir(parents=True)
        env = dict(os.environ)
        env.update({f"DS_PARAM_{k}": str(v) for k, v in msg.parameters.items()})
        env["DS_TASK_ID"] = msg.task_id
        try:
            rc = self._run(argv, scratch, capture, env, ctx)
            for line in capture.read_text(errors="replace").splitlines():
                ctx.log("stdout", line)
            if rc != 0:
                raise ExecutionFailed(f"{argv[0]} exited with {rc}")
            files: dict[str, Path] = {}
            for pattern in self.declared_outputs or config.declared_outputs:
                matched = sorted(p for p in scratch.glob(pattern) if p.is_file())
                if not matched:
                    raise MissingDeclaredOutput(f"declared output {pattern!r} was not produced")
                for p in matched:
                    files[p.relative_to(scratch).as_posix()] = p
            for rel in sorted(files):
                ctx.store.put(output_prefix_of(msg) + rel, files[rel].read_bytes())
            return len(files)
        finally:
            shutil.rmtree(scratch, ignore_errors=True)
            capture.unlink(missing_ok=True)

    def _run(self, argv: list[str], cwd: Path, capture: Path, env: dict, ctx: TaskContext) -> int:
        period = ctx.config.heartbeat_period_s
        with open(capture, "wb") as out:
            try:
                proc = subprocess.Popen(argv, cwd=cwd, stdout=out, stderr=subprocess.STDOUT, env=env)
            except OSError as exc:
                raise ExecutionFailed(f"cannot start {argv[0]!r}: {exc}") from exc
            next_beat = time.monotonic() + period
            while True:
                try:
                    return proc.wait(timeout=self.poll_s)
                except subprocess.TimeoutExpired:
                    pass
                if ctx.stop.is_set():
                    proc.kill()
                    proc.wait()
                    raise TaskInterrupted(argv[0])
                if time.monotonic() >= next_beat:
                    ctx.heartbeat()
                    next_beat += period


def execute_task(msg: TaskMessage, executor: Executor, ctx: TaskContext, log_key: str = "") -> Proc:
    """Run one leased task; returns a successful :class:`TaskResult` or raises."""
    started = ctx.now()
    written = yield from executor.execute(msg, ctx)
    config = ctx.config
    if config.done_check.enabled and written < config.done_check.expected_file_count:
        raise MissingDeclaredOutput(
            f"wrote {written} outputs, done-check expects {config.done_check.expected_file_count}"
        )
    return TaskResult(msg.task_id, "success", ctx.now() - started, written, log_key)


def agent_loop(
    queue: Any,
    store: ObjectStore,
    executor: Executor,
    config: RunConfig,
    telemetry: Any,
    now: Callable[[], float],
    stop: Any = NEVER,
    *,
    instance_id: str = "local",
    settings: AgentSettings = AgentSettings(),
    report: AgentReport | None = None,
) -> Proc:
    report = report if report is not None else AgentReport()
    empty = 0
    while not stop.is_set():
        try:
            leased = queue.lease(now())
        except QueueDeleted:
            break
        if leased is None:
            empty += 1
            if empty >= settings.max_empty_polls:
                break
            yield settings.poll_interval_s
            continue
        empty = 0
        msg, receipt = leased
        stream = f"{msg.task_id}.{receipt.message_id}.{receipt.receive_count}"
        tags = {**msg.parameters, "instance_id": instance_id}
        held = [receipt]

        def log(severity: str, line: str) -> None:
            telemetry.append_log(stream, tags, severity, line, now())

        def heartbeat() -> None:
            try:
                held[0] = queue.extend_lease(held[0], config.visibility_timeout_s, now())
            except (StaleReceipt, QueueDeleted):
                log("warn", "heartbeat rejected; lease lost")

        def ack() -> None:
            try:
                queue.ack(held[0], now())
            except (StaleReceipt, QueueDeleted):
                report.stale_acks += 1
                log("warn", "ack rejected; task may run again elsewhere")

        log("info", f"leased {msg.task_id} delivery={receipt.receive_count} instance={instance_id}")
        report.current_task = msg.task_id
        try:
            if config.done_check.enabled and check_done(store, msg, config):
                log("info", "outputs already present; skipping")
                report.skipped += 1
                ack()
                continue
            ctx = TaskContext(store, config, now, log, heartbeat, receipt.receive_count, stop)
            try:
                result = yield from execute_task(msg, executor, ctx, stream)
            except TaskInterrupted:
                log("warn", "interrupted; leaving message for redelivery")
                break
            except Exception as exc:  # any task-level error is a failed delivery
                report.failed += 1
                log("error", f"failed: {type(exc).__name__}: {exc}")
                continue
            report.succeeded += 1
            log("info", f"succeeded in {result.wall_seconds:g}s with {result.outputs_written} outputs")
            ack()
        finally:
            report.current_task = None
    return report


def run_agent(
    queue: Any,
    store: ObjectStore,
    executor: Executor,
    config: RunConfig,
    telemetry: Any,
    clock: Any,
    stop: Any = NEVER,
    **kwargs: Any,
) -> AgentReport:
    """Blocking wrapper: drive one agent against ``clock`` until it exits."""
    return drive(agent_loop(queue, store, executor, config, telemetry, clock.now, stop, **kwargs), clock, stop)
