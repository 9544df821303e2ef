"""Run configuration, job file and fleet file: parsing, validation, expansion.

All three inputs are strict JSON documents. Unknown keys are rejected so that a
typo in a field name fails loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Union

from .errors import (
    DuplicateTaskId,
    EmptyTaskList,
    InfeasiblePacking,
    MalformedDocument,
    SchemaViolation,
)

Scalar = Union[str, int, float, bool]

APP_NAME_RE = re.compile(r"[A-Za-z0-9_-]{1,64}")
PARAM_KEY_RE = re.compile(r"[A-Za-z0-9_]+")
_UNSAFE_ID_CHARS = re.compile(r"[^A-Za-z0-9_-]")
TASK_INDEX_WIDTH = 6


@dataclass(frozen=True)
class MachineType:
    name: str
    cpu_units: int  # 1024 == 1 vCPU
    memory_mb: int


@dataclass(frozen=True)
class DoneCheck:
    enabled: bool
    expected_file_count: int


@dataclass(frozen=True)
class RunConfig:
    app_name: str
    image_ref: str
    machine_type: MachineType
    fleet_size: int
    max_price_per_hour: float
    tasks_per_machine: int
    task_cpu_units: int
    task_memory_mb: int
    visibility_timeout_s: int
    max_receive_count: int
    output_prefix: str
    done_check: DoneCheck
    monitor_period_s: int
    teardown_hysteresis_ticks: int
    command_template: str
    # Relative glob patterns collected from the scratch dir by the local executor.
    declared_outputs: tuple[str, ...] = ("*",)

    @property
    def queue_name(self) -> str:
        return f"{self.app_name}_queue"

    @property
    def heartbeat_period_s(self) -> float:
        return self.visibility_timeout_s / 3

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["declared_outputs"] = list(self.declared_outputs)
        return d


@dataclass(frozen=True)
class JobSpec:
    shared: dict[str, Scalar]
    tasks: list[dict[str, Scalar]]

    def to_dict(self) -> dict[str, Any]:
        return {"shared": dict(self.shared), "tasks": [dict(t) for t in self.tasks]}


@dataclass(frozen=True)
class FleetSpec:
    account_id: str
    region: str
    subnet_ids: tuple[str, ...]
    security_group_ids: tuple[str, ...]
    instance_role: str
    key_name: str

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["subnet_ids"] = list(self.subnet_ids)
        d["security_group_ids"] = list(self.security_group_ids)
        return d


@dataclass(frozen=True)
class TaskMessage:
    task_id: str
    parameters: dict[str, Scalar]
    output_prefix: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "parameters": dict(self.parameters),
            "output_prefix": self.output_prefix,
        }


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warn"
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.path}: {self.message}"


# ---------------------------------------------------------------------------
# low-level document helpers


def _reject_constant(name: str) -> Any:
    raise MalformedDocument(f"non-finite number {name} is not allowed")


def _load(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from exc
    try:
        return json.loads(data, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(str(exc)) from exc


def dumps(doc: Mapping[str, Any]) -> str:
    """Canonical serialization: 2-space indent, sorted keys."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _object(value: Any, path: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise SchemaViolation(path or "<root>", "expected an object")
    return value


def _check_keys(obj: Mapping[str, Any], required: set[str], optional: set[str], path: str) -> None:
    for key in sorted(obj):
        if key not in required and key not in optional:
            raise SchemaViolation(_join(path, key), f"unknown field {key!r}")
    for key in sorted(required):
        if key not in obj:
            raise SchemaViolation(_join(path, key), "missing required field")


def _string(obj: Mapping[str, Any], key: str, path: str, nonempty: bool = True) -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise SchemaViolation(_join(path, key), "expected a string")
    if nonempty and not value:
        raise SchemaViolation(_join(path, key), "must not be empty")
    return value


def _pos_int(obj: Mapping[str, Any], key: str, path: str) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation(_join(path, key), "expected an integer")
    if value <= 0:
        raise SchemaViolation(_join(path, key), "must be positive")
    return value


def _bool(obj: Mapping[str, Any], key: str, path: str) -> bool:
    value = obj[key]
    if not isinstance(value, bool):
        raise SchemaViolation(_join(path, key), "expected a boolean")
    return value


def _string_list(obj: Mapping[str, Any], key: str, path: str) -> tuple[str, ...]:
    value = obj[key]
    if not isinstance(value, list) or not value:
        raise SchemaViolation(_join(path, key), "expected a non-empty list of strings")
    for i, item in enumerate(value):
        if not isinstance(item, str) or not item:
            raise SchemaViolation(f"{_join(path, key)}[{i}]", "expected a non-empty string")
    return tuple(value)


def _is_scalar(value: Any) -> bool:
    if isinstance(value, float):
        return math.isfinite(value)
    return isinstance(value, (str, int, bool))


def _param_map(value: Any, path: str) -> dict[str, Scalar]:
    obj = _object(value, path)
    for key, item in obj.items():
        if not PARAM_KEY_RE.fullmatch(key):
            raise SchemaViolation(_join(path, key), "parameter names must match [A-Za-z0-9_]+")
        if not _is_scalar(item):
            raise SchemaViolation(_join(path, key), "parameter values must be scalars")
    return dict(obj)


# ---------------------------------------------------------------------------
# RunConfig

_RUN_REQUIRED = {
    "app_name", "image_ref", "machine_type", "fleet_size", "max_price_per_hour",
    "tasks_per_machine", "task_cpu_units", "task_memory_mb", "visibility_timeout_s",
    "max_receive_count", "output_prefix", "done_check", "monitor_period_s",
    "teardown_hysteresis_ticks", "command_template",
}
_RUN_OPTIONAL = {"declared_outputs"}


def parse_run_config(data: bytes | str) -> RunConfig:
    doc = _object(_load(data), "")
    _check_keys(doc, _RUN_REQUIRED, _RUN_OPTIONAL, "")

    app_name = _string(doc, "app_name", "")
    if not APP_NAME_RE.fullmatch(app_name):
        raise SchemaViolation("app_name", "must match [A-Za-z0-9_-]{1,64}")

    mt = _object(doc["machine_type"], "machine_type")
    _check_keys(mt, {"name", "cpu_units", "memory_mb"}, set(), "machine_type")
    machine = MachineType(
        name=_string(mt, "name", "machine_type"),
        cpu_units=_pos_int(mt, "cpu_units", "machine_type"),
        memory_mb=_pos_int(mt, "memory_mb", "machine_type"),
    )

    price = doc["max_price_per_hour"]
    if isinstance(price, bool) or not isinstance(price, (int, float)):
        raise SchemaViolation("max_price_per_hour", "expected a number")
    if price < 0:
        raise SchemaViolation("max_price_per_hour", "must be >= 0")

    dc = _object(doc["done_check"], "done_check")
    _check_keys(dc, {"enabled", "expected_file_count"}, set(), "done_check")
    done = DoneCheck(
        enabled=_bool(dc, "enabled", "done_check"),
        expected_file_count=_pos_int(dc, "expected_file_count", "done_check"),
    )

    prefix = _string(doc, "output_prefix", "")
    if prefix.startswith("/") or ".." in prefix.split("/"):
        raise SchemaViolation("output_prefix", "must be a relative key prefix")

    declared: tuple[str, ...] = ("*",)
    if "declared_outputs" in doc:
        declared = _string_list(doc, "declared_outputs", "")

    config = RunConfig(
        app_name=app_name,
        image_ref=_string(doc, "image_ref", ""),
        machine_type=machine,
        fleet_size=_pos_int(doc, "fleet_size", ""),
        max_price_per_hour=price,
        tasks_per_machine=_pos_int(doc, "tasks_per_machine", ""),
        task_cpu_units=_pos_int(doc, "task_cpu_units", ""),
        task_memory_mb=_pos_int(doc, "task_memory_mb", ""),
        visibility_timeout_s=_pos_int(doc, "visibility_timeout_s", ""),
        max_receive_count=_pos_int(doc, "max_receive_count", ""),
        output_prefix=prefix,
        done_check=done,
        monitor_period_s=_pos_int(doc, "monitor_period_s", ""),
        teardown_hysteresis_ticks=_pos_int(doc, "teardown_hysteresis_ticks", ""),
        command_template=_string(doc, "command_template", "", nonempty=False),
        declared_outputs=declared,
    )
    check_packing(config)
    return config


def check_packing(config: RunConfig) -> None:
    """Raise InfeasiblePacking if the per-machine agents do not fit the machine."""
    for problem in _packing_problems(config):
        raise InfeasiblePacking(problem.message)


def _packing_problems(config: RunConfig) -> list[Diagnostic]:
    out = []
    tpm = config.tasks_per_machine
    mt = config.machine_type
    if tpm * config.task_cpu_units > mt.cpu_units:
        out.append(Diagnostic(
            "error", "task_cpu_units",
            f"{tpm} x {config.task_cpu_units} cpu units exceeds machine {mt.cpu_units}",
        ))
    if tpm * config.task_memory_mb > mt.memory_mb:
        out.append(Diagnostic(
            "error", "task_memory_mb",
            f"{tpm} x {config.task_memory_mb} MB exceeds machine {mt.memory_mb} MB",
        ))
    return out


def serialize_run_config(config: RunConfig) -> str:
    return dumps(config.to_dict())


# ---------------------------------------------------------------------------
# JobSpec


def parse_job_spec(data: bytes | str) -> JobSpec:
    doc = _object(_load(data), "")
    _check_keys(doc, {"shared", "tasks"}, set(), "")
    shared = _param_map(doc["shared"], "shared")
    tasks_raw = doc["tasks"]
    if not isinstance(tasks_raw, list):
        raise SchemaViolation("tasks", "expected a list of objects")
    if not tasks_raw:
        raise EmptyTaskList("job file lists no tasks")
    tasks = [_param_map(t, f"tasks[{i}]") for i, t in enumerate(tasks_raw)]
    return JobSpec(shared=shared, tasks=tasks)


def serialize_job_spec(job: JobSpec) -> str:
    return dumps(job.to_dict())


# ---------------------------------------------------------------------------
# FleetSpec

_FLEET_STRINGS = ("account_id", "region", "instance_role", "key_name")
_FLEET_LISTS = ("subnet_ids", "security_group_ids")


def parse_fleet_spec(data: bytes | str) -> FleetSpec:
    doc = _object(_load(data), "")
    _check_keys(doc, set(_FLEET_STRINGS + _FLEET_LISTS), set(), "")
    values: dict[str, Any] = {k: _string(doc, k, "") for k in _FLEET_STRINGS}
    values.update({k: _string_list(doc, k, "") for k in _FLEET_LISTS})
    return FleetSpec(**values)


def serialize_fleet_spec(spec: FleetSpec) -> str:
    return dumps(spec.to_dict())


# ---------------------------------------------------------------------------
# expansion and validation


def _id_text(value: Scalar) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def make_task_id(index: int, task: Mapping[str, Scalar], width: int = TASK_INDEX_WIDTH) -> str:
    parts = [str(index).zfill(width)]
    parts.extend(sorted(_id_text(v) for v in task.values()))
    return _UNSAFE_ID_CHARS.sub("_", "-".join(parts))


def expand_jobs(job: JobSpec, config: RunConfig) -> list[TaskMessage]:
    """Flatten a job file into one message per task, in file order.

    Per-task keys override shared keys. The id is the zero-padded ordinal
    followed by the task's own values, so identical tasks still get distinct ids.
    """
    width = max(TASK_INDEX_WIDTH, len(str(len(job.tasks) - 1)))
    prefix = config.output_prefix.rstrip("/")
    messages = []
    seen: set[str] = set()
    for index, task in enumerate(job.tasks):
        task_id = make_task_id(index, task, width)
        if task_id in seen:
            raise DuplicateTaskId(task_id)
        seen.add(task_id)
        params = {**job.shared, **task}
        messages.append(TaskMessage(task_id, params, f"{prefix}/{task_id}"))
    return messages


def validate_run(
    config: RunConfig, fleet: FleetSpec, task_count_hint: int | None = None
) -> list[Diagnostic]:
    """Collect everything that would stop the run, plus advisory warnings.

    Works on unvalidated objects too, so hand-built configs get the same checks
    as parsed ones.
    """
    diags: list[Diagnostic] = []
    if not APP_NAME_RE.fullmatch(config.app_name or ""):
        diags.append(Diagnostic("error", "app_name", "must match [A-Za-z0-9_-]{1,64}"))
    for name in ("fleet_size", "tasks_per_machine", "task_cpu_units", "task_memory_mb",
                 "visibility_timeout_s", "max_receive_count", "monitor_period_s",
                 "teardown_hysteresis_ticks"):
        if getattr(config, name) <= 0:
            diags.append(Diagnostic("error", name, "must be positive"))
    if config.machine_type.cpu_units <= 0 or config.machine_type.memory_mb <= 0:
        diags.append(Diagnostic("error", "machine_type", "cpu_units and memory_mb must be positive"))
    if config.max_price_per_hour < 0:
        diags.append(Diagnostic("error", "max_price_per_hour", "must be >= 0"))
    if config.done_check.expected_file_count <= 0:
        diags.append(Diagnostic("error", "done_check.expected_file_count", "must be positive"))
    diags.extend(_packing_problems(config))

    for name in _FLEET_STRINGS:
        if not getattr(fleet, name):
            diags.append(Diagnostic("error", f"fleet.{name}", "must not be empty"))
    for name in _FLEET_LISTS:
        items = getattr(fleet, name)
        if not items or not all(items):
            diags.append(Diagnostic("error", f"fleet.{name}", "must list non-empty identifiers"))

    if config.visibility_timeout_s > 0 and config.monitor_period_s > config.visibility_timeout_s:
        diags.append(Diagnostic(
            "warn", "monitor_period_s",
            "longer than visibility_timeout_s; the monitor may act on stale in-flight counts",
        ))
    if task_count_hint is not None and config.fleet_size * config.tasks_per_machine > task_count_hint:
        diags.append(Diagnostic(
            "warn", "fleet_size",
            f"{config.fleet_size * config.tasks_per_machine} agent slots for {task_count_hint} tasks",
        ))
    return diags
