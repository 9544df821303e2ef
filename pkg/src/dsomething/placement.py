"""Container placement: keep ``tasks_per_machine`` agents on every running instance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .errors import AlreadyRegistered, InfeasiblePacking
from .fleet import RUNNING, Instance
from .specfiles import RunConfig

STARTING, PLACED, STOPPED = "starting", "running", "stopped"


@dataclass(frozen=True)
class TaskDefinition:
    taskdef_id: str
    image_ref: str
    cpu_units: int
    memory_mb: int
    environment: tuple[tuple[str, str], ...]


@dataclass
class Placement:
    placement_id: str
    instance_id: str
    taskdef_id: str
    slot_index: int
    state: str = STARTING
    stop_reason: str = ""


@dataclass(frozen=True)
class PlacementAction:
    kind: str  # start | stop
    placement_id: str
    instance_id: str
    slot_index: int

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "placement_id": self.placement_id,
            "instance_id": self.instance_id,
            "slot_index": self.slot_index,
        }


def task_definition_for(config: RunConfig) -> TaskDefinition:
    env = {
        "DS_APP_NAME": config.app_name,
        "DS_QUEUE_NAME": config.queue_name,
        "DS_OUTPUT_PREFIX": config.output_prefix,
    }
    return TaskDefinition(
        taskdef_id=f"{config.app_name}-taskdef",
        image_ref=config.image_ref,
        cpu_units=config.task_cpu_units,
        memory_mb=config.task_memory_mb,
        environment=tuple(sorted(env.items())),
    )


@dataclass
class ClusterState:
    task_definitions: dict[str, TaskDefinition] = field(default_factory=dict)
    placements: dict[str, Placement] = field(default_factory=dict)
    # instance_id -> slot_index -> placement_id, non-stopped placements only
    _live: dict[str, dict[int, str]] = field(default_factory=dict)
    _next_placement: int = 0

    def register_task_definition(self, config: RunConfig) -> TaskDefinition:
        """Idempotent for an identical definition; conflicting re-registration fails."""
        taskdef = task_definition_for(config)
        existing = self.task_definitions.get(config.app_name)
        if existing is not None:
            if existing == taskdef:
                return existing
            raise AlreadyRegistered(f"{config.app_name} already has a different task definition")
        self.task_definitions[config.app_name] = taskdef
        return taskdef

    def live_on(self, instance_id: str) -> list[Placement]:
        slots = self._live.get(instance_id, {})
        return [self.placements[slots[s]] for s in sorted(slots)]

    def live_placements(self, instance_id: str) -> int:
        return len(self._live.get(instance_id, ()))

    def all_live(self) -> list[Placement]:
        return [p for iid in sorted(self._live) for p in self.live_on(iid)]

    def mark_running(self, placement_id: str) -> None:
        p = self.placements[placement_id]
        if p.state == STARTING:
            p.state = PLACED

    def mark_stopped(self, placement_id: str, reason: str) -> None:
        p = self.placements[placement_id]
        if p.state == STOPPED:
            return
        p.state = STOPPED
        p.stop_reason = reason
        slots = self._live[p.instance_id]
        del slots[p.slot_index]
        if not slots:
            del self._live[p.instance_id]

    def reconcile(
        self,
        instances: Iterable[Instance],
        taskdef: TaskDefinition,
        tasks_per_machine: int,
        machine_cpu: int | None = None,
        machine_memory: int | None = None,
    ) -> list[PlacementAction]:
        """Start agents into empty slots on running instances; stop agents on dead ones.

        Actions come out ordered by (instance_id, slot_index). Slots freed by an
        agent that exited are refilled.
        """
        if machine_cpu is not None and tasks_per_machine * taskdef.cpu_units > machine_cpu:
            raise InfeasiblePacking(f"{tasks_per_machine} x {taskdef.cpu_units} > {machine_cpu} cpu")
        if machine_memory is not None and tasks_per_machine * taskdef.memory_mb > machine_memory:
            raise InfeasiblePacking(f"{tasks_per_machine} x {taskdef.memory_mb} > {machine_memory} MB")

        by_id = {i.instance_id: i for i in instances}
        actions: list[PlacementAction] = []
        touched = sorted(set(by_id) | set(self._live))
        for iid in touched:
            inst = by_id.get(iid)
            live = self.live_on(iid)
            if inst is None or inst.state != RUNNING:
                if inst is not None and inst.state != "terminated":
                    continue  # pending: nothing to place yet
                for p in live:
                    self.mark_stopped(p.placement_id, "instance_terminated")
                    actions.append(PlacementAction("stop", p.placement_id, iid, p.slot_index))
                continue
            taken = {p.slot_index for p in live}
            for slot in range(tasks_per_machine):
                if slot in taken:
                    continue
                self._next_placement += 1
                pid = f"p-{self._next_placement:06d}"
                self.placements[pid] = Placement(pid, iid, taskdef.taskdef_id, slot)
                self._live.setdefault(iid, {})[slot] = pid
                actions.append(PlacementAction("start", pid, iid, slot))
        return actions
