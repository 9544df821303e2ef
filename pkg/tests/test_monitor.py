import dataclasses

import pytest

from dsomething.backends import SimOptions
from dsomething.fleet import Fleet, MarketModel
from dsomething.lifecycle import simulate_run
from dsomething.monitor import DRAINING, TORN_DOWN, WATCHING, MonitorState, desired_capacity, monitor_tick
from dsomething.placement import ClusterState
from dsomething.queue import WorkQueue
from dsomething.specfiles import JobSpec, TaskMessage, validate_run
from dsomething.telemetry import Telemetry
from dsomething.worker import SimulatedExecutor

from conftest import FLEET, make_config

FLAT = MarketModel(base_price_per_hour=0.10)


class Rig:
    def __init__(self, config, tasks=0):
        self.config = config
        self.queue = WorkQueue(config.queue_name, config.visibility_timeout_s, config.max_receive_count)
        for i in range(tasks):
            self.queue.enqueue(TaskMessage(f"t{i}", {"i": i}, f"out/t{i}"), 0)
        self.fleet = Fleet("f", config.machine_type, config.fleet_size, config.max_price_per_hour, 0)
        self.fleet.tick(FLAT, 0)
        self.cluster = ClusterState()
        self.cluster.register_task_definition(config)
        self.telemetry = Telemetry()
        self.state = MonitorState.for_config(config)

    def tick(self, now, export_dir=None):
        return monitor_tick(self.state, self.config, self.queue, self.fleet, self.cluster,
                            self.telemetry, now, export_dir)


def kinds(actions):
    return [a.kind for a in actions]


def test_desired_capacity_example():
    assert desired_capacity(10, 4, 5) == 3
    assert desired_capacity(100, 4, 5) == 5
    assert desired_capacity(0, 4, 5) == 0


def test_tick_lowers_target_and_never_raises_it():
    rig = Rig(make_config(fleet_size=5, tasks_per_machine=4), tasks=10)
    assert kinds(rig.tick(0)) == ["set_target"]
    assert rig.fleet.target_capacity == 3 and rig.state.phase == DRAINING
    for i in range(40):
        rig.queue.enqueue(TaskMessage(f"x{i}", {}, f"out/x{i}"), 1)
    assert rig.tick(60) == []
    assert rig.fleet.target_capacity == 3


def test_idle_walk_tears_down_exactly_once(tmp_path):
    rig = Rig(make_config(teardown_hysteresis_ticks=2))
    first = rig.tick(0, tmp_path / "x")
    assert "cancel_fleet" not in kinds(first) and rig.state.consecutive_idle == 1
    second = rig.tick(60, tmp_path / "x")
    assert kinds(second)[-5:] == ["export", "cancel_fleet", "stop_placements", "purge_queue", "final_ledger"]
    assert rig.state.phase == TORN_DOWN and rig.state.torn_down_at == 60
    assert rig.tick(120) == []
    assert rig.queue.deleted and not rig.fleet.active and rig.fleet.running() == []
    assert (tmp_path / "x" / "manifest.json").exists()


def test_demand_resets_idle_counter():
    rig = Rig(make_config(teardown_hysteresis_ticks=2))
    rig.tick(0)
    rig.queue.enqueue(TaskMessage("late", {}, "out/late"), 30)
    rig.tick(60)
    assert rig.state.consecutive_idle == 0 and rig.state.phase != TORN_DOWN


def test_teardown_records_dead_letters_and_freezes_ledger():
    rig = Rig(make_config(max_receive_count=1, visibility_timeout_s=10), tasks=1)
    rig.queue.lease(0)
    rig.tick(20)
    rig.tick(80)
    assert rig.state.phase == TORN_DOWN and rig.state.dead_letter_task_ids == ["t0"]
    assert rig.fleet.accrue_cost(1e5) == rig.fleet.accrue_cost(2e5) == rig.state.final_ledger


def test_delete_logs_happens_after_export(tmp_path):
    rig = Rig(make_config())
    rig.state.delete_logs = True
    rig.telemetry.append_log("s", {"a": 1}, "info", "kept in export", 0)
    rig.tick(0)
    actions = rig.tick(60, tmp_path / "e")
    assert kinds(actions).index("export") < kinds(actions).index("delete_logs")
    assert rig.telemetry.streams == {}
    assert (tmp_path / "e" / "logs" / "s.log").exists()


def test_phase_only_moves_forward():
    state = MonitorState(60, 2)
    state.advance(DRAINING)
    with pytest.raises(ValueError):
        state.advance(WATCHING)


def job_of(n):
    return JobSpec({"pipeline": "p"}, tuple({"well": f"W{i:03d}"} for i in range(n)))


def test_end_to_end_metrics():
    config = make_config(fleet_size=4, tasks_per_machine=2)
    report, backend = simulate_run(config, FLEET, job_of(40), SimOptions(seed=1))
    world = backend._world
    visible = world.telemetry.series["queue_visible"].points
    assert visible[-1][1] == 0
    cost = [v for _, v in world.telemetry.series["cost_total"].points]
    assert cost == sorted(cost)
    assert report["tasks"]["succeeded"] == 40 and report["exit_code"] == 0


def test_empty_run_tears_down_quickly():
    config = make_config()
    report, _ = simulate_run(config, FLEET, JobSpec({}, ()), SimOptions(seed=1))
    period, h = config.monitor_period_s, config.teardown_hysteresis_ticks
    assert report["timings"]["torn_down_at"] - report["timings"]["monitor_started_at"] <= h * period


def first_downscale(report_world):
    points = report_world.telemetry.series["fleet_target"].points
    start = points[0][1]
    return next(t for t, v in points if v < start)


def test_slow_monitor_warning_means_late_downscale():
    base = make_config(fleet_size=4, tasks_per_machine=2, visibility_timeout_s=60, monitor_period_s=30)
    slow = dataclasses.replace(base, monitor_period_s=900)
    assert not [d for d in validate_run(base, FLEET) if d.severity == "warn"]
    assert any("monitor_period_s" in d.path for d in validate_run(slow, FLEET) if d.severity == "warn")
    options = SimOptions(seed=2, executor=SimulatedExecutor(duration_s=(50, 400)))
    _, fast_backend = simulate_run(base, FLEET, job_of(30), options)
    _, slow_backend = simulate_run(slow, FLEET, job_of(30), options)
    assert first_downscale(slow_backend._world) > first_downscale(fast_backend._world)
