import json
from dataclasses import replace

import hypothesis
import pytest

from dsomething.specfiles import DoneCheck, FleetSpec, MachineType, RunConfig

hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=30, deadline=None)
hypothesis.settings.load_profile("dev")


def make_config(**overrides) -> RunConfig:
    base = RunConfig(
        app_name="test_app",
        image_ref="example/tool:1",
        machine_type=MachineType("m.test", 4096, 16384),
        fleet_size=3,
        max_price_per_hour=0.40,
        tasks_per_machine=2,
        task_cpu_units=1024,
        task_memory_mb=2048,
        visibility_timeout_s=60,
        max_receive_count=3,
        output_prefix="out",
        done_check=DoneCheck(True, 1),
        monitor_period_s=60,
        teardown_hysteresis_ticks=2,
        command_template="tool --well {well}",
    )
    return replace(base, **overrides)


FLEET = FleetSpec("123456789012", "us-east-1", ("subnet-1",), ("sg-1",), "role", "key")


@pytest.fixture
def config() -> RunConfig:
    return make_config()


@pytest.fixture
def fleet_spec() -> FleetSpec:
    return FLEET


def write_json(path, doc) -> str:
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


# -- acceptance verdict lines ---------------------------------------------------
_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
