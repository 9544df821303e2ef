import json
import random
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsomething.errors import EmptyTaskList, InfeasiblePacking, MalformedDocument, SchemaViolation
from dsomething.specfiles import (
    DoneCheck,
    FleetSpec,
    JobSpec,
    MachineType,
    RunConfig,
    expand_jobs,
    parse_fleet_spec,
    parse_job_spec,
    parse_run_config,
    serialize_fleet_spec,
    serialize_job_spec,
    serialize_run_config,
    validate_run,
)

from conftest import FLEET, make_config


def minimal_config_doc(**overrides):
    doc = {
        "app_name": "app",
        "image_ref": "img:1",
        "machine_type": {"name": "m", "cpu_units": 1024, "memory_mb": 4096},
        "fleet_size": 3,
        "max_price_per_hour": 0.1,
        "tasks_per_machine": 2,
        "task_cpu_units": 512,
        "task_memory_mb": 1024,
        "visibility_timeout_s": 60,
        "max_receive_count": 3,
        "output_prefix": "out",
        "done_check": {"enabled": True, "expected_file_count": 1},
        "monitor_period_s": 30,
        "teardown_hysteresis_ticks": 2,
        "command_template": "tool {x}",
    }
    doc.update(overrides)
    return json.dumps(doc).encode()


FLEET_DOC = {
    "account_id": "1", "region": "us-east-1", "subnet_ids": ["s"],
    "security_group_ids": ["g"], "instance_role": "r", "key_name": "k",
}


# -- RunConfig ----------------------------------------------------------------

def test_minimal_config_parses():
    config = parse_run_config(minimal_config_doc())
    assert config.fleet_size == 3
    assert config.machine_type == MachineType("m", 1024, 4096)
    assert config.declared_outputs == ("*",)


def test_packing_that_fits_exactly_is_accepted():
    # 2 x 512 == 1024
    parse_run_config(minimal_config_doc(task_cpu_units=512))


def test_oversubscribed_cpu_is_infeasible():
    with pytest.raises(InfeasiblePacking):
        parse_run_config(minimal_config_doc(task_cpu_units=1024))


def test_oversubscribed_memory_is_infeasible():
    with pytest.raises(InfeasiblePacking):
        parse_run_config(minimal_config_doc(task_memory_mb=2049))


def test_negative_price_is_rejected_at_its_field():
    with pytest.raises(SchemaViolation) as err:
        parse_run_config(minimal_config_doc(max_price_per_hour=-0.01))
    assert err.value.path == "max_price_per_hour"


def test_zero_price_is_allowed():
    assert parse_run_config(minimal_config_doc(max_price_per_hour=0)).max_price_per_hour == 0


def test_config_round_trips():
    config = parse_run_config(minimal_config_doc())
    assert parse_run_config(serialize_run_config(config)) == config


@pytest.mark.parametrize("doc,path", [
    (minimal_config_doc(fleet_size=0), "fleet_size"),
    (minimal_config_doc(fleet_size=True), "fleet_size"),
    (minimal_config_doc(fleet_size=2.0), "fleet_size"),
    (minimal_config_doc(app_name="bad name"), "app_name"),
    (minimal_config_doc(app_name="x" * 65), "app_name"),
    (minimal_config_doc(machine_type={"name": "m", "cpu_units": 1024}), "machine_type.memory_mb"),
    (minimal_config_doc(done_check={"enabled": "yes", "expected_file_count": 1}), "done_check.enabled"),
    (minimal_config_doc(surprise=1), "surprise"),
    (minimal_config_doc(output_prefix="/abs"), "output_prefix"),
])
def test_schema_violations_name_the_field(doc, path):
    with pytest.raises(SchemaViolation) as err:
        parse_run_config(doc)
    assert err.value.path == path


def test_missing_field_is_reported():
    doc = json.loads(minimal_config_doc())
    del doc["visibility_timeout_s"]
    with pytest.raises(SchemaViolation) as err:
        parse_run_config(json.dumps(doc))
    assert err.value.path == "visibility_timeout_s"


@pytest.mark.parametrize("raw", [b"{", b"\xff\xfe", b"[1, 2", b'{"a": NaN}'])
def test_malformed_documents(raw):
    with pytest.raises(MalformedDocument):
        parse_run_config(raw)


def test_non_object_document_is_schema_violation():
    with pytest.raises(SchemaViolation):
        parse_run_config(b"[]")


# -- JobSpec ------------------------------------------------------------------

def test_single_empty_task_is_valid():
    job = parse_job_spec(b'{"shared": {}, "tasks": [{}]}')
    assert job == JobSpec({}, [{}])


def test_task_order_is_preserved():
    doc = {"shared": {}, "tasks": [{"well": "A01"}, {"well": "A02"}, {"well": "A03"}]}
    job = parse_job_spec(json.dumps(doc))
    assert [t["well"] for t in job.tasks] == ["A01", "A02", "A03"]


def test_empty_task_list():
    with pytest.raises(EmptyTaskList):
        parse_job_spec(b'{"shared": {"p": 1}, "tasks": []}')


@pytest.mark.parametrize("doc", [
    {"shared": {"bad-key": 1}, "tasks": [{}]},
    {"shared": {}, "tasks": [{"x": [1]}]},
    {"shared": {}, "tasks": [{"x": None}]},
    {"shared": {}, "tasks": "nope"},
    {"shared": {}, "tasks": [{}], "extra": 1},
    {"tasks": [{}]},
])
def test_job_schema_violations(doc):
    with pytest.raises(SchemaViolation):
        parse_job_spec(json.dumps(doc))


# -- FleetSpec ----------------------------------------------------------------

def test_complete_fleet_file_parses():
    spec = parse_fleet_spec(json.dumps(FLEET_DOC))
    assert spec.region == "us-east-1"
    assert spec.subnet_ids == ("s",)


def test_missing_region():
    doc = dict(FLEET_DOC)
    del doc["region"]
    with pytest.raises(SchemaViolation) as err:
        parse_fleet_spec(json.dumps(doc))
    assert err.value.path == "region"


def test_unknown_fleet_field_is_named():
    with pytest.raises(SchemaViolation) as err:
        parse_fleet_spec(json.dumps({**FLEET_DOC, "vpc": "x"}))
    assert "vpc" in str(err.value)


def test_empty_fleet_value_rejected():
    with pytest.raises(SchemaViolation):
        parse_fleet_spec(json.dumps({**FLEET_DOC, "key_name": ""}))


# -- round trips on arbitrary documents ---------------------------------------

names = st.from_regex(r"[A-Za-z0-9_-]{1,20}", fullmatch=True)
keys = st.from_regex(r"[A-Za-z0-9_]{1,8}", fullmatch=True)
scalars = st.one_of(
    st.text(max_size=10), st.integers(-10**6, 10**6), st.booleans(),
    st.floats(allow_nan=False, allow_infinity=False),
)
pos = st.integers(1, 10_000)


@st.composite
def run_configs(draw):
    tpm = draw(st.integers(1, 8))
    cpu = draw(st.integers(1, 4096))
    mem = draw(st.integers(1, 8192))
    return RunConfig(
        app_name=draw(names),
        image_ref=draw(st.text(min_size=1, max_size=20)),
        machine_type=MachineType(draw(st.text(min_size=1, max_size=8)), tpm * cpu + draw(st.integers(0, 99)),
                                 tpm * mem + draw(st.integers(0, 99))),
        fleet_size=draw(pos),
        max_price_per_hour=draw(st.one_of(st.integers(0, 100),
                                          st.floats(0, 100, allow_nan=False, allow_infinity=False))),
        tasks_per_machine=tpm,
        task_cpu_units=cpu,
        task_memory_mb=mem,
        visibility_timeout_s=draw(pos),
        max_receive_count=draw(pos),
        output_prefix=draw(st.from_regex(r"[a-z]{1,5}(/[a-z]{1,5}){0,2}", fullmatch=True)),
        done_check=DoneCheck(draw(st.booleans()), draw(pos)),
        monitor_period_s=draw(pos),
        teardown_hysteresis_ticks=draw(pos),
        command_template=draw(st.text(max_size=30)),
        declared_outputs=tuple(draw(st.lists(st.text(min_size=1, max_size=6), min_size=1, max_size=3))),
    )


job_specs = st.builds(
    JobSpec,
    shared=st.dictionaries(keys, scalars, max_size=4),
    tasks=st.lists(st.dictionaries(keys, scalars, max_size=4), min_size=1, max_size=8),
)
nonempty = st.text(min_size=1, max_size=12)
fleet_specs = st.builds(
    FleetSpec, nonempty, nonempty,
    st.lists(nonempty, min_size=1, max_size=3).map(tuple),
    st.lists(nonempty, min_size=1, max_size=3).map(tuple), nonempty, nonempty,
)


@given(run_configs())
def test_run_config_round_trip(config):
    once = parse_run_config(serialize_run_config(config))
    assert once == config
    assert parse_run_config(serialize_run_config(once)) == once


@given(job_specs)
def test_job_spec_round_trip(job):
    once = parse_job_spec(serialize_job_spec(job))
    assert once == job
    assert serialize_job_spec(once) == serialize_job_spec(job)


@given(fleet_specs)
def test_fleet_spec_round_trip(spec):
    assert parse_fleet_spec(serialize_fleet_spec(spec)) == spec


# -- expandJobs -----------------------------------------------------------------

def test_expand_merges_shared_and_builds_ids():
    config = make_config()
    job = JobSpec({"pipeline": "p1"}, [{"well": "A01"}, {"well": "A02"}])
    msgs = expand_jobs(job, config)
    assert len(msgs) == 2
    assert msgs[0].parameters == {"pipeline": "p1", "well": "A01"}
    assert [m.task_id for m in msgs] == ["000000-A01", "000001-A02"]
    assert msgs[1].output_prefix == "out/000001-A02"


def test_task_level_value_wins():
    msgs = expand_jobs(JobSpec({"x": "s"}, [{"x": "t"}]), make_config())
    assert len(msgs) == 1 and msgs[0].parameters == {"x": "t"}


def test_identical_tasks_still_get_distinct_ids():
    msgs = expand_jobs(JobSpec({}, [{"w": "A"}, {"w": "A"}]), make_config())
    assert msgs[0].task_id != msgs[1].task_id


def test_ids_are_sanitized():
    msgs = expand_jobs(JobSpec({}, [{"path": "a/b c.tif"}]), make_config())
    assert msgs[0].task_id == "000000-a_b_c_tif"


def naive_expand(shared, tasks, prefix):
    """Reference merge: copy shared, overwrite with task keys one at a time."""
    out = []
    for i in range(len(tasks)):
        params = {}
        for k in shared:
            params[k] = shared[k]
        for k in tasks[i]:
            params[k] = tasks[i][k]
        out.append(params)
    return out


def test_thousand_tasks_match_naive_merge():
    rng = random.Random(1234)
    shared = {"plate": "P7", "channel": "DAPI", "z": 3}
    tasks = []
    for _ in range(1000):
        task = {"well": rng.choice("ABCDEFGH") + str(rng.randint(1, 12))}
        if rng.random() < 0.3:
            task["channel"] = rng.choice(["GFP", "RFP"])
        if rng.random() < 0.1:
            task["z"] = rng.randint(0, 9)
        tasks.append(task)
    msgs = expand_jobs(JobSpec(shared, tasks), make_config())
    assert len({m.task_id for m in msgs}) == 1000
    expected = naive_expand(shared, tasks, "out")
    assert [m.parameters for m in msgs] == expected
    as_set = {json.dumps(p, sort_keys=True) for p in expected}
    assert {json.dumps(m.parameters, sort_keys=True) for m in msgs} == as_set


@given(job_specs)
def test_expand_properties(job):
    config = make_config()
    msgs = expand_jobs(job, config)
    assert len(msgs) == len(job.tasks)
    assert len({m.task_id for m in msgs}) == len(msgs)
    for m, task in zip(msgs, job.tasks):
        for k, v in job.shared.items():
            assert k in m.parameters
            assert m.parameters[k] == task.get(k, v)
    again = expand_jobs(job, config)
    assert [m.to_dict() for m in again] == [m.to_dict() for m in msgs]


# -- validateRun ---------------------------------------------------------------

def test_valid_run_has_no_diagnostics():
    assert validate_run(make_config(), FLEET) == []


def test_zero_visibility_timeout_is_one_error():
    diags = validate_run(make_config(visibility_timeout_s=0), FLEET)
    assert [(d.severity, d.path) for d in diags] == [("error", "visibility_timeout_s")]


def test_slow_monitor_warns():
    diags = validate_run(make_config(monitor_period_s=120, visibility_timeout_s=60), FLEET)
    assert [(d.severity, d.path) for d in diags] == [("warn", "monitor_period_s")]


def test_task_count_hint_warning_only_with_hint():
    config = make_config(fleet_size=10, tasks_per_machine=2)
    assert validate_run(config, FLEET) == []
    diags = validate_run(config, FLEET, task_count_hint=5)
    assert [d.severity for d in diags] == ["warn"]


def test_infeasible_packing_and_empty_fleet_fields_are_errors():
    config = make_config(task_cpu_units=4096)
    fleet = replace(FLEET, region="", subnet_ids=())
    paths = {d.path for d in validate_run(config, fleet) if d.severity == "error"}
    assert paths == {"task_cpu_units", "fleet.region", "fleet.subnet_ids"}
