"""Queue-driven batch runs of a containerized task on a spot-style fleet.

Deterministic simulated backend and a local-process backend.
"""
from .errors import DSError
from .specfiles import (
    FleetSpec,
    JobSpec,
    RunConfig,
    TaskMessage,
    expand_jobs,
    parse_fleet_spec,
    parse_job_spec,
    parse_run_config,
    validate_run,
)

__all__ = [
    "DSError",
    "FleetSpec",
    "JobSpec",
    "RunConfig",
    "TaskMessage",
    "expand_jobs",
    "parse_fleet_spec",
    "parse_job_spec",
    "parse_run_config",
    "validate_run",
]
__version__ = "0.1.0"
