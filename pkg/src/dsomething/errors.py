"""Exception types shared across the control plane."""
from __future__ import annotations


class DSError(Exception):
    """Base class for every error raised by this package."""


# input files
class MalformedDocument(DSError):
    pass


class SchemaViolation(DSError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class InfeasiblePacking(DSError):
    pass


class EmptyTaskList(DSError):
    pass


class DuplicateTaskId(DSError):
    pass


# queue
class QueueAlreadyExists(DSError):
    pass


class QueueDeleted(DSError):
    pass


class StaleReceipt(DSError):
    """The receipt expired or was superseded; the work may be redelivered."""


# object store
class InvalidKey(DSError):
    pass


class NoSuchKey(DSError):
    pass


class IoFailure(DSError):
    pass


# fleet / placement
class FleetAlreadyActive(DSError):
    pass


class FleetCancelled(DSError):
    pass


class AlreadyRegistered(DSError):
    pass


# worker
class UnboundPlaceholder(DSError):
    def __init__(self, name: str) -> None:
        super().__init__(f"no parameter bound to placeholder {{{name}}}")
        self.name = name


class ExecutionFailed(DSError):
    pass


class MissingDeclaredOutput(ExecutionFailed):
    pass


class TaskInterrupted(DSError):
    """Execution was abandoned because the agent was told to stop."""


# telemetry
class TagMutation(DSError):
    pass


class TimestampRegression(DSError):
    pass
