"""Shared data model: job and task descriptions, state machines, event records."""

from __future__ import annotations

import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any

DEFAULT_WALLTIME_S = 3600


class ValidationError(ValueError):
    """One or more invariant violations, reported together.

    ``errors`` is a list of ``(field, reason)`` pairs.
    """

    def __init__(self, errors: Iterable[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {r}" for f, r in self.errors))

    @property
    def fields(self) -> list[str]:
        return [f for f, _ in self.errors]


class IllegalTransition(ValueError):
    def __init__(self, current: Enum, next: Enum):
        self.current = current
        self.next = next
        super().__init__(f"illegal transition {current.name} -> {next.name}")


class JobState(str, Enum):
    NEW = "NEW"
    QUEUED = "QUEUED"
    ACTIVE = "ACTIVE"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class TaskState(str, Enum):
    NEW = "NEW"
    SCHEDULING = "SCHEDULING"
    EXECUTING = "EXECUTING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class InstanceState(str, Enum):
    """Vocabulary of a nested scheduler instance's event channel."""

    NEW = "NEW"
    PENDING = "PENDING"
    RUN = "RUN"
    FINISHED = "FINISHED"
    EXCEPTION = "EXCEPTION"
    CANCELED = "CANCELED"


_J, _T, _I = JobState, TaskState, InstanceState

TRANSITIONS: dict[type[Enum], dict[Enum, frozenset[Enum]]] = {
    JobState: {
        _J.NEW: frozenset({_J.QUEUED}),
        _J.QUEUED: frozenset({_J.ACTIVE, _J.CANCELED, _J.FAILED}),
        _J.ACTIVE: frozenset({_J.COMPLETED, _J.FAILED, _J.CANCELED}),
        _J.COMPLETED: frozenset(),
        _J.FAILED: frozenset(),
        _J.CANCELED: frozenset(),
    },
    TaskState: {
        _T.NEW: frozenset({_T.SCHEDULING}),
        _T.SCHEDULING: frozenset({_T.EXECUTING, _T.CANCELED, _T.FAILED}),
        _T.EXECUTING: frozenset({_T.DONE, _T.FAILED, _T.CANCELED}),
        _T.DONE: frozenset(),
        _T.FAILED: frozenset(),
        _T.CANCELED: frozenset(),
    },
    InstanceState: {
        _I.NEW: frozenset({_I.PENDING}),
        _I.PENDING: frozenset({_I.RUN, _I.CANCELED, _I.EXCEPTION}),
        _I.RUN: frozenset({_I.FINISHED, _I.CANCELED}),
        _I.FINISHED: frozenset(),
        _I.EXCEPTION: frozenset(),
        _I.CANCELED: frozenset(),
    },
}

STATE_KINDS: dict[str, type[Enum]] = {"job": JobState, "task": TaskState, "instance": InstanceState}
_KIND_OF = {v: k for k, v in STATE_KINDS.items()}


def is_terminal(state: Enum) -> bool:
    return not TRANSITIONS[type(state)][state]


def transition(current: Enum, next: Enum) -> None:
    """Raise IllegalTransition unless ``current -> next`` is a legal edge."""
    if type(current) is not type(next):
        raise IllegalTransition(current, next)
    if next not in TRANSITIONS[type(current)][current]:
        raise IllegalTransition(current, next)


# ---------------------------------------------------------------------------
# resources and jobs


@dataclass(frozen=True)
class ResourceSpec:
    """Batch-level resource request. ``None`` marks a field as unspecified."""

    node_count: int = 0
    process_count: int | None = None
    processes_per_node: int = 0
    cores_per_process: int | None = None
    gpus_per_process: int | None = None


@dataclass(frozen=True)
class JobSpec:
    executable: str
    arguments: tuple[str, ...] = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    directory: str | None = None
    stdout_path: str | None = None
    stderr_path: str | None = None
    resources: ResourceSpec = field(default_factory=ResourceSpec)
    walltime_s: int = DEFAULT_WALLTIME_S
    queue: str | None = None
    project: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "executable": self.executable,
            "arguments": list(self.arguments),
            "environment": dict(self.environment),
            "directory": self.directory,
            "stdout_path": self.stdout_path,
            "stderr_path": self.stderr_path,
            "resources": {f.name: getattr(self.resources, f.name) for f in fields(ResourceSpec)},
            "walltime_s": self.walltime_s,
            "queue": self.queue,
            "project": self.project,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> JobSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError((k, "unknown field") for k in unknown)
        data = dict(doc)
        res = data.get("resources") or {}
        res_known = {f.name for f in fields(ResourceSpec)}
        bad = sorted(set(res) - res_known)
        if bad:
            raise ValidationError((f"resources.{k}", "unknown field") for k in bad)
        data["resources"] = ResourceSpec(**res)
        data["arguments"] = tuple(str(a) for a in data.get("arguments") or ())
        data["environment"] = {str(k): str(v) for k, v in (data.get("environment") or {}).items()}
        if data.get("walltime_s") is None:
            data.pop("walltime_s", None)
        return cls(**data)


@dataclass(frozen=True)
class ValidatedJobSpec(JobSpec):
    """A JobSpec whose invariants hold and whose defaults are resolved."""


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_job_spec(spec: JobSpec) -> ValidatedJobSpec:
    """Resolve defaults and check every invariant; raises ValidationError listing all violations."""
    errors: list[tuple[str, str]] = []
    if not isinstance(spec.executable, str) or not spec.executable.strip():
        errors.append(("executable", "empty"))
    if not _is_int(spec.walltime_s):
        errors.append(("walltime_s", "not an integer"))
    elif spec.walltime_s < 1:
        errors.append(("walltime_s", "must be >= 1"))

    r = spec.resources
    node_count = r.node_count
    ppn = r.processes_per_node
    process_count = r.process_count
    if process_count is None:
        process_count = node_count * ppn if _is_int(node_count) and _is_int(ppn) and node_count > 0 and ppn > 0 else 1
    cores = 1 if r.cores_per_process is None else r.cores_per_process
    gpus = 0 if r.gpus_per_process is None else r.gpus_per_process

    for name, value, lo in (
        ("node_count", node_count, 0),
        ("process_count", process_count, 1),
        ("processes_per_node", ppn, 0),
        ("cores_per_process", cores, 1),
        ("gpus_per_process", gpus, 0),
    ):
        if not _is_int(value):
            errors.append((name, "not an integer"))
        elif value < lo:
            errors.append((name, f"must be >= {lo}"))
    if all(_is_int(v) for v in (node_count, ppn, process_count)):
        if node_count > 0 and ppn > 0 and node_count * ppn != process_count:
            errors.append(("process_count", "inconsistent"))
    if errors:
        raise ValidationError(errors)

    resources = ResourceSpec(node_count, process_count, ppn, cores, gpus)
    values = {f.name: getattr(spec, f.name) for f in fields(JobSpec)}
    values.update(
        resources=resources,
        directory=spec.directory or os.getcwd(),
        arguments=tuple(spec.arguments),
        environment=dict(spec.environment),
    )
    return ValidatedJobSpec(**values)


# ---------------------------------------------------------------------------
# tasks


class TaskKind(str, Enum):
    EXECUTABLE = "EXECUTABLE"
    FUNCTION = "FUNCTION"


@dataclass(frozen=True)
class Payload:
    """Either an executable command line or a registered function call."""

    executable: str | None = None
    arguments: tuple[str, ...] = ()
    function: str | None = None
    args: tuple[Any, ...] = ()
    kwargs: Mapping[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> TaskKind:
        return TaskKind.FUNCTION if self.function is not None else TaskKind.EXECUTABLE

    def to_dict(self) -> dict[str, Any]:
        if self.kind is TaskKind.FUNCTION:
            return {"function": self.function, "args": list(self.args), "kwargs": dict(self.kwargs)}
        return {"executable": self.executable, "arguments": list(self.arguments)}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> Payload:
        allowed = {"executable", "arguments", "function", "args", "kwargs"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ValidationError((f"payload.{k}", "unknown field") for k in unknown)
        if ("executable" in doc) == ("function" in doc):
            raise ValidationError([("payload", "exactly one of executable or function required")])
        if "function" in doc:
            return cls(
                function=str(doc["function"]),
                args=tuple(doc.get("args") or ()),
                kwargs=dict(doc.get("kwargs") or {}),
            )
        return cls(
            executable=str(doc["executable"]),
            arguments=tuple(str(a) for a in doc.get("arguments") or ()),
        )


@dataclass(frozen=True)
class TaskDescription:
    uid: str
    payload: Payload
    ranks: int = 1
    cores_per_rank: int = 1
    gpus_per_rank: int = 0
    expected_duration_s: int | None = None

    @property
    def kind(self) -> TaskKind:
        return self.payload.kind

    @property
    def cores(self) -> int:
        return self.ranks * self.cores_per_rank

    @property
    def gpus(self) -> int:
        return self.ranks * self.gpus_per_rank

    def validate(self) -> TaskDescription:
        errors = []
        if not isinstance(self.uid, str) or not self.uid:
            errors.append(("uid", "empty"))
        for name, lo in (("ranks", 1), ("cores_per_rank", 1), ("gpus_per_rank", 0)):
            v = getattr(self, name)
            if not _is_int(v):
                errors.append((name, "not an integer"))
            elif v < lo:
                errors.append((name, f"must be >= {lo}"))
        d = self.expected_duration_s
        if d is not None and (not _is_int(d) or d < 0):
            errors.append(("expected_duration_s", "must be a nonnegative integer"))
        if self.payload.kind is TaskKind.EXECUTABLE and not self.payload.executable:
            errors.append(("payload", "empty executable"))
        if errors:
            raise ValidationError(errors)
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "uid": self.uid,
            "kind": self.kind.value,
            "payload": self.payload.to_dict(),
            "ranks": self.ranks,
            "cores_per_rank": self.cores_per_rank,
            "gpus_per_rank": self.gpus_per_rank,
            "expected_duration_s": self.expected_duration_s,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> TaskDescription:
        data = dict(doc)
        kind = data.pop("kind", None)
        payload = Payload.from_dict(data.pop("payload", None) or {})
        if kind is not None and TaskKind(kind) is not payload.kind:
            raise ValidationError([("kind", "does not match payload")])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError((k, "unknown field") for k in unknown)
        return cls(payload=payload, **data).validate()


@dataclass(frozen=True)
class NodeResources:
    node_id: str
    cores: int
    gpus: int = 0


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True, slots=True)
class EventRecord:
    timestamp: int
    subject_id: str
    old_state: Enum
    new_state: Enum
    detail: Mapping[str, str] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return _KIND_OF[type(self.new_state)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "subject_id": self.subject_id,
            "kind": self.kind,
            "old_state": self.old_state.value,
            "new_state": self.new_state.value,
            "detail": {k: self.detail[k] for k in sorted(self.detail)},
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> EventRecord:
        enum = STATE_KINDS[doc["kind"]]
        return cls(
            int(doc["timestamp"]),
            str(doc["subject_id"]),
            enum(doc["old_state"]),
            enum(doc["new_state"]),
            {str(k): str(v) for k, v in (doc.get("detail") or {}).items()},
        )


def replay(events: Iterable[EventRecord]) -> dict[tuple[str, str], Enum]:
    """Check a log against the transition graphs; return the final state per (kind, subject).

    Every subject must start from NEW, each record's old_state must equal the
    subject's current state, timestamps must not decrease, and nothing may
    follow a terminal state.
    """
    current: dict[tuple[str, str], Enum] = {}
    last_ts: dict[tuple[str, str], int] = {}
    for ev in events:
        key = (ev.kind, ev.subject_id)
        state = current.get(key, type(ev.new_state).NEW)
        if ev.old_state is not state:
            raise IllegalTransition(state, ev.new_state)
        transition(state, ev.new_state)
        if ev.timestamp < last_ts.get(key, ev.timestamp):
            raise ValueError(f"timestamps decrease for {ev.subject_id}")
        current[key] = ev.new_state
        last_ts[key] = ev.timestamp
    return current
