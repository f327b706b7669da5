"""The job executor interface: submit, cancel, status, wait."""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from ..model import (
    EventRecord,
    JobSpec,
    JobState,
    NodeResources,
    ValidatedJobSpec,
    is_terminal,
    transition,
    validate_job_spec,
)

log = logging.getLogger(__name__)


class SubmissionError(RuntimeError):
    pass


class JobNotFound(KeyError):
    pass


class WaitTimeout(TimeoutError):
    pass


class CancelResult(Enum):
    OK = "ok"
    ALREADY_TERMINAL = "already-terminal"


class Capability(Enum):
    REAL_EXEC = "REAL_EXEC"
    SIMULATED = "SIMULATED"
    SCRIPT_RENDERING = "SCRIPT_RENDERING"


@dataclass(frozen=True)
class ExecutorDescriptor:
    name: str
    capabilities: frozenset[Capability]


@dataclass(frozen=True)
class JobHandle:
    """Immutable snapshot of a job."""

    job_id: str
    spec: ValidatedJobSpec
    state: JobState = JobState.NEW
    exit_code: int | None = None
    native_id: str | None = None
    submit_time: int | None = None
    start_time: int | None = None
    end_time: int | None = None
    nodes: tuple[NodeResources, ...] = ()
    detail: Mapping[str, str] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return is_terminal(self.state)


class Executor:
    """Common bookkeeping for backends.

    Subclasses implement ``_enqueue`` and ``_cancel``; every state change goes
    through ``_transition`` which checks the legal graph, stores a new
    snapshot, notifies waiters and publishes an ``EventRecord``.
    """

    descriptor: ExecutorDescriptor
    id_prefix = "job"

    def __init__(self, runtime):
        self.runtime = runtime
        self._jobs: dict[str, JobHandle] = {}
        self._lock = threading.RLock()
        self._subscribers: list[Callable[[EventRecord], None]] = []
        self._counter = 0
        self._closed = False
        self.events: list[EventRecord] = []

    @property
    def name(self) -> str:
        return self.descriptor.name

    def subscribe(self, callback: Callable[[EventRecord], None]) -> None:
        self._subscribers.append(callback)

    def hold_command(self) -> tuple[str, tuple[str, ...]]:
        """A command that occupies its allocation until canceled (used for pilot jobs)."""
        raise NotImplementedError

    # -- public interface --------------------------------------------------

    def submit(self, spec: JobSpec) -> JobHandle:
        if self._closed:
            raise SubmissionError(f"executor {self.name} is shut down")
        if not isinstance(spec, ValidatedJobSpec):
            spec = validate_job_spec(spec)
        self.check_capacity(spec)
        with self._lock:
            self._counter += 1
            job_id = f"{self.id_prefix}.{self._counter:06d}"
            self._jobs[job_id] = JobHandle(job_id, spec)
            handle = self._transition(job_id, JobState.QUEUED, submit_time=self.runtime.now())
        self._enqueue(job_id)
        return handle

    def status(self, job_id: str) -> JobHandle:
        with self._lock:
            try:
                return self._jobs[job_id]
            except KeyError:
                raise JobNotFound(job_id) from None

    def cancel(self, job_id: str) -> CancelResult:
        if self.status(job_id).terminal:
            return CancelResult.ALREADY_TERMINAL
        self._cancel(job_id)
        return CancelResult.OK

    def wait(self, job_id: str, timeout: float | None = None) -> JobHandle:
        """Block until the job is terminal. ``timeout`` is seconds (ticks when simulated)."""
        self.status(job_id)
        if not self.runtime.wait_until(lambda: self._jobs[job_id].terminal, timeout):
            raise WaitTimeout(f"{job_id} not terminal after {timeout}")
        return self.status(job_id)

    def jobs(self) -> list[JobHandle]:
        with self._lock:
            return list(self._jobs.values())

    def shutdown(self) -> None:
        self._closed = True

    # -- backend hooks -----------------------------------------------------

    def check_capacity(self, spec: ValidatedJobSpec) -> None:
        pass

    def _enqueue(self, job_id: str) -> None:
        raise NotImplementedError

    def _cancel(self, job_id: str) -> None:
        raise NotImplementedError

    def _transition(self, job_id: str, new: JobState, detail: Mapping[str, str] | None = None,
                    **changes: Any) -> JobHandle:
        with self._lock:
            old = self._jobs[job_id]
            transition(old.state, new)
            now = self.runtime.now()
            if new is JobState.ACTIVE:
                changes.setdefault("start_time", now)
            if is_terminal(new):
                changes.setdefault("end_time", now)
            merged = dict(old.detail)
            if detail:
                merged.update(detail)
            handle = replace(old, state=new, detail=merged, **changes)
            self._jobs[job_id] = handle
            ev_detail = {k: str(v) for k, v in (detail or {}).items()}
            if handle.exit_code is not None and is_terminal(new):
                ev_detail["exit_code"] = str(handle.exit_code)
            if new is JobState.ACTIVE and handle.nodes:
                ev_detail["node_ids"] = ",".join(n.node_id for n in handle.nodes)
            ev = EventRecord(now, job_id, old.state, new, ev_detail)
            self.events.append(ev)
        self.runtime.notify()
        for cb in list(self._subscribers):
            try:
                cb(ev)
            except Exception:
                log.exception("job event subscriber failed")
        return handle


# ---------------------------------------------------------------------------
# registry

_REGISTRY: dict[str, tuple[ExecutorDescriptor, Callable[..., Executor]]] = {}


def register_executor(descriptor: ExecutorDescriptor, factory: Callable[..., Executor]) -> None:
    if descriptor.name in _REGISTRY:
        raise ValueError(f"executor {descriptor.name!r} already registered")
    _REGISTRY[descriptor.name] = (descriptor, factory)


def executor_names() -> list[str]:
    return sorted(_REGISTRY)


def get_descriptor(name: str) -> ExecutorDescriptor:
    return _REGISTRY[name][0]


def create_executor(name: str, **kwargs: Any) -> Executor:
    try:
        _, factory = _REGISTRY[name]
    except KeyError:
        raise LookupError(f"unknown executor {name!r}; available: {', '.join(executor_names())}") from None
    return factory(**kwargs)


# functional spellings of the interface


def submit(executor: Executor, spec: JobSpec) -> JobHandle:
    return executor.submit(spec)


def cancel(executor: Executor, job_id: str) -> CancelResult:
    return executor.cancel(job_id)


def status(executor: Executor, job_id: str) -> JobHandle:
    return executor.status(job_id)


def wait(executor: Executor, job_id: str, timeout: float | None = None) -> JobHandle:
    return executor.wait(job_id, timeout)
