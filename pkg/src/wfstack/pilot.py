"""Pilot runtime: one placeholder batch job hosting k nested scheduler instances."""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .lrm.base import Executor, JobHandle
from .model import (
    EventRecord,
    InstanceState,
    JobSpec,
    JobState,
    NodeResources,
    ResourceSpec,
    TaskDescription,
    TaskState,
    ValidationError,
    is_terminal,
)
from .scheduler import SchedulerInstance, Unsatisfiable

log = logging.getLogger(__name__)


class PilotNotReady(RuntimeError):
    pass


class BootstrapError(RuntimeError):
    pass


class InvalidPartition(ValueError):
    pass


class UnknownEvent(ValueError):
    pass


class DuplicateUid(ValueError):
    pass


@dataclass(frozen=True)
class PilotDescription:
    resources: ResourceSpec
    walltime_s: int
    instance_count: int = 1
    platform: str = "default"

    def validate(self) -> PilotDescription:
        errors = []
        nodes = self.resources.node_count
        if not isinstance(nodes, int) or nodes < 1:
            errors.append(("node_count", "must be >= 1"))
        if not isinstance(self.instance_count, int) or self.instance_count < 1:
            errors.append(("instance_count", "must be >= 1"))
        elif isinstance(nodes, int) and self.instance_count > nodes:
            errors.append(("instance_count", "exceeds node_count"))
        if not isinstance(self.walltime_s, int) or self.walltime_s < 1:
            errors.append(("walltime_s", "must be >= 1"))
        if errors:
            raise ValidationError(errors)
        return self


@dataclass(frozen=True)
class Allocation:
    nodes: tuple[NodeResources, ...]
    job_id: str

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("allocation node ids must be unique")


def partition_nodes(allocation: Allocation | Sequence[Any], k: int) -> list[list[Any]]:
    """Split the node list into k contiguous blocks whose sizes differ by at most one.

    The first ``len(nodes) % k`` blocks get the extra node.
    """
    nodes = list(allocation.nodes if isinstance(allocation, Allocation) else allocation)
    n = len(nodes)
    if not isinstance(k, int) or not 1 <= k <= n:
        raise InvalidPartition(f"cannot split {n} nodes into {k} subsets")
    base, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(nodes[start:start + size])
        start += size
    return out


# ---------------------------------------------------------------------------
# event conversion

_SIMPLE = {
    InstanceState.PENDING: TaskState.SCHEDULING,
    InstanceState.RUN: TaskState.EXECUTING,
    InstanceState.CANCELED: TaskState.CANCELED,
    InstanceState.EXCEPTION: TaskState.FAILED,
}


class EventConverter:
    """Maps an instance's event vocabulary onto pilot task states, one event at a time."""

    def __init__(self):
        self.states: dict[str, TaskState] = {}

    def convert(self, ev: EventRecord) -> EventRecord:
        state = ev.new_state
        if state is InstanceState.FINISHED:
            try:
                code = int(ev.detail["exit_code"])
            except (KeyError, ValueError):
                raise UnknownEvent(f"finish event for {ev.subject_id} without exit_code") from None
            new = TaskState.DONE if code == 0 else TaskState.FAILED
        elif state in _SIMPLE:
            new = _SIMPLE[state]
        else:
            raise UnknownEvent(f"no task state for instance event {state!r} ({ev.subject_id})")
        old = self.states.get(ev.subject_id, TaskState.NEW)
        self.states[ev.subject_id] = new
        return EventRecord(ev.timestamp, ev.subject_id, old, new, dict(ev.detail))


def convert_events(instance_events: Iterable[EventRecord]) -> list[EventRecord]:
    conv = EventConverter()
    return [conv.convert(ev) for ev in instance_events]


# ---------------------------------------------------------------------------
# balancing


class RoundRobin:
    name = "round-robin"

    def __init__(self):
        self._next = 0

    def choose(self, task: TaskDescription, pilot: Pilot) -> int:
        k = len(pilot.instances)
        for step in range(k):
            i = (self._next + step) % k
            if pilot.instances[i].inventory.satisfiable(task):
                self._next = i + 1
                return i
        raise Unsatisfiable(task.uid)


class LeastQueue:
    """Instance with the fewest outstanding tasks; ties go to the lowest index."""

    name = "least-queue"

    def choose(self, task: TaskDescription, pilot: Pilot) -> int:
        best = None
        for i, inst in enumerate(pilot.instances):
            if not inst.inventory.satisfiable(task):
                continue
            if best is None or pilot.outstanding[i] < pilot.outstanding[best]:
                best = i
        if best is None:
            raise Unsatisfiable(task.uid)
        return best


POLICIES = {RoundRobin.name: RoundRobin, LeastQueue.name: LeastQueue}


# ---------------------------------------------------------------------------
# pilot


@dataclass
class TaskHandle:
    uid: str
    description: TaskDescription
    instance: int
    state: TaskState = TaskState.NEW
    exit_code: int | None = None
    result: Any = None
    detail: dict[str, str] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return is_terminal(self.state)


class Pilot:
    """Handle on a submitted pilot.

    The pilot turns ready once its batch job is ACTIVE and the agent has
    started one scheduler instance per node subset. Its state follows the
    batch job, except that a bootstrap failure marks it FAILED.
    """

    def __init__(self, desc: PilotDescription, executor: Executor, *, policy: str = "round-robin",
                 launch_rate: int = 0, sandbox: str | Path | None = None):
        self.description = desc.validate()
        self.executor = executor
        self.runtime = executor.runtime
        self.policy = POLICIES[policy]()
        self.launch_rate = launch_rate
        self.sandbox = sandbox
        self.job_id: str | None = None
        self.allocation: Allocation | None = None
        self.instances: list[SchedulerInstance] = []
        self.outstanding: list[int] = []
        self.tasks: dict[str, TaskHandle] = {}
        self.task_events: list[EventRecord] = []
        self.instance_events: list[EventRecord] = []
        self.unknown_events: list[EventRecord] = []
        self.error: Exception | None = None
        self.ready = False
        self._state = JobState.NEW
        self._pending = 0
        self._watchers: list[Callable[[TaskHandle], None]] = []
        self._converter = EventConverter()
        self._lock = threading.RLock()
        self._agent = self.runtime.channel("~pilot-agent", self._handle)

    # -- lifecycle ---------------------------------------------------------

    @property
    def state(self) -> JobState:
        return self._state

    @property
    def job(self) -> JobHandle:
        return self.executor.status(self.job_id)

    def _start(self) -> None:
        d = self.description
        exe, args = self.executor.hold_command()
        spec = JobSpec(
            executable=exe,
            arguments=tuple(args),
            resources=ResourceSpec(node_count=d.resources.node_count),
            walltime_s=d.walltime_s,
            environment={"WFSTACK_PILOT_PLATFORM": d.platform},
        )
        self.executor.subscribe(self._on_job_event)
        with self._lock:
            handle = self.executor.submit(spec)
            self.job_id = handle.job_id
            self._state = handle.state

    def _on_job_event(self, ev: EventRecord) -> None:
        with self._lock:
            if ev.subject_id != self.job_id:
                return
        self._agent.post(("job", ev))

    def _handle(self, msg) -> None:
        kind, ev = msg
        if kind == "job":
            self._on_job(ev)
        else:
            self._on_instance_event(ev)

    def _on_job(self, ev: EventRecord) -> None:
        if self.error is None:
            self._state = ev.new_state
        if ev.new_state is JobState.ACTIVE:
            try:
                self._bootstrap()
            except BootstrapError as exc:
                log.error("pilot bootstrap failed: %s", exc)
                self.error = exc
                self._state = JobState.FAILED
                self.executor.cancel(self.job_id)
        elif is_terminal(ev.new_state):
            self.ready = False
            reason = ev.detail.get("reason", ev.new_state.value.lower())
            for inst in self.instances:
                inst.cancel_all(f"pilot {reason}")
        self.runtime.notify()

    def _bootstrap(self) -> None:
        job = self.executor.status(self.job_id)
        self.allocation = Allocation(tuple(job.nodes), job.job_id)
        k = self.description.instance_count
        if k > len(self.allocation.nodes):
            raise BootstrapError(f"{k} instances requested but only {len(self.allocation.nodes)} nodes granted")
        subsets = partition_nodes(self.allocation, k)
        instances = []
        for i, nodes in enumerate(subsets):
            emit = self._instance_emitter()
            instances.append(SchedulerInstance(f"{self.job_id}.flux{i}", nodes, self.runtime, emit,
                                               launch_rate=self.launch_rate, sandbox=self.sandbox))
        with self._lock:
            self.instances = instances
            self.outstanding = [0] * k
            self.ready = True

    def _instance_emitter(self):
        post = self._agent.post
        return lambda ev: post(("instance", ev))

    def wait_ready(self, timeout: float | None = None) -> bool:
        return self.runtime.wait_until(lambda: self.ready or is_terminal(self._state), timeout) and self.ready

    # -- tasks -------------------------------------------------------------

    def add_watcher(self, callback: Callable[[TaskHandle], None]) -> None:
        """``callback(handle)`` runs on the conversion loop when a task turns terminal; it must not block."""
        self._watchers.append(callback)

    def submit_tasks(self, tasks: Iterable[TaskDescription]) -> list[TaskHandle]:
        tasks = [t.validate() for t in tasks]
        with self._lock:
            if not self.ready:
                raise PilotNotReady(f"pilot is {self._state.value}")
            seen = set()
            for t in tasks:
                if t.uid in self.tasks or t.uid in seen:
                    raise DuplicateUid(t.uid)
                seen.add(t.uid)
                if not any(inst.inventory.satisfiable(t) for inst in self.instances):
                    raise Unsatisfiable(f"task {t.uid} exceeds every instance's node subset")
            handles = []
            for t in tasks:
                i = self.policy.choose(t, self)
                h = TaskHandle(t.uid, t, i)
                self.tasks[t.uid] = h
                self.outstanding[i] += 1
                self._pending += 1
                handles.append(h)
                self.instances[i].submit(t)
        return handles

    def cancel_task(self, uid: str) -> None:
        h = self.tasks[uid]
        self.instances[h.instance].cancel(uid)

    def _on_instance_event(self, ev: EventRecord) -> None:
        self.instance_events.append(ev)
        try:
            tev = self._converter.convert(ev)
        except UnknownEvent:
            log.error("unmapped instance event %r", ev)
            self.unknown_events.append(ev)
            return
        self.task_events.append(tev)
        h = self.tasks[tev.subject_id]
        with self._lock:
            h.state = tev.new_state
            h.detail.update(tev.detail)
            if "exit_code" in tev.detail:
                h.exit_code = int(tev.detail["exit_code"])
            if tev.new_state is TaskState.DONE or (
                tev.new_state is TaskState.FAILED and h.exit_code is not None
            ):
                h.result = self.instances[h.instance].results.get(h.uid)
            if h.terminal:
                self.outstanding[h.instance] -= 1
                self._pending -= 1
        if h.terminal:
            self.runtime.notify()
            for cb in self._watchers:
                cb(h)

    @property
    def all_done(self) -> bool:
        return self._pending == 0

    def wait_tasks(self, timeout: float | None = None) -> bool:
        return self.runtime.wait_until(lambda: self.all_done, timeout)

    def shutdown(self, deadline: float | None = None) -> None:
        """Drain for up to ``deadline``, cancel what is left, then release the allocation."""
        if self.ready:
            self.wait_tasks(deadline)
            for inst in self.instances:
                inst.cancel_all("pilot shutdown")
            self.wait_tasks(None if self.runtime.simulated else 30)
        if self.job_id is not None and not self.executor.status(self.job_id).terminal:
            self.executor.cancel(self.job_id)
            self.runtime.wait_until(lambda: is_terminal(self._state), None if self.runtime.simulated else 30)
        for inst in self.instances:
            inst.close()
        self._agent.close()


def submit_pilot(desc: PilotDescription, executor: Executor, **kwargs: Any) -> Pilot:
    pilot = Pilot(desc, executor, **kwargs)
    pilot._start()
    return pilot
