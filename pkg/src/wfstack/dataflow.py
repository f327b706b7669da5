"""Dataflow engine: a dependency graph of nodes whose futures resolve as tasks finish.

Ready nodes are translated into ``TaskDescription`` objects and handed to a
task executor (normally a ``Pilot``). A failed or canceled node errors all of
its transitive dependents without submitting them; independent branches keep
running.
"""

from __future__ import annotations

import json
import queue
import threading
from collections.abc import Iterable, Mapping
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .lrm.base import Executor
from .model import JobSpec, JobState, Payload, ResourceSpec, TaskDescription, TaskKind, TaskState, ValidationError

DEPENDENCY_FAILED = "dependency failed"
RESOURCE_KEYS = ("ranks", "cores_per_rank", "gpus_per_rank")
_MINIMUM = {"ranks": 1, "cores_per_rank": 1, "gpus_per_rank": 0}


class CyclicDependency(ValueError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("cyclic dependency: " + " -> ".join(cycle))


class DanglingReference(ValueError):
    def __init__(self, uid: str, missing: str):
        self.uid = uid
        self.missing = missing
        super().__init__(f"{uid} depends on unknown node {missing!r}")


class TranslationError(ValueError):
    pass


class ExecutorUnavailable(RuntimeError):
    pass


class DependencyFailed(RuntimeError):
    pass


class TaskFailed(RuntimeError):
    def __init__(self, uid: str, state: TaskState, exit_code: int | None, detail: Mapping[str, str]):
        self.uid = uid
        self.state = state
        self.exit_code = exit_code
        self.detail = dict(detail)
        msg = detail.get("error") or detail.get("reason") or f"exit code {exit_code}"
        super().__init__(f"{uid} {state.value}: {msg}")


@dataclass
class DataflowNode:
    uid: str
    payload: Payload
    depends_on: frozenset[str] = frozenset()
    resource_specification: Mapping[str, Any] | None = None
    expected_duration_s: int | None = None
    future: Future = field(default_factory=Future, compare=False, repr=False)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "uid": self.uid,
            "payload": self.payload.to_dict(),
            "depends_on": sorted(self.depends_on),
        }
        if self.resource_specification is not None:
            doc["resource_specification"] = dict(self.resource_specification)
        if self.expected_duration_s is not None:
            doc["expected_duration_s"] = self.expected_duration_s
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> DataflowNode:
        allowed = {"uid", "payload", "depends_on", "resource_specification", "expected_duration_s"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ValidationError((k, "unknown field") for k in unknown)
        if not doc.get("uid"):
            raise ValidationError([("uid", "empty")])
        payload = Payload.from_dict(doc.get("payload") or {})
        deps = {str(d) for d in doc.get("depends_on") or ()}
        # a {"ref": uid} argument is an implicit dependency
        deps |= _refs(payload.args) | _refs(payload.kwargs)
        return cls(
            uid=str(doc["uid"]),
            payload=payload,
            depends_on=frozenset(deps),
            resource_specification=doc.get("resource_specification"),
            expected_duration_s=doc.get("expected_duration_s"),
        )


class WorkflowGraph:
    def __init__(self, nodes: Iterable[DataflowNode] = ()):
        self.nodes: dict[str, DataflowNode] = {}
        for n in nodes:
            self.add(n)

    def add(self, node: DataflowNode) -> DataflowNode:
        if node.uid in self.nodes:
            raise ValidationError([("uid", f"duplicate {node.uid!r}")])
        self.nodes[node.uid] = node
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return sum(len(n.depends_on) for n in self.nodes.values())

    def dependents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {u: [] for u in self.nodes}
        for n in self.nodes.values():
            for d in n.depends_on:
                out[d].append(n.uid)
        return out

    def to_documents(self) -> list[dict[str, Any]]:
        return [self.nodes[u].to_dict() for u in sorted(self.nodes)]


def load_workflow(path: str | Path) -> WorkflowGraph:
    """Read a workflow file: a YAML or JSON list of node documents."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    docs = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if isinstance(docs, dict) and "nodes" in docs:
        docs = docs["nodes"]
    if not isinstance(docs, list):
        raise ValidationError([("workflow", "expected a list of node documents")])
    return WorkflowGraph(DataflowNode.from_dict(d) for d in docs)


def validate_graph(graph: WorkflowGraph) -> None:
    """Raise DanglingReference or CyclicDependency (with one witness cycle)."""
    nodes = graph.nodes
    for uid in sorted(nodes):
        for dep in sorted(nodes[uid].depends_on):
            if dep not in nodes:
                raise DanglingReference(uid, dep)
    # iterative DFS; edges point from a node to what it depends on
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(nodes, WHITE)
    for root in sorted(nodes):
        if color[root] != WHITE:
            continue
        path = [root]
        stack = [iter(sorted(nodes[root].depends_on))]
        color[root] = GREY
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                color[path.pop()] = BLACK
                stack.pop()
            elif color[nxt] == GREY:
                start = path.index(nxt)
                raise CyclicDependency(path[start:] + [nxt])
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append(iter(sorted(nodes[nxt].depends_on)))


def translate_task(node: DataflowNode) -> TaskDescription:
    """Map a dataflow node onto a pilot task; unknown or out-of-range keys are errors."""
    spec = dict(node.resource_specification or {})
    unknown = sorted(set(spec) - set(RESOURCE_KEYS))
    if unknown:
        raise TranslationError(f"{node.uid}: unknown resource keys {unknown}")
    values = {}
    for key in RESOURCE_KEYS:
        v = spec.get(key, _MINIMUM[key])
        if not isinstance(v, int) or isinstance(v, bool):
            raise TranslationError(f"{node.uid}: {key} must be an integer, got {v!r}")
        if v < _MINIMUM[key]:
            raise TranslationError(f"{node.uid}: {key} must be >= {_MINIMUM[key]}, got {v}")
        values[key] = v
    return TaskDescription(node.uid, node.payload, expected_duration_s=node.expected_duration_s, **values)


def resource_map(task: TaskDescription) -> dict[str, int]:
    """The resource specification a task description encodes."""
    return {k: getattr(task, k) for k in RESOURCE_KEYS}


# ---------------------------------------------------------------------------
# programming model


def _resolve(value: Any, results: Mapping[str, Any]) -> Any:
    if isinstance(value, Mapping):
        if set(value) == {"ref"}:
            return results[value["ref"]]
        return {k: _resolve(v, results) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return type(value)(_resolve(v, results) for v in value)
    return value


def _refs(value: Any) -> set[str]:
    if isinstance(value, Mapping):
        if set(value) == {"ref"}:
            return {value["ref"]}
        return set().union(*(_refs(v) for v in value.values())) if value else set()
    if isinstance(value, (list, tuple)):
        return set().union(*(_refs(v) for v in value)) if value else set()
    return set()


class AppFuture:
    """Placeholder for an app invocation's result inside a ``Workflow``."""

    def __init__(self, node: DataflowNode):
        self.node = node

    @property
    def uid(self) -> str:
        return self.node.uid

    def result(self, timeout: float | None = None) -> Any:
        return self.node.future.result(timeout)

    def exception(self, timeout: float | None = None):
        return self.node.future.exception(timeout)


class Workflow:
    """Builds a graph implicitly: passing an AppFuture to an app adds a dependency.

    >>> wf = Workflow()
    >>> a = wf.call("add", 1, 2)
    >>> b = wf.call("add", a, 10)
    >>> sorted(wf.graph.nodes[b.uid].depends_on) == [a.uid]
    True
    """

    def __init__(self, prefix: str = "app"):
        self.graph = WorkflowGraph()
        self.prefix = prefix
        self._n = 0

    def _uid(self, uid: str | None) -> str:
        if uid:
            return uid
        self._n += 1
        return f"{self.prefix}{self._n:05d}"

    def call(self, function: str, *args: Any, uid: str | None = None,
             resource_specification: Mapping[str, int] | None = None,
             after: Iterable[AppFuture] = (), expected_duration_s: int | None = None,
             **kwargs: Any) -> AppFuture:
        def unwrap(v):
            if isinstance(v, AppFuture):
                return {"ref": v.uid}
            if isinstance(v, (list, tuple)):
                return type(v)(unwrap(x) for x in v)
            return v

        args = tuple(unwrap(a) for a in args)
        kwargs = {k: unwrap(v) for k, v in kwargs.items()}
        deps = _refs(args) | _refs(kwargs) | {f.uid for f in after}
        node = DataflowNode(self._uid(uid), Payload(function=function, args=args, kwargs=kwargs),
                            frozenset(deps), resource_specification, expected_duration_s)
        self.graph.add(node)
        return AppFuture(node)

    def bash(self, command: str, *, uid: str | None = None, after: Iterable[AppFuture] = (),
             resource_specification: Mapping[str, int] | None = None,
             expected_duration_s: int | None = None) -> AppFuture:
        node = DataflowNode(self._uid(uid), Payload(executable="/bin/sh", arguments=("-c", command)),
                            frozenset(f.uid for f in after), resource_specification, expected_duration_s)
        self.graph.add(node)
        return AppFuture(node)

    def run(self, executor) -> dict[str, NodeOutcome]:
        return run(self.graph, executor)


# ---------------------------------------------------------------------------
# kernel


@dataclass
class NodeOutcome:
    uid: str
    state: TaskState
    value: Any = None
    exit_code: int | None = None
    error: str | None = None
    submitted: bool = True

    @property
    def ok(self) -> bool:
        return self.state is TaskState.DONE

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"status": self.state.value, "exit_code": self.exit_code}
        if self.error:
            doc["detail"] = self.error
        if self.value is not None:
            try:
                yaml.safe_dump(self.value)
                doc["value"] = self.value
            except yaml.YAMLError:
                doc["value"] = repr(self.value)
        return doc


class PilotTaskExecutor:
    """Adapts a Pilot to the kernel's submit-with-callback contract."""

    def __init__(self, pilot):
        self.pilot = pilot
        self.runtime = pilot.runtime
        self._callbacks: dict[str, Any] = {}
        pilot.add_watcher(self._on_terminal)

    def available(self) -> bool:
        return self.pilot.ready

    def submit(self, tasks: list[TaskDescription], callback) -> None:
        for t in tasks:
            self._callbacks[t.uid] = callback
        self.pilot.submit_tasks(tasks)

    def _on_terminal(self, handle) -> None:
        cb = self._callbacks.pop(handle.uid, None)
        if cb is not None:
            cb(handle.uid, handle.state, handle.exit_code, handle.result, handle.detail)


_JOB_TO_TASK = {JobState.COMPLETED: TaskState.DONE, JobState.FAILED: TaskState.FAILED,
                JobState.CANCELED: TaskState.CANCELED}


class JobTaskExecutor:
    """Runs each task as its own batch job; executable payloads only."""

    def __init__(self, executor: Executor):
        self.executor = executor
        self.runtime = executor.runtime
        self._pending: dict[str, tuple[str, Any]] = {}
        self._lock = threading.Lock()
        executor.subscribe(self._on_event)

    def available(self) -> bool:
        return True

    def submit(self, tasks: list[TaskDescription], callback) -> None:
        for t in tasks:
            if t.kind is TaskKind.FUNCTION:
                callback(t.uid, TaskState.FAILED, None, None,
                         {"error": "function payloads need a pilot executor"})
                continue
            spec = JobSpec(
                executable=t.payload.executable,
                arguments=t.payload.arguments,
                resources=ResourceSpec(process_count=t.ranks, cores_per_process=t.cores_per_rank,
                                       gpus_per_process=t.gpus_per_rank),
            )
            # hold the lock across submit so a fast job cannot finish before it is tracked
            with self._lock:
                handle = self.executor.submit(spec)
                self._pending[handle.job_id] = (t.uid, callback)

    def _on_event(self, ev) -> None:
        if ev.new_state not in _JOB_TO_TASK:
            return
        with self._lock:
            entry = self._pending.pop(ev.subject_id, None)
        if entry is not None:
            uid, callback = entry
            code = ev.detail.get("exit_code")
            code = None if code is None else int(code)
            callback(uid, _JOB_TO_TASK[ev.new_state], code, code, dict(ev.detail))


def _as_task_executor(executor):
    if hasattr(executor, "submit_tasks") and hasattr(executor, "add_watcher"):
        return PilotTaskExecutor(executor)
    if isinstance(executor, Executor):
        return JobTaskExecutor(executor)
    return executor


def run(graph: WorkflowGraph, executor) -> dict[str, NodeOutcome]:
    """Execute the graph; returns an outcome for every node, failures included."""
    validate_graph(graph)
    tex = _as_task_executor(executor)
    if not tex.available():
        raise ExecutorUnavailable("executor is not ready")
    runtime = tex.runtime
    nodes = graph.nodes
    for n in nodes.values():
        if n.future.done():
            n.future = Future()
    dependents = graph.dependents()
    waiting = {u: len(n.depends_on) for u, n in nodes.items()}
    outcomes: dict[str, NodeOutcome] = {}
    values: dict[str, Any] = {}
    inbox: queue.SimpleQueue = queue.SimpleQueue()

    def on_done(uid, state, exit_code, result, detail):
        inbox.put((uid, state, exit_code, result, dict(detail)))
        runtime.notify()

    def settle(outcome: NodeOutcome) -> None:
        outcomes[outcome.uid] = outcome
        fut = nodes[outcome.uid].future
        if outcome.ok:
            values[outcome.uid] = outcome.value
            fut.set_result(outcome.value)
        elif outcome.error == DEPENDENCY_FAILED:
            fut.set_exception(DependencyFailed(outcome.error))
        elif not outcome.submitted:
            fut.set_exception(TranslationError(outcome.error))
        else:
            fut.set_exception(TaskFailed(outcome.uid, outcome.state, outcome.exit_code,
                                         {"error": outcome.error or ""}))

    def fail_dependents(uid: str) -> None:
        stack = list(dependents[uid])
        while stack:
            d = stack.pop()
            if d in outcomes:
                continue
            settle(NodeOutcome(d, TaskState.CANCELED, error=DEPENDENCY_FAILED, submitted=False))
            stack.extend(dependents[d])

    def submit_ready(uids: list[str]) -> None:
        batch = []
        for uid in sorted(uids):
            node = nodes[uid]
            try:
                task = translate_task(node)
                p = task.payload
                if p.function is not None:
                    p = Payload(function=p.function, args=_resolve(p.args, values), kwargs=_resolve(p.kwargs, values))
                    task = TaskDescription(task.uid, p, task.ranks, task.cores_per_rank, task.gpus_per_rank,
                                           task.expected_duration_s)
            except (TranslationError, ValidationError) as exc:
                settle(NodeOutcome(uid, TaskState.FAILED, error=str(exc), submitted=False))
                fail_dependents(uid)
                continue
            batch.append(task)
        if not batch:
            return
        try:
            tex.submit(batch, on_done)
            return
        except (ValueError, RuntimeError):
            pass
        # the whole batch was refused; retry one by one so only the offenders fail
        for task in batch:
            try:
                tex.submit([task], on_done)
            except (ValueError, RuntimeError) as exc:
                settle(NodeOutcome(task.uid, TaskState.FAILED, error=f"{type(exc).__name__}: {exc}"))
                fail_dependents(task.uid)

    submit_ready([u for u, c in waiting.items() if c == 0])
    while len(outcomes) < len(nodes):
        ready = []
        while True:
            try:
                uid, state, exit_code, result, detail = inbox.get_nowait()
            except queue.Empty:
                break
            error = detail.get("error") or (detail.get("reason") if state is not TaskState.DONE else None)
            settle(NodeOutcome(uid, state, result, exit_code, error))
            if state is TaskState.DONE:
                for d in dependents[uid]:
                    waiting[d] -= 1
                    if waiting[d] == 0 and d not in outcomes:
                        ready.append(d)
            else:
                fail_dependents(uid)
        if ready:
            submit_ready(ready)
            continue
        if len(outcomes) < len(nodes):
            if not runtime.wait_until(lambda: not inbox.empty()):
                raise ExecutorUnavailable("executor stopped before every node resolved")
    return outcomes
