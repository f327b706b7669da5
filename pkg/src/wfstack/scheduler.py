"""Nested scheduler instance: first-fit placement over a private node subset.

One ``SchedulerInstance`` owns one ``NodeInventory``; every mutation happens
inside the instance's own message loop. Launching is delegated to a
launcher, either simulated (``SimLauncher``) or real (``ThreadLauncher``).
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import threading
from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

from . import functions
from .model import EventRecord, InstanceState, NodeResources, TaskDescription, TaskKind, is_terminal
from .simcluster import command_model

log = logging.getLogger(__name__)


class PlacementFailure(Enum):
    BUSY = "busy"
    UNSATISFIABLE = "unsatisfiable"


BUSY = PlacementFailure.BUSY
UNSATISFIABLE = PlacementFailure.UNSATISFIABLE


class Unsatisfiable(ValueError):
    """A task that no empty inventory available to it could ever hold."""


class DoubleRelease(RuntimeError):
    pass


@dataclass(frozen=True)
class Placement:
    task_uid: str
    assignments: tuple[tuple[str, int, int], ...]
    start_tick: int | None = None
    end_tick: int | None = None

    @property
    def cores(self) -> int:
        return sum(a[1] for a in self.assignments)

    @property
    def gpus(self) -> int:
        return sum(a[2] for a in self.assignments)

    def detail(self) -> dict[str, str]:
        return {
            "node_ids": ",".join(a[0] for a in self.assignments),
            "placement": ";".join(f"{n}:{c}:{g}" for n, c, g in self.assignments),
            "cores": str(self.cores),
            "gpus": str(self.gpus),
        }


def parse_placement(text: str) -> list[tuple[str, int, int]]:
    out = []
    for part in text.split(";"):
        n, c, g = part.split(":")
        out.append((n, int(c), int(g)))
    return out


class NodeInventory:
    """Free/total core and GPU counters per node, kept in ascending node_id order."""

    def __init__(self, nodes: Iterable[NodeResources]):
        nodes = sorted(nodes, key=lambda n: n.node_id)
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        self.node_ids = ids
        self.total_cores = [n.cores for n in nodes]
        self.total_gpus = [n.gpus for n in nodes]
        self.free_cores = list(self.total_cores)
        self.free_gpus = list(self.total_gpus)
        self._index = {n: i for i, n in enumerate(ids)}
        self._held: dict[str, Placement] = {}
        # every node below this index has zero free cores
        self._first_free = 0
        self._capacity_cache: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def held(self) -> dict[str, Placement]:
        return dict(self._held)

    def snapshot(self) -> tuple[tuple[str, int, int, int, int], ...]:
        return tuple(
            zip(self.node_ids, self.free_cores, self.total_cores, self.free_gpus, self.total_gpus)
        )

    def rank_capacity(self, cores_per_rank: int, gpus_per_rank: int) -> int:
        """Ranks of this shape the empty inventory could hold."""
        key = (cores_per_rank, gpus_per_rank)
        cap = self._capacity_cache.get(key)
        if cap is None:
            cap = sum(
                _fit(c, g, cores_per_rank, gpus_per_rank)
                for c, g in zip(self.total_cores, self.total_gpus)
            )
            self._capacity_cache[key] = cap
        return cap

    def satisfiable(self, task: TaskDescription) -> bool:
        return self.rank_capacity(task.cores_per_rank, task.gpus_per_rank) >= task.ranks


def _fit(cores: int, gpus: int, cpr: int, gpr: int) -> int:
    k = cores // cpr
    if gpr:
        k = min(k, gpus // gpr)
    return k


def try_place(task: TaskDescription, inventory: NodeInventory) -> Placement | PlacementFailure:
    """First-fit: fill nodes in ascending node_id order with whole ranks."""
    if task.uid in inventory._held:
        raise ValueError(f"task {task.uid} already holds a placement")
    if not inventory.satisfiable(task):
        return UNSATISFIABLE
    cpr, gpr = task.cores_per_rank, task.gpus_per_rank
    remaining = task.ranks
    free_c, free_g = inventory.free_cores, inventory.free_gpus
    picks = []
    for i in range(inventory._first_free, len(free_c)):
        k = _fit(free_c[i], free_g[i], cpr, gpr)
        if k:
            k = min(k, remaining)
            picks.append((i, k))
            remaining -= k
            if not remaining:
                break
    if remaining:
        return BUSY
    ids = inventory.node_ids
    assignments = []
    for i, k in picks:
        free_c[i] -= k * cpr
        free_g[i] -= k * gpr
        assignments.append((ids[i], k * cpr, k * gpr))
    while inventory._first_free < len(free_c) and free_c[inventory._first_free] == 0:
        inventory._first_free += 1
    placement = Placement(task.uid, tuple(assignments))
    inventory._held[task.uid] = placement
    return placement


def release(placement: Placement, inventory: NodeInventory) -> None:
    held = inventory._held.get(placement.task_uid)
    if held is None or held.assignments != placement.assignments:
        raise DoubleRelease(f"placement of {placement.task_uid} is not held")
    del inventory._held[placement.task_uid]
    for node_id, cores, gpus in placement.assignments:
        i = inventory._index[node_id]
        inventory.free_cores[i] += cores
        inventory.free_gpus[i] += gpus
        if i < inventory._first_free:
            inventory._first_free = i


# ---------------------------------------------------------------------------
# instance


class SchedulerInstance:
    """A FIFO, no-backfill scheduler over a node subset.

    Messages (tuples posted to ``inbox``): ``submit``, ``cancel``,
    ``cancel_all``, and from launchers ``started``, ``launch_failed``,
    ``finished``. Each state change is emitted as an ``EventRecord`` over
    ``InstanceState`` through ``emit``.
    """

    def __init__(
        self,
        name: str,
        nodes: Iterable[NodeResources],
        runtime,
        emit: Callable[[EventRecord], None],
        *,
        launch_rate: int = 0,
        sandbox: str | Path | None = None,
    ):
        self.name = name
        self.runtime = runtime
        self.inventory = NodeInventory(nodes)
        self.emit = emit
        self.queue: deque[TaskDescription] = deque()
        self.states: dict[str, InstanceState] = {}
        self.placements: dict[str, Placement] = {}
        self.results: dict[str, Any] = {}
        if runtime.simulated:
            self.launcher = SimLauncher(self, launch_rate)
        else:
            self.launcher = ThreadLauncher(self, sandbox)
        self.inbox = runtime.channel(name, self.handle)

    # -- caller side -------------------------------------------------------

    def submit(self, task: TaskDescription) -> None:
        if not self.inventory.satisfiable(task):
            raise Unsatisfiable(f"task {task.uid} does not fit instance {self.name}")
        self.inbox.post(("submit", task))

    def cancel(self, uid: str, reason: str = "canceled") -> None:
        self.inbox.post(("cancel", uid, reason))

    def cancel_all(self, reason: str = "canceled") -> None:
        self.inbox.post(("cancel_all", reason))

    def close(self) -> None:
        self.inbox.close()

    # -- owner loop --------------------------------------------------------

    def handle(self, msg: tuple) -> None:
        getattr(self, "_on_" + msg[0])(*msg[1:])

    def _record(self, uid: str, new: InstanceState, detail: dict[str, str] | None = None) -> None:
        old = self.states.get(uid, InstanceState.NEW)
        self.states[uid] = new
        d = {"instance": self.name}
        if detail:
            d.update(detail)
        self.emit(EventRecord(self.runtime.now(), uid, old, new, d))

    def _on_submit(self, task: TaskDescription) -> None:
        if task.uid in self.states:
            raise ValueError(f"duplicate task uid {task.uid} on {self.name}")
        self._record(task.uid, InstanceState.PENDING)
        self.queue.append(task)
        self._pump()

    def _pump(self) -> None:
        queue, inv = self.queue, self.inventory
        while queue:
            task = queue[0]
            result = try_place(task, inv)
            if result is BUSY:
                return
            queue.popleft()
            if result is UNSATISFIABLE:
                self._record(task.uid, InstanceState.EXCEPTION, {"error": "unsatisfiable"})
                continue
            self.placements[task.uid] = result
            self.launcher.launch(task, result)

    def _on_started(self, uid: str) -> None:
        p = self.placements.get(uid)
        if p is None or self.states.get(uid) is not InstanceState.PENDING:
            return
        p = replace(p, start_tick=self.runtime.now())
        self.placements[uid] = p
        self._record(uid, InstanceState.RUN, p.detail())

    def _free(self, uid: str) -> None:
        p = self.placements.pop(uid)
        release(p, self.inventory)

    def _on_launch_failed(self, uid: str, error: str) -> None:
        if uid not in self.placements or self.states.get(uid) is not InstanceState.PENDING:
            return
        self._free(uid)
        self._record(uid, InstanceState.EXCEPTION, {"error": error})
        self._pump()

    def _on_finished(self, uid: str, exit_code: int, result: Any = None, error: str | None = None) -> None:
        if self.states.get(uid) is not InstanceState.RUN:
            return
        self._free(uid)
        self.results[uid] = result
        detail = {"exit_code": str(exit_code)}
        if error:
            detail["error"] = error
        self._record(uid, InstanceState.FINISHED, detail)
        self._pump()

    def _cancel_one(self, uid: str, reason: str) -> None:
        state = self.states.get(uid)
        if state is None or is_terminal(state):
            return
        if uid in self.placements:
            self.launcher.terminate(uid)
            self._free(uid)
        else:
            self.queue = deque(t for t in self.queue if t.uid != uid)
        self._record(uid, InstanceState.CANCELED, {"reason": reason})

    def _on_cancel(self, uid: str, reason: str) -> None:
        self._cancel_one(uid, reason)
        self._pump()

    def _on_cancel_all(self, reason: str) -> None:
        self.queue.clear()
        for uid in sorted(self.states):
            self._cancel_one(uid, reason)


# ---------------------------------------------------------------------------
# launchers


def _call_function(task: TaskDescription) -> tuple[int, Any, str | None]:
    fn = functions.lookup(task.payload.function)
    try:
        return 0, fn(*task.payload.args, **task.payload.kwargs), None
    except Exception as exc:  # payload errors become task failures
        return 1, None, f"{type(exc).__name__}: {exc}"


class SimLauncher:
    """Simulated launch: start at the next free launch slot, finish after the expected duration.

    ``launch_rate`` bounds how many tasks the instance can start per tick
    (0 = unbounded).
    """

    def __init__(self, instance: SchedulerInstance, launch_rate: int = 0):
        self.instance = instance
        self.runtime = instance.runtime
        self.launch_rate = launch_rate
        self._slot_tick = -1
        self._slot_used = 0
        self._timers: dict[str, Any] = {}

    def _next_slot(self) -> int:
        now = self.runtime.now()
        if not self.launch_rate:
            return now
        if self._slot_tick < now:
            self._slot_tick, self._slot_used = now, 0
        if self._slot_used >= self.launch_rate:
            self._slot_tick += 1
            self._slot_used = 0
        self._slot_used += 1
        return self._slot_tick

    def launch(self, task: TaskDescription, placement: Placement) -> None:
        self._timers[task.uid] = self.runtime.call_at(self._next_slot(), task.uid, self._start, task)

    def _start(self, task: TaskDescription) -> None:
        inst = self.instance
        if task.kind is TaskKind.FUNCTION:
            try:
                functions.lookup(task.payload.function)
            except LookupError as exc:
                self._timers.pop(task.uid, None)
                inst.handle(("launch_failed", task.uid, str(exc)))
                return
            code, result, error = _call_function(task)
            modeled = None
        else:
            modeled, code = command_model((task.payload.executable, *task.payload.arguments))
            result, error = code, None
        duration = task.expected_duration_s
        if duration is None:
            duration = 1 if modeled is None else modeled
        inst.handle(("started", task.uid))
        self._timers[task.uid] = self.runtime.call_later(
            duration, task.uid, self._finish, task.uid, code, result, error
        )

    def _finish(self, uid, code, result, error) -> None:
        self._timers.pop(uid, None)
        self.instance.handle(("finished", uid, code, result, error))

    def terminate(self, uid: str) -> None:
        timer = self._timers.pop(uid, None)
        if timer is not None:
            timer.cancel()


class ThreadLauncher:
    """Real launch: one worker thread per task; ranks become separate processes."""

    def __init__(self, instance: SchedulerInstance, sandbox: str | Path | None = None):
        self.instance = instance
        self.sandbox = Path(sandbox) if sandbox else None
        self._procs: dict[str, list[subprocess.Popen]] = {}
        self._killed: set[str] = set()
        self._lock = threading.Lock()

    def launch(self, task: TaskDescription, placement: Placement) -> None:
        threading.Thread(target=self._run, args=(task, placement), daemon=True,
                         name=f"task-{task.uid}").start()

    def _post(self, *msg) -> None:
        self.instance.inbox.post(msg)

    def _run(self, task: TaskDescription, placement: Placement) -> None:
        if task.kind is TaskKind.FUNCTION:
            try:
                functions.lookup(task.payload.function)
            except LookupError as exc:
                self._post("launch_failed", task.uid, str(exc))
                return
            self._post("started", task.uid)
            self._post("finished", task.uid, *_call_function(task))
            return
        argv = [task.payload.executable, *task.payload.arguments]
        procs = []
        try:
            for rank in range(task.ranks):
                env = dict(os.environ, WFSTACK_TASK_UID=task.uid, WFSTACK_RANK=str(rank),
                           WFSTACK_RANKS=str(task.ranks), WFSTACK_NODES=",".join(a[0] for a in placement.assignments))
                out = err = subprocess.DEVNULL
                if self.sandbox is not None:
                    self.sandbox.mkdir(parents=True, exist_ok=True)
                    suffix = f".{rank}" if task.ranks > 1 else ""
                    out = open(self.sandbox / f"{task.uid}{suffix}.out", "wb")
                    err = open(self.sandbox / f"{task.uid}{suffix}.err", "wb")
                try:
                    procs.append(subprocess.Popen(argv, stdout=out, stderr=err, env=env,
                                                  start_new_session=True))
                finally:
                    if out is not subprocess.DEVNULL:
                        out.close()
                        err.close()
        except OSError as exc:
            for p in procs:
                _kill(p)
            self._post("launch_failed", task.uid, f"{type(exc).__name__}: {exc}")
            return
        with self._lock:
            killed = task.uid in self._killed
            if not killed:
                self._procs[task.uid] = procs
        if killed:
            for p in procs:
                _kill(p)
            return
        self._post("started", task.uid)
        codes = [p.wait() for p in procs]
        with self._lock:
            self._procs.pop(task.uid, None)
        code = next((c for c in codes if c != 0), 0)
        self._post("finished", task.uid, code, code, None)

    def terminate(self, uid: str) -> None:
        with self._lock:
            self._killed.add(uid)
            procs = self._procs.pop(uid, [])
        for p in procs:
            _kill(p)


def _kill(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def instance_loop(
    tasks: Iterable[TaskDescription],
    nodes: Iterable[NodeResources],
    *,
    launch_rate: int = 0,
) -> list[EventRecord]:
    """Run a single simulated instance over ``nodes`` until every task is terminal."""
    from .runtime import SimRuntime

    rt = SimRuntime()
    events: list[EventRecord] = []
    inst = SchedulerInstance("instance.0", nodes, rt, events.append, launch_rate=launch_rate)
    for t in tasks:
        inst.submit(t)
    rt.run()
    return events
