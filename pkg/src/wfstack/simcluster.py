"""Discrete-event cluster model: virtual clock, event queue, utilization metrics."""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import os
from collections.abc import Callable, Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .model import EventRecord, NodeResources, TaskState

CSV_HEADER = ("tick", "busy_cores", "busy_gpus", "total_cores", "total_gpus")


class EmptySchedule(RuntimeError):
    pass


class MalformedEvent(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    name: str
    node_count: int
    cores_per_node: int
    gpus_per_node: int = 0

    def __post_init__(self):
        if self.node_count < 1 or self.cores_per_node < 1 or self.gpus_per_node < 0:
            raise ValueError(f"invalid cluster dimensions: {self}")

    @property
    def total_cores(self) -> int:
        return self.node_count * self.cores_per_node

    @property
    def total_gpus(self) -> int:
        return self.node_count * self.gpus_per_node

    def node_ids(self) -> list[str]:
        # zero padding keeps lexicographic order equal to index order
        width = max(4, len(str(self.node_count - 1)))
        return [f"n{i:0{width}d}" for i in range(self.node_count)]

    def nodes(self) -> list[NodeResources]:
        return [NodeResources(n, self.cores_per_node, self.gpus_per_node) for n in self.node_ids()]


class SimClock:
    def __init__(self, now: int = 0):
        self._now = now

    @property
    def now(self) -> int:
        return self._now

    def jump(self, tick: int) -> None:
        if tick < self._now:
            raise ValueError(f"clock cannot move backwards ({self._now} -> {tick})")
        self._now = tick


class ScheduledEvent:
    __slots__ = ("tick", "subject_id", "seq", "action", "args", "cancelled")

    def __init__(self, tick, subject_id, seq, action, args):
        self.tick = tick
        self.subject_id = subject_id
        self.seq = seq
        self.action = action
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __repr__(self):
        return f"ScheduledEvent(t={self.tick}, {self.subject_id!r}, #{self.seq})"


class EventQueue:
    """Pending events ordered by (tick, subject_id, sequence number)."""

    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()
        self._heap: list[tuple[int, str, int, ScheduledEvent]] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, tick: int, subject_id: str, action: Callable[..., Any] | None = None, *args) -> ScheduledEvent:
        if tick < self.clock.now:
            raise ValueError(f"event at {tick} is in the past (now {self.clock.now})")
        ev = ScheduledEvent(tick, subject_id, next(self._seq), action, args)
        heapq.heappush(self._heap, (tick, subject_id, ev.seq, ev))
        return ev

    def peek_tick(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def advance(self) -> list[ScheduledEvent]:
        """Jump to the earliest pending tick and fire every event pending there.

        Events pushed for the current tick while firing run on the next call.
        """
        if not self._heap:
            raise EmptySchedule("no pending events")
        tick = self._heap[0][0]
        self.clock.jump(tick)
        batch = []
        while self._heap and self._heap[0][0] == tick:
            batch.append(heapq.heappop(self._heap)[3])
        fired = []
        for ev in batch:
            if ev.cancelled:
                continue
            fired.append(ev)
            if ev.action is not None:
                ev.action(*ev.args)
        return fired


def advance(queue: EventQueue) -> list[ScheduledEvent]:
    return queue.advance()


def command_model(argv: list[str] | tuple[str, ...]) -> tuple[int | None, int]:
    """Simulated behaviour of a command line: ``(duration_ticks, exit_code)``.

    ``sleep N`` lasts N ticks, ``exit N`` exits with N, ``false`` with 1;
    anything else lasts one tick and exits 0. ``sh -c "..."`` is unwrapped.
    A duration of ``None`` means the command holds until killed.
    """
    argv = list(argv)
    if len(argv) >= 3 and os.path.basename(argv[0]) in ("sh", "bash") and argv[1] == "-c":
        argv = argv[2].split()
    if not argv:
        return 1, 0
    name = os.path.basename(argv[0])
    rest = argv[1:]
    if name == HOLD_COMMAND:
        return None, 0
    if name == "sleep" and rest:
        return int(float(rest[0])), 0
    if name == "exit":
        return 1, int(rest[0]) if rest else 0
    if name == "false":
        return 1, 1
    return 1, 0


HOLD_COMMAND = "wfstack-hold"


# ---------------------------------------------------------------------------
# utilization


@dataclass
class UtilizationSeries:
    samples: list[tuple[int, int, int]]
    total_cores: int
    total_gpus: int
    window: tuple[int, int]
    core_fraction: float = 0.0
    gpu_fraction: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for tick, cores, gpus in self.samples:
            w.writerow((tick, cores, gpus, self.total_cores, self.total_gpus))
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")


def read_utilization_csv(path: str | Path) -> UtilizationSeries:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no samples")
    samples = [(int(r["tick"]), int(r["busy_cores"]), int(r["busy_gpus"])) for r in rows]
    series = UtilizationSeries(
        samples, int(rows[0]["total_cores"]), int(rows[0]["total_gpus"]), (samples[0][0], samples[-1][0])
    )
    series.core_fraction, series.gpu_fraction = _aggregate(series.samples, series.total_cores,
                                                           series.total_gpus, series.window)
    return series


def _holding(ev: EventRecord) -> tuple[int, int]:
    try:
        return int(ev.detail["cores"]), int(ev.detail.get("gpus", 0))
    except (KeyError, ValueError) as exc:
        raise MalformedEvent(f"placement event for {ev.subject_id} lacks resource detail") from exc


def busy_changes(events: Iterable[EventRecord]) -> list[tuple[int, int, int]]:
    """Return (tick, delta_cores, delta_gpus) for every task start and release."""
    held: dict[str, tuple[int, int]] = {}
    out = []
    for ev in events:
        if not isinstance(ev.new_state, TaskState):
            continue
        if ev.new_state is TaskState.EXECUTING:
            c, g = _holding(ev)
            held[ev.subject_id] = (c, g)
            out.append((ev.timestamp, c, g))
        elif ev.subject_id in held:
            c, g = held.pop(ev.subject_id)
            out.append((ev.timestamp, -c, -g))
    return out


def _aggregate(samples, total_cores, total_gpus, window):
    t0, t1 = window
    core_area = gpu_area = 0
    for (t, c, g), nxt in zip(samples, samples[1:] + [(t1, 0, 0)]):
        dt = min(nxt[0], t1) - max(t, t0)
        if dt > 0:
            core_area += c * dt
            gpu_area += g * dt
    span = t1 - t0
    cores = core_area / (total_cores * span)
    gpus = gpu_area / (total_gpus * span) if total_gpus else None
    return cores, gpus


def compute_utilization(
    events: Iterable[EventRecord],
    config: ClusterConfig,
    window: tuple[int, int],
) -> UtilizationSeries:
    """Busy cores/GPUs over time and their time-integrated fraction of capacity.

    A sample is taken at ``t0``, at every tick in ``(t0, t1)`` where the busy
    counts change, and at ``t1``. Resources are busy while a task is EXECUTING.
    """
    t0, t1 = window
    if not t0 < t1:
        raise ValueError(f"empty window {window}")
    changes = sorted(busy_changes(events), key=lambda c: c[0])
    cores = gpus = 0
    i = 0
    while i < len(changes) and changes[i][0] <= t0:
        cores += changes[i][1]
        gpus += changes[i][2]
        i += 1
    samples = [(t0, cores, gpus)]
    while i < len(changes) and changes[i][0] < t1:
        tick = changes[i][0]
        while i < len(changes) and changes[i][0] == tick:
            cores += changes[i][1]
            gpus += changes[i][2]
            i += 1
        if (cores, gpus) != samples[-1][1:]:
            samples.append((tick, cores, gpus))
    while i < len(changes) and changes[i][0] == t1:
        cores += changes[i][1]
        gpus += changes[i][2]
        i += 1
    samples.append((t1, cores, gpus))
    for _, c, g in samples:
        if not (0 <= c <= config.total_cores and 0 <= g <= config.total_gpus):
            raise MalformedEvent(f"busy counts ({c}, {g}) exceed cluster {config.name}")
    frac_c, frac_g = _aggregate(samples, config.total_cores, config.total_gpus, window)
    return UtilizationSeries(samples, config.total_cores, config.total_gpus, window, frac_c, frac_g)


def task_span(events: Iterable[EventRecord]) -> tuple[int, int, int]:
    """(first start, last start, last end) over task events."""
    starts, ends = [], []
    for ev in events:
        if isinstance(ev.new_state, TaskState):
            if ev.new_state is TaskState.EXECUTING:
                starts.append(ev.timestamp)
            elif ev.old_state is TaskState.EXECUTING:
                ends.append(ev.timestamp)
    if not starts:
        raise ValueError("no task ever started")
    return min(starts), max(starts), max(ends) if ends else max(starts)
