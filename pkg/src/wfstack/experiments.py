"""Bag-of-tasks utilization runs on a platform, plus the report they produce."""

from __future__ import annotations

import json
import random
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .model import EventRecord, Payload, ResourceSpec, TaskDescription
from .pilot import Pilot, PilotDescription, submit_pilot
from .platform import PlatformConfig
from .simcluster import ClusterConfig, UtilizationSeries, compute_utilization, task_span


def homogeneous_bag(count: int, *, duration: int, cores: int = 1, prefix: str = "t") -> list[TaskDescription]:
    width = len(str(max(count - 1, 0)))
    payload = Payload(executable="/bin/true")
    return [
        TaskDescription(f"{prefix}{i:0{width}d}", payload, 1, cores, 0, duration)
        for i in range(count)
    ]


def mixed_bag(
    count: int,
    *,
    gpu_share: float,
    duration: int | tuple[int, int],
    cpu_cores: int = 4,
    gpu_cores: int = 1,
    seed: int = 0,
    prefix: str = "t",
) -> list[TaskDescription]:
    """CPU-only tasks of ``cpu_cores`` mixed with 1-GPU tasks of ``gpu_cores``; order and durations seeded."""
    rng = random.Random(seed)
    width = len(str(max(count - 1, 0)))
    payload = Payload(executable="/bin/true")
    tasks = []
    for i in range(count):
        d = duration if isinstance(duration, int) else rng.randint(*duration)
        if rng.random() < gpu_share:
            tasks.append(TaskDescription(f"{prefix}{i:0{width}d}", payload, 1, gpu_cores, 1, d))
        else:
            tasks.append(TaskDescription(f"{prefix}{i:0{width}d}", payload, 1, cpu_cores, 0, d))
    return tasks


def random_workload(count: int, seed: int, *, max_ranks: int = 4, max_cores: int = 8,
                    max_gpus: int = 2, durations: tuple[int, int] = (1, 50)) -> list[TaskDescription]:
    rng = random.Random(seed)
    payload = Payload(executable="/bin/true")
    return [
        TaskDescription(f"r{seed}-{i:04d}", payload, rng.randint(1, max_ranks), rng.randint(1, max_cores),
                        rng.choice([0] * 3 + list(range(1, max_gpus + 1))), rng.randint(*durations))
        for i in range(count)
    ]


def steady_window(events: Iterable[EventRecord]) -> tuple[int, int]:
    """From the first task start to the last task start: the span where new work is still arriving.

    Falls back to the whole makespan when every task started on the same tick.
    """
    first, last_start, last_end = task_span(events)
    return (first, last_start) if last_start > first else (first, last_end)


@dataclass
class RunReport:
    events: list[EventRecord]
    cluster: ClusterConfig
    makespan_window: tuple[int, int]
    steady_window: tuple[int, int]
    series: UtilizationSeries
    steady: UtilizationSeries

    @property
    def makespan(self) -> int:
        return self.makespan_window[1] - self.makespan_window[0]

    def summary(self) -> dict:
        return {
            "cluster": {"nodes": self.cluster.node_count, "cores_per_node": self.cluster.cores_per_node,
                        "gpus_per_node": self.cluster.gpus_per_node},
            "makespan": self.makespan,
            "makespan_window": list(self.makespan_window),
            "steady_window": list(self.steady_window),
            "core_utilization": self.series.core_fraction,
            "gpu_utilization": self.series.gpu_fraction,
            "steady_core_utilization": self.steady.core_fraction,
            "steady_gpu_utilization": self.steady.gpu_fraction,
        }


def build_report(events: list[EventRecord], cluster: ClusterConfig) -> RunReport:
    first, _, last_end = task_span(events)
    window = (first, max(last_end, first + 1))
    steady = steady_window(events)
    return RunReport(events, cluster, window, steady,
                     compute_utilization(events, cluster, window),
                     compute_utilization(events, cluster, steady))


def merged_events(pilot: Pilot) -> list[EventRecord]:
    """Job and task events interleaved by timestamp; each stream keeps its own order."""
    job = [e for e in pilot.executor.events if e.subject_id == pilot.job_id]
    return sorted(job + pilot.task_events, key=lambda e: e.timestamp)


def allocation_cluster(pilot: Pilot) -> ClusterConfig:
    """The schedulable capacity of the pilot's allocation; nodes are assumed uniform."""
    nodes = pilot.allocation.nodes
    return ClusterConfig(pilot.job_id, len(nodes), nodes[0].cores, nodes[0].gpus)


def run_bag(
    platform: PlatformConfig,
    tasks: Sequence[TaskDescription],
    *,
    nodes: int,
    instances: int = 1,
    walltime_s: int = 10**9,
    policy: str = "round-robin",
) -> tuple[Pilot, RunReport]:
    executor = platform.make_executor()
    desc = PilotDescription(ResourceSpec(node_count=nodes), walltime_s, instances, platform.name)
    pilot = submit_pilot(desc, executor, policy=policy, launch_rate=platform.launch_rate)
    if not pilot.wait_ready():
        raise RuntimeError(f"pilot never became ready: {pilot.error or pilot.state.value}")
    pilot.submit_tasks(tasks)
    pilot.shutdown()
    return pilot, build_report(merged_events(pilot), allocation_cluster(pilot))


def write_report(report: RunReport, out_dir: str | Path, *, title: str = "", plot: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(report.events, out / "events.jsonl")
    report.series.write_csv(out / "utilization.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    if plot:
        from .plotting import plot_utilization

        plot_utilization(report.series, out / "utilization.png", title=title, steady_window=report.steady_window)
    return out


def write_events(events: Iterable[EventRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_dict()) + "\n")


def read_events(path: str | Path) -> list[EventRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EventRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
