"""Simulated batch system: strict FIFO, first-fit whole-node allocation, no backfill."""

from __future__ import annotations

import math
from collections import deque

from ..model import JobState, ValidatedJobSpec, ValidationError
from ..runtime import SimRuntime
from ..simcluster import HOLD_COMMAND, ClusterConfig, command_model
from .base import Capability, Executor, ExecutorDescriptor, register_executor

WALLTIME_EXIT_CODE = -15  # as if terminated by SIGTERM


class SimBatchExecutor(Executor):
    descriptor = ExecutorDescriptor("sim-batch", frozenset({Capability.SIMULATED, Capability.SCRIPT_RENDERING}))
    id_prefix = "sim"

    def __init__(self, cluster: ClusterConfig, runtime: SimRuntime | None = None, payload_model=command_model):
        super().__init__(runtime or SimRuntime())
        self.cluster = cluster
        self.payload_model = payload_model
        self._nodes = cluster.nodes()
        self._free = [True] * len(self._nodes)
        self._queue: deque[str] = deque()
        self._held: dict[str, list[int]] = {}
        self._timers: dict[str, list] = {}
        self._pass_pending = False

    def hold_command(self):
        return HOLD_COMMAND, ()

    def nodes_needed(self, spec: ValidatedJobSpec) -> int:
        r = spec.resources
        c = self.cluster
        per_node = c.cores_per_node // r.cores_per_process
        if r.gpus_per_process:
            per_node = min(per_node, c.gpus_per_node // r.gpus_per_process)
        if per_node == 0:
            raise ValidationError([("resources", "process exceeds node size")])
        if r.processes_per_node:
            if r.processes_per_node > per_node:
                raise ValidationError([("processes_per_node", "exceeds node size")])
            per_node = r.processes_per_node
        if r.node_count:
            if r.process_count > r.node_count * per_node:
                raise ValidationError([("process_count", "exceeds requested nodes")])
            return r.node_count
        return math.ceil(r.process_count / per_node)

    def check_capacity(self, spec: ValidatedJobSpec) -> None:
        if self.nodes_needed(spec) > self.cluster.node_count:
            raise ValidationError([("node_count", "exceeds cluster size")])

    def _enqueue(self, job_id: str) -> None:
        self._queue.append(job_id)
        self._request_pass()

    def _request_pass(self) -> None:
        if not self._pass_pending:
            self._pass_pending = True
            self.runtime.call_later(0, "~batch", self._schedule_pass)

    def _schedule_pass(self) -> None:
        self._pass_pending = False
        while self._queue:
            job_id = self._queue[0]
            spec = self._jobs[job_id].spec
            need = self.nodes_needed(spec)
            free = [i for i, f in enumerate(self._free) if f]
            if len(free) < need:
                return
            self._queue.popleft()
            picked = free[:need]
            for i in picked:
                self._free[i] = False
            self._held[job_id] = picked
            self._start(job_id, spec, picked)

    def _start(self, job_id: str, spec: ValidatedJobSpec, picked: list[int]) -> None:
        nodes = tuple(self._nodes[i] for i in picked)
        self._transition(job_id, JobState.ACTIVE, native_id=f"{self.cluster.name}.{job_id}", nodes=nodes)
        duration, code = self.payload_model((spec.executable, *spec.arguments))
        rt = self.runtime
        timers = [rt.call_later(spec.walltime_s, job_id, self._walltime, job_id)]
        if duration is not None:
            timers.insert(0, rt.call_later(duration, job_id, self._exit, job_id, code))
        self._timers[job_id] = timers

    def _finish(self, job_id: str, state: JobState, detail=None, exit_code=None) -> None:
        for t in self._timers.pop(job_id, []):
            t.cancel()
        for i in self._held.pop(job_id, []):
            self._free[i] = True
        self._transition(job_id, state, detail, exit_code=exit_code)
        self._request_pass()

    def _exit(self, job_id: str, code: int) -> None:
        if self._jobs[job_id].state is JobState.ACTIVE:
            self._finish(job_id, JobState.COMPLETED if code == 0 else JobState.FAILED, exit_code=code)

    def _walltime(self, job_id: str) -> None:
        if self._jobs[job_id].state is JobState.ACTIVE:
            self._finish(job_id, JobState.FAILED, {"reason": "walltime"}, exit_code=WALLTIME_EXIT_CODE)

    def _cancel(self, job_id: str) -> None:
        state = self._jobs[job_id].state
        if state is JobState.QUEUED:
            self._queue.remove(job_id)
            self._transition(job_id, JobState.CANCELED, {"reason": "canceled"})
            self._request_pass()
        elif state is JobState.ACTIVE:
            self._finish(job_id, JobState.CANCELED, {"reason": "canceled"})

    @property
    def free_nodes(self) -> int:
        return sum(self._free)


register_executor(SimBatchExecutor.descriptor, SimBatchExecutor)
