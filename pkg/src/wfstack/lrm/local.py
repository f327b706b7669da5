"""Local-process backend: jobs are child processes of the launch host."""

from __future__ import annotations

import os
import signal
import subprocess
import sys
import threading

from ..model import JobState, NodeResources, ValidatedJobSpec, ValidationError
from ..runtime import RealRuntime
from .base import Capability, Executor, ExecutorDescriptor, register_executor

SPAWN_FAILURE_EXIT_CODE = 127
KILL_GRACE_S = 5.0


class LocalExecutor(Executor):
    descriptor = ExecutorDescriptor("local", frozenset({Capability.REAL_EXEC, Capability.SCRIPT_RENDERING}))
    id_prefix = "local"

    def __init__(self, runtime: RealRuntime | None = None, cores: int | None = None, node_id: str = "localhost"):
        super().__init__(runtime or RealRuntime())
        self.node = NodeResources(node_id, cores or os.cpu_count() or 1, 0)
        self._procs: dict[str, subprocess.Popen] = {}
        self._timers: dict[str, object] = {}
        self._kill_reason: dict[str, str] = {}
        self._loop = self.runtime.channel("local-executor", self._handle)

    def hold_command(self):
        return sys.executable, ("-c", "import time\nwhile True: time.sleep(3600)")

    def check_capacity(self, spec: ValidatedJobSpec) -> None:
        if spec.resources.node_count > 1:
            raise ValidationError([("node_count", "local backend runs on a single node")])

    def _enqueue(self, job_id: str) -> None:
        self._loop.post(("start", job_id))

    def _cancel(self, job_id: str) -> None:
        self._loop.post(("cancel", job_id))
        if self._loop.on_loop_thread():
            return
        # cancellation is complete once the loop has observed the exit
        self.runtime.wait_until(lambda: self._jobs[job_id].terminal, KILL_GRACE_S * 2)

    def shutdown(self) -> None:
        super().shutdown()
        for job in self.jobs():
            if not job.terminal:
                self._cancel(job.job_id)
        self._loop.close()

    # -- owner loop --------------------------------------------------------

    def _handle(self, msg) -> None:
        getattr(self, "_on_" + msg[0])(*msg[1:])

    def _on_start(self, job_id: str) -> None:
        job = self._jobs[job_id]
        if job.state is not JobState.QUEUED:
            return
        spec = job.spec
        env = dict(os.environ)
        env.update(spec.environment)
        try:
            out = open(spec.stdout_path, "wb") if spec.stdout_path else subprocess.DEVNULL
            err = open(spec.stderr_path, "wb") if spec.stderr_path else subprocess.DEVNULL
            try:
                proc = subprocess.Popen(
                    [spec.executable, *spec.arguments],
                    cwd=spec.directory,
                    env=env,
                    stdout=out,
                    stderr=err,
                    start_new_session=True,
                )
            finally:
                for fh in (out, err):
                    if fh is not subprocess.DEVNULL:
                        fh.close()
        except OSError as exc:
            self._transition(job_id, JobState.FAILED, {"error": f"{type(exc).__name__}: {exc}"},
                             exit_code=SPAWN_FAILURE_EXIT_CODE)
            return
        self._procs[job_id] = proc
        self._transition(job_id, JobState.ACTIVE, native_id=str(proc.pid), nodes=(self.node,))
        self._timers[job_id] = self.runtime.call_later(spec.walltime_s, job_id, self._loop.post, ("walltime", job_id))
        threading.Thread(target=self._reap, args=(job_id, proc), daemon=True, name=f"reap-{job_id}").start()

    def _reap(self, job_id: str, proc: subprocess.Popen) -> None:
        self._loop.post(("exited", job_id, proc.wait()))

    def _kill(self, job_id: str, reason: str) -> None:
        proc = self._procs.get(job_id)
        if proc is None:
            return
        self._kill_reason.setdefault(job_id, reason)
        _signal(proc, signal.SIGTERM)
        t = threading.Timer(KILL_GRACE_S, _signal, (proc, signal.SIGKILL))
        t.daemon = True
        t.start()

    def _on_cancel(self, job_id: str) -> None:
        state = self._jobs[job_id].state
        if state is JobState.QUEUED:
            self._transition(job_id, JobState.CANCELED, {"reason": "canceled"})
        elif state is JobState.ACTIVE:
            self._kill(job_id, "canceled")

    def _on_walltime(self, job_id: str) -> None:
        if self._jobs[job_id].state is JobState.ACTIVE:
            self._kill(job_id, "walltime")

    def _on_exited(self, job_id: str, code: int) -> None:
        self._procs.pop(job_id, None)
        timer = self._timers.pop(job_id, None)
        if timer is not None:
            timer.cancel()
        if self._jobs[job_id].state is not JobState.ACTIVE:
            return
        reason = self._kill_reason.pop(job_id, None)
        if reason == "canceled":
            self._transition(job_id, JobState.CANCELED, {"reason": "canceled"})
        elif reason == "walltime":
            self._transition(job_id, JobState.FAILED, {"reason": "walltime"}, exit_code=code or -signal.SIGTERM)
        elif code == 0:
            self._transition(job_id, JobState.COMPLETED, exit_code=0)
        else:
            self._transition(job_id, JobState.FAILED, exit_code=code)


def _signal(proc: subprocess.Popen, sig: int) -> None:
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


register_executor(LocalExecutor.descriptor, LocalExecutor)
