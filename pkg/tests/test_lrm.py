import time

import pytest

from wfstack.lrm import (
    CancelResult,
    Capability,
    JobNotFound,
    LocalExecutor,
    SimBatchExecutor,
    SubmissionError,
    WaitTimeout,
    cancel,
    create_executor,
    executor_names,
    get_descriptor,
    status,
    submit,
    wait,
)
from wfstack.model import JobSpec, JobState, ResourceSpec, ValidationError, replay
from wfstack.runtime import SimRuntime
from wfstack.simcluster import ClusterConfig

J = JobState


def sh(cmd, **kw):
    return JobSpec("/bin/sh", ("-c", cmd), **kw)


@pytest.fixture(params=["local", "sim-batch"])
def executor(request):
    if request.param == "local":
        ex = LocalExecutor(cores=4)
    else:
        ex = SimBatchExecutor(ClusterConfig("sim", 4, 4), SimRuntime())
    yield ex
    ex.shutdown()


# -- backend substitutability: same tests, both backends ---------------------

def test_zero_exit_completes(executor):
    h = submit(executor, sh("exit 0"))
    h = wait(executor, h.job_id, 10)
    assert h.state is J.COMPLETED and h.exit_code == 0
    assert h.start_time is not None and h.end_time is not None


def test_nonzero_exit_fails(executor):
    h = wait(executor, submit(executor, sh("exit 3")).job_id, 10)
    assert h.state is J.FAILED and h.exit_code == 3


def test_cancel_active(executor):
    h = submit(executor, sh("sleep 3600"))
    executor.runtime.wait_until(lambda: status(executor, h.job_id).state is J.ACTIVE, 10)
    assert cancel(executor, h.job_id) is CancelResult.OK
    h = wait(executor, h.job_id, 10)
    assert h.state is J.CANCELED and h.exit_code is None and h.end_time is not None


def test_cancel_is_idempotent(executor):
    h = wait(executor, submit(executor, sh("exit 0")).job_id, 10)
    assert cancel(executor, h.job_id) is CancelResult.ALREADY_TERMINAL
    assert cancel(executor, h.job_id) is CancelResult.ALREADY_TERMINAL
    assert status(executor, h.job_id).state is J.COMPLETED


def test_wait_on_terminal_returns_at_once(executor):
    h = wait(executor, submit(executor, sh("exit 0")).job_id, 10)
    t = time.monotonic()
    assert wait(executor, h.job_id, 0).state is J.COMPLETED
    assert time.monotonic() - t < 1


def test_unknown_job(executor):
    with pytest.raises(JobNotFound):
        status(executor, "nope")
    with pytest.raises(JobNotFound):
        cancel(executor, "nope")
    with pytest.raises(JobNotFound):
        wait(executor, "nope", 1)


def test_event_log_is_legal(executor):
    ids = [submit(executor, sh(c)).job_id for c in ("exit 0", "exit 1", "sleep 3600")]
    wait(executor, ids[0], 10)
    wait(executor, ids[1], 10)
    cancel(executor, ids[2])
    wait(executor, ids[2], 10)
    final = replay(executor.events)
    assert [final[("job", i)] for i in ids] == [J.COMPLETED, J.FAILED, J.CANCELED]
    done = [e for e in executor.events if e.new_state is J.COMPLETED]
    assert done[0].detail["exit_code"] == "0"


def test_submit_after_shutdown(executor):
    executor.shutdown()
    with pytest.raises(SubmissionError):
        submit(executor, sh("exit 0"))


def test_invalid_spec_rejected(executor):
    with pytest.raises(ValidationError):
        submit(executor, JobSpec(""))


# -- simulated backend --------------------------------------------------------

def test_sim_status_after_submit_is_queued(sim_executor):
    ex = sim_executor()
    h = submit(ex, sh("exit 0"))
    assert h.state is J.QUEUED
    assert status(ex, h.job_id).state is J.QUEUED


def test_sim_capacity_bound(sim_executor):
    ex = sim_executor(nodes=4)
    with pytest.raises(ValidationError) as err:
        submit(ex, sh("exit 0", resources=ResourceSpec(node_count=8)))
    assert ("node_count", "exceeds cluster size") in err.value.errors


def test_sim_process_wider_than_node(sim_executor):
    with pytest.raises(ValidationError):
        submit(sim_executor(cores=4), sh("exit 0", resources=ResourceSpec(cores_per_process=5)))


def test_sim_cancel_queued_never_active(sim_executor):
    ex = sim_executor(nodes=1)
    a = submit(ex, sh("sleep 100"))
    b = submit(ex, sh("sleep 100"))
    ex.runtime.wait_until(lambda: status(ex, a.job_id).state is J.ACTIVE)
    assert status(ex, b.job_id).state is J.QUEUED
    cancel(ex, b.job_id)
    assert status(ex, b.job_id).state is J.CANCELED
    assert not any(e.subject_id == b.job_id and e.new_state is J.ACTIVE for e in ex.events)


def test_sim_wait_timeout(sim_executor):
    ex = sim_executor()
    h = submit(ex, sh("sleep 60"))
    with pytest.raises(WaitTimeout):
        wait(ex, h.job_id, 1)
    assert ex.runtime.now() <= 1


def test_sim_walltime(sim_executor):
    ex = sim_executor()
    h = wait(ex, submit(ex, sh("sleep 600", walltime_s=60)).job_id)
    assert h.state is J.FAILED and h.detail["reason"] == "walltime"
    assert h.end_time - h.start_time == 60


def test_sim_fifo_no_inversion(sim_executor):
    ex = sim_executor(nodes=2)
    spec = sh("sleep 10", resources=ResourceSpec(node_count=1))
    ids = [submit(ex, spec).job_id for _ in range(7)]
    ex.runtime.run()
    starts = [status(ex, i).start_time for i in ids]
    assert starts == sorted(starts)


def test_sim_fifo_head_blocks(sim_executor):
    ex = sim_executor(nodes=2)
    a = submit(ex, sh("sleep 10", resources=ResourceSpec(node_count=1)))
    big = submit(ex, sh("sleep 10", resources=ResourceSpec(node_count=2)))
    small = submit(ex, sh("sleep 10", resources=ResourceSpec(node_count=1)))
    ex.runtime.run()
    assert status(ex, big.job_id).start_time == status(ex, a.job_id).end_time
    assert status(ex, small.job_id).start_time >= status(ex, big.job_id).end_time


def test_sim_allocates_lowest_nodes(sim_executor):
    ex = sim_executor(nodes=4)
    h = submit(ex, sh("sleep 5", resources=ResourceSpec(node_count=2)))
    ex.runtime.wait_until(lambda: status(ex, h.job_id).state is J.ACTIVE)
    assert [n.node_id for n in status(ex, h.job_id).nodes] == ["n0000", "n0001"]
    assert ex.free_nodes == 2


def test_sim_deterministic(sim_executor):
    logs = []
    for _ in range(2):
        ex = sim_executor(nodes=3)
        for i in range(10):
            submit(ex, sh(f"sleep {i % 4 + 1}", resources=ResourceSpec(node_count=i % 3 + 1)))
        ex.runtime.run()
        logs.append([e.to_dict() for e in ex.events])
    assert logs[0] == logs[1]


# -- local backend ------------------------------------------------------------

def test_local_rejects_multi_node():
    ex = LocalExecutor()
    with pytest.raises(ValidationError):
        submit(ex, sh("exit 0", resources=ResourceSpec(node_count=2)))


def test_local_spawn_failure():
    ex = LocalExecutor()
    h = wait(ex, submit(ex, JobSpec("/no/such/binary")).job_id, 10)
    assert h.state is J.FAILED and h.exit_code == 127
    replay(ex.events)


def test_local_walltime():
    ex = LocalExecutor()
    h = wait(ex, submit(ex, sh("sleep 30", walltime_s=1)).job_id, 10)
    assert h.state is J.FAILED and h.detail["reason"] == "walltime"


def test_local_environment_and_directory(tmp_path):
    ex = LocalExecutor()
    out = tmp_path / "out.txt"
    spec = JobSpec("/bin/sh", ("-c", 'echo "$GREETING" > out.txt'), {"GREETING": "hi there"},
                   directory=str(tmp_path))
    assert wait(ex, submit(ex, spec).job_id, 10).state is J.COMPLETED
    assert out.read_text() == "hi there\n"


def test_local_stdout_path(tmp_path):
    ex = LocalExecutor()
    spec = JobSpec("/bin/echo", ("hello",), stdout_path=str(tmp_path / "o.txt"))
    wait(ex, submit(ex, spec).job_id, 10)
    assert (tmp_path / "o.txt").read_text() == "hello\n"


def test_local_wait_timeout():
    ex = LocalExecutor()
    h = submit(ex, sh("sleep 30"))
    with pytest.raises(WaitTimeout):
        wait(ex, h.job_id, 0.2)
    cancel(ex, h.job_id)
    assert wait(ex, h.job_id, 10).state is J.CANCELED


# -- registry -----------------------------------------------------------------

def test_registry():
    assert {"local", "sim-batch"} <= set(executor_names())
    assert Capability.SIMULATED in get_descriptor("sim-batch").capabilities
    assert Capability.REAL_EXEC in get_descriptor("local").capabilities
    ex = create_executor("sim-batch", cluster=ClusterConfig("c", 1, 1))
    assert isinstance(ex, SimBatchExecutor)
    with pytest.raises(LookupError, match="local"):
        create_executor("slurm")
