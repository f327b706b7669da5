import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import expected_partition_sizes, oversubscriptions
from wfstack.lrm import LocalExecutor
from wfstack.model import (
    EventRecord,
    InstanceState,
    JobState,
    NodeResources,
    Payload,
    ResourceSpec,
    TaskDescription,
    TaskState,
    replay,
)
from wfstack.pilot import (
    Allocation,
    BootstrapError,
    DuplicateUid,
    EventConverter,
    InvalidPartition,
    PilotDescription,
    PilotNotReady,
    UnknownEvent,
    convert_events,
    partition_nodes,
    submit_pilot,
)
from wfstack.scheduler import Unsatisfiable

I = InstanceState
T = TaskState
TRUE = Payload(executable="/bin/true")


def desc(nodes, k=1, walltime=10**6):
    return PilotDescription(ResourceSpec(node_count=nodes), walltime, k)


def bag(n, cores=1, duration=10, prefix="t"):
    return [TaskDescription(f"{prefix}{i:04d}", TRUE, 1, cores, 0, duration) for i in range(n)]


def ready_pilot(executor, nodes, k=1, **kw):
    pilot = submit_pilot(desc(nodes, k, kw.pop("walltime", 10**6)), executor, **kw)
    assert pilot.wait_ready()
    return pilot


# -- partitioning -------------------------------------------------------------

def test_even_split():
    ids = [f"n{i}" for i in range(8)]
    assert partition_nodes(ids, 2) == [ids[:4], ids[4:]]


def test_remainder_goes_first():
    ids = [f"n{i}" for i in range(10)]
    parts = partition_nodes(ids, 3)
    assert [len(p) for p in parts] == [4, 3, 3]
    assert parts[0] == ids[:4]


def test_identity_partition():
    nodes = [NodeResources(f"n{i}", 4) for i in range(4)]
    assert partition_nodes(Allocation(tuple(nodes), "j"), 1) == [nodes]


@pytest.mark.parametrize("k", [0, 5, -1])
def test_partition_out_of_range(k):
    with pytest.raises(InvalidPartition):
        partition_nodes(["a", "b", "c", "d"], k)


def test_allocation_requires_unique_nodes():
    with pytest.raises(ValueError):
        Allocation((NodeResources("a", 1), NodeResources("a", 1)), "j")


@given(st.integers(1, 64).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_partition_property(nk):
    n, k = nk
    ids = list(range(n))
    parts = partition_nodes(ids, k)
    assert [len(p) for p in parts] == expected_partition_sizes(n, k)
    assert list(itertools.chain.from_iterable(parts)) == ids


def test_description_validation():
    with pytest.raises(ValueError):
        desc(2, k=3).validate()
    with pytest.raises(ValueError):
        PilotDescription(ResourceSpec(node_count=2), 0, 1).validate()


# -- conversion ---------------------------------------------------------------

def iev(uid, old, new, **detail):
    return EventRecord(0, uid, old, new, {k: str(v) for k, v in detail.items()})


def test_convert_finished_zero():
    got = EventConverter().convert(iev("t", I.RUN, I.FINISHED, exit_code=0))
    assert got.new_state is T.DONE and got.detail["exit_code"] == "0"


def test_convert_finished_nonzero():
    got = EventConverter().convert(iev("t", I.RUN, I.FINISHED, exit_code=1))
    assert got.new_state is T.FAILED and got.detail["exit_code"] == "1"


def test_convert_canceled():
    assert EventConverter().convert(iev("t", I.PENDING, I.CANCELED)).new_state is T.CANCELED


def test_convert_stream_preserves_order():
    stream = [
        iev("a", I.NEW, I.PENDING), iev("b", I.NEW, I.PENDING), iev("a", I.PENDING, I.RUN),
        iev("b", I.PENDING, I.EXCEPTION, error="x"), iev("a", I.RUN, I.FINISHED, exit_code=0),
    ]
    out = convert_events(stream)
    assert [(e.subject_id, e.new_state) for e in out] == [
        ("a", T.SCHEDULING), ("b", T.SCHEDULING), ("a", T.EXECUTING), ("b", T.FAILED), ("a", T.DONE),
    ]
    replay(out)


def test_convert_unknown():
    with pytest.raises(UnknownEvent):
        EventConverter().convert(iev("t", JobState.QUEUED, JobState.ACTIVE))


# -- pilot on the simulated batch system --------------------------------------

def test_two_instances_disjoint(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=4), 4, k=2)
    subsets = [inst.inventory.node_ids for inst in pilot.instances]
    assert subsets == [["n0000", "n0001"], ["n0002", "n0003"]]


def test_single_instance_sees_all(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=8), 8)
    assert len(pilot.instances) == 1 and len(pilot.instances[0].inventory) == 8


def test_not_ready_before_activation(sim_executor):
    ex = sim_executor(nodes=2)
    pilot = submit_pilot(desc(2), ex)
    with pytest.raises(PilotNotReady):
        pilot.submit_tasks(bag(1))


def test_round_robin_assignment(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=4), 4, k=2)
    handles = pilot.submit_tasks(bag(4))
    assert [h.instance for h in handles] == [0, 1, 0, 1]


def test_oversized_task_rejected_eagerly(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=4, cores=4), 4, k=2)
    wide = TaskDescription("wide", TRUE, ranks=3, cores_per_rank=4)
    with pytest.raises(Unsatisfiable):
        pilot.submit_tasks(bag(2) + [wide])
    assert pilot.tasks == {}


def test_duplicate_uid(sim_executor):
    pilot = ready_pilot(sim_executor(), 4)
    pilot.submit_tasks(bag(1))
    with pytest.raises(DuplicateUid):
        pilot.submit_tasks(bag(1))


def test_thousand_tasks_balanced(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=4, cores=4), 4, k=2)
    handles = pilot.submit_tasks(bag(1000))
    assert pilot.wait_tasks()
    assert all(h.state is T.DONE for h in handles)
    counts = [sum(h.instance == i for h in handles) for i in range(2)]
    assert counts == [500, 500]
    cap = {n.node_id: (n.cores, n.gpus) for n in pilot.allocation.nodes}
    assert oversubscriptions(pilot.task_events, cap) == []


def test_least_queue_policy(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=4, cores=4), 4, k=2, policy="least-queue")
    handles = pilot.submit_tasks(bag(10))
    assert [h.instance for h in handles] == [0, 1] * 5
    pilot.wait_tasks()
    assert pilot.outstanding == [0, 0]


def test_watchers_see_every_terminal_task(sim_executor):
    pilot = ready_pilot(sim_executor(), 4)
    seen = []
    pilot.add_watcher(lambda h: seen.append((h.uid, h.state)))
    fail = TaskDescription("bad", Payload(executable="/bin/sh", arguments=("-c", "exit 4")))
    pilot.submit_tasks(bag(3) + [fail])
    pilot.wait_tasks()
    assert sorted(seen) == [("bad", T.FAILED), ("t0000", T.DONE), ("t0001", T.DONE), ("t0002", T.DONE)]
    assert pilot.tasks["bad"].exit_code == 4


def test_function_result_reaches_handle(sim_executor):
    pilot = ready_pilot(sim_executor(), 4)
    [h] = pilot.submit_tasks([TaskDescription("f", Payload(function="add", args=(20, 22)))])
    pilot.wait_tasks()
    assert h.state is T.DONE and h.result == 42


def test_walltime_mid_run(sim_executor):
    ex = sim_executor(nodes=2, cores=2)
    pilot = ready_pilot(ex, 2, walltime=25)
    handles = pilot.submit_tasks(bag(12, duration=10))
    pilot.wait_tasks()
    assert pilot.state is JobState.FAILED
    job_end = [e for e in ex.events if e.subject_id == pilot.job_id][-1]
    assert job_end.detail["reason"] == "walltime"
    states = [h.state for h in handles]
    assert states.count(T.DONE) == 8
    assert all(s in (T.DONE, T.CANCELED) for s in states)
    # tasks running when the allocation vanished are canceled, not failed
    running = [h for h in handles if h.state is T.CANCELED and "placement" in h.detail]
    assert len(running) == 4
    replay(pilot.task_events)


def test_bootstrap_failure(sim_executor, monkeypatch):
    ex = sim_executor(nodes=2)
    pilot = submit_pilot(desc(2, k=2), ex)
    # a batch system that grants fewer nodes than requested
    real = ex._start

    def short(job_id, spec, picked):
        real(job_id, spec, picked[:1])

    monkeypatch.setattr(ex, "_start", short)
    assert not pilot.wait_ready()
    assert isinstance(pilot.error, BootstrapError)
    assert pilot.state is JobState.FAILED
    assert ex.status(pilot.job_id).state is JobState.CANCELED


def test_shutdown_cancels_leftovers(sim_executor):
    pilot = ready_pilot(sim_executor(nodes=1, cores=1), 1)
    handles = pilot.submit_tasks(bag(5, duration=100))
    pilot.shutdown(deadline=150)
    assert [h.state for h in handles].count(T.DONE) == 1
    assert all(h.terminal for h in handles)
    assert pilot.state is JobState.CANCELED
    replay(pilot.task_events)


def test_deterministic(sim_executor):
    logs = []
    for _ in range(2):
        pilot = ready_pilot(sim_executor(nodes=4, cores=4, gpus=2), 4, k=2, launch_rate=3)
        work = [TaskDescription(f"t{i}", TRUE, i % 3 + 1, i % 2 + 1, i % 2, i % 7 + 1) for i in range(60)]
        pilot.submit_tasks(work)
        pilot.shutdown()
        logs.append([e.to_dict() for e in pilot.task_events])
    assert logs[0] == logs[1]


# -- pilot on the local backend -----------------------------------------------

def test_local_pilot_runs_tasks(tmp_path):
    ex = LocalExecutor(cores=2)
    pilot = ready_pilot(ex, 1, sandbox=tmp_path)
    echo = TaskDescription("e", Payload(executable="/bin/sh", arguments=("-c", "echo rank $WFSTACK_RANK")), ranks=2)
    fail = TaskDescription("x", Payload(executable="/bin/sh", arguments=("-c", "exit 5")))
    pilot.submit_tasks([echo, fail])
    assert pilot.wait_tasks(20)
    assert pilot.tasks["e"].state is T.DONE
    assert pilot.tasks["x"].state is T.FAILED and pilot.tasks["x"].exit_code == 5
    pilot.shutdown(5)
    ex.shutdown()
    assert pilot.state is JobState.CANCELED
    outs = sorted(p.read_text() for p in tmp_path.glob("e*.out"))
    assert outs == ["rank 0\n", "rank 1\n"]


def test_local_pilot_cancel_running_task():
    ex = LocalExecutor(cores=1)
    pilot = ready_pilot(ex, 1)
    pilot.submit_tasks([TaskDescription("s", Payload(executable="/bin/sleep", arguments=("30",)))])
    pilot.runtime.wait_until(lambda: pilot.tasks["s"].state is T.EXECUTING, 10)
    pilot.cancel_task("s")
    assert pilot.wait_tasks(10)
    assert pilot.tasks["s"].state is T.CANCELED
    pilot.shutdown(5)
    ex.shutdown()
