"""wfstack: a layered HPC workflow stack.

Batch-system abstraction (``lrm``), a pilot runtime with nested first-fit
scheduler instances (``pilot``, ``scheduler``), a dataflow engine on top
(``dataflow``), and a discrete-event cluster simulator (``simcluster``) so
the whole stack can be exercised without an HPC machine.
"""

from .dataflow import Workflow, WorkflowGraph, load_workflow, run, validate_graph
from .model import (
    EventRecord,
    IllegalTransition,
    InstanceState,
    JobSpec,
    JobState,
    NodeResources,
    Payload,
    ResourceSpec,
    TaskDescription,
    TaskState,
    ValidationError,
    replay,
    transition,
    validate_job_spec,
)
from .pilot import Pilot, PilotDescription, partition_nodes, submit_pilot
from .platform import PlatformConfig
from .runtime import RealRuntime, SimRuntime
from .scheduler import NodeInventory, Placement, SchedulerInstance, release, try_place
from .simcluster import ClusterConfig, compute_utilization

__all__ = [
    "ClusterConfig",
    "EventRecord",
    "IllegalTransition",
    "InstanceState",
    "JobSpec",
    "JobState",
    "NodeInventory",
    "NodeResources",
    "Payload",
    "Pilot",
    "PilotDescription",
    "Placement",
    "PlatformConfig",
    "RealRuntime",
    "ResourceSpec",
    "SchedulerInstance",
    "SimRuntime",
    "TaskDescription",
    "TaskState",
    "ValidationError",
    "Workflow",
    "WorkflowGraph",
    "compute_utilization",
    "load_workflow",
    "partition_nodes",
    "release",
    "replay",
    "run",
    "submit_pilot",
    "transition",
    "try_place",
    "validate_graph",
    "validate_job_spec",
]
