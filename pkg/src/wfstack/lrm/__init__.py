"""Local-resource-manager abstraction: pluggable job executors and submit-script rendering."""

from .base import (
    CancelResult,
    Capability,
    Executor,
    ExecutorDescriptor,
    JobHandle,
    JobNotFound,
    SubmissionError,
    WaitTimeout,
    cancel,
    create_executor,
    executor_names,
    get_descriptor,
    register_executor,
    status,
    submit,
    wait,
)
from .local import LocalExecutor
from .scripts import ScriptTemplate, TemplateError, dialect_names, get_template, render_submit_script
from .simbatch import SimBatchExecutor

__all__ = [
    "CancelResult",
    "Capability",
    "Executor",
    "ExecutorDescriptor",
    "JobHandle",
    "JobNotFound",
    "LocalExecutor",
    "ScriptTemplate",
    "SimBatchExecutor",
    "SubmissionError",
    "TemplateError",
    "WaitTimeout",
    "cancel",
    "create_executor",
    "dialect_names",
    "executor_names",
    "get_descriptor",
    "get_template",
    "register_executor",
    "render_submit_script",
    "status",
    "submit",
    "wait",
]
