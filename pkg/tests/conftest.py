from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wfstack.lrm import SimBatchExecutor  # noqa: E402
from wfstack.platform import PlatformConfig  # noqa: E402
from wfstack.runtime import SimRuntime  # noqa: E402
from wfstack.simcluster import ClusterConfig  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def sim_executor():
    def make(nodes=4, cores=4, gpus=0):
        return SimBatchExecutor(ClusterConfig("sim", nodes, cores, gpus), SimRuntime())

    return make


@pytest.fixture
def sim_platform():
    def make(nodes=4, cores=4, gpus=0, reserved=0, launch_rate=0):
        return PlatformConfig("sim", "sim-batch", ClusterConfig("sim", nodes, cores, gpus),
                              reserved_cores_per_node=reserved, launch_rate=launch_rate)

    return make


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
