"""Platform configuration files: which backend, which cluster, which script dialect."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .lrm import create_executor, dialect_names, executor_names
from .lrm.base import Executor
from .model import ValidationError
from .simcluster import ClusterConfig


@dataclass(frozen=True)
class PlatformConfig:
    name: str
    backend: str
    cluster: ClusterConfig | None = None
    dialect: str = "slurm-like"
    reserved_cores_per_node: int = 0
    # simulated launcher throughput per scheduler instance, tasks per tick; 0 = unbounded
    launch_rate: int = 0

    def validate(self) -> PlatformConfig:
        errors = []
        if self.backend not in executor_names():
            errors.append(("backend", f"unknown backend {self.backend!r}"))
        if self.backend == "sim-batch" and self.cluster is None:
            errors.append(("cluster", "required for sim-batch"))
        if self.dialect not in dialect_names():
            errors.append(("dialect", f"unknown dialect {self.dialect!r}"))
        if self.reserved_cores_per_node < 0:
            errors.append(("reserved_cores_per_node", "must be >= 0"))
        elif self.cluster is not None and self.reserved_cores_per_node >= self.cluster.cores_per_node:
            errors.append(("reserved_cores_per_node", "must be < cores_per_node"))
        if self.launch_rate < 0:
            errors.append(("launch_rate", "must be >= 0"))
        if errors:
            raise ValidationError(errors)
        return self

    @property
    def simulated(self) -> bool:
        return self.backend == "sim-batch"

    def schedulable_cluster(self) -> ClusterConfig | None:
        """The cluster as the scheduler sees it: reserved cores removed from every node."""
        c = self.cluster
        if c is None:
            return None
        return ClusterConfig(c.name, c.node_count, c.cores_per_node - self.reserved_cores_per_node, c.gpus_per_node)

    def make_executor(self) -> Executor:
        if self.simulated:
            return create_executor(self.backend, cluster=self.schedulable_cluster())
        cores = None
        if self.cluster is not None:
            cores = self.cluster.cores_per_node - self.reserved_cores_per_node
        return create_executor(self.backend, cores=cores)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PlatformConfig:
        allowed = {"name", "backend", "cluster", "dialect", "reserved_cores_per_node", "launch_rate"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ValidationError((k, "unknown field") for k in unknown)
        data = dict(doc)
        cluster = data.pop("cluster", None)
        if cluster is not None:
            cluster = dict(cluster)
            cluster.setdefault("name", data.get("name", "cluster"))
            try:
                cluster = ClusterConfig(**cluster)
            except (TypeError, ValueError) as exc:
                raise ValidationError([("cluster", str(exc))]) from None
        return cls(cluster=cluster, **data).validate()

    @classmethod
    def load(cls, path: str | Path) -> PlatformConfig:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValidationError([("platform", "expected a mapping")])
        return cls.from_dict(doc)
