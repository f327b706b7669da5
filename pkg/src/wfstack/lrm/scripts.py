"""Render batch submit scripts from data-defined dialect templates."""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from ..model import ValidatedJobSpec

UNSUPPORTED = "unsupported"

# fields that affect placement; every template must map or refuse each one
PLACEMENT_FIELDS = (
    "node_count",
    "process_count",
    "processes_per_node",
    "cores_per_process",
    "gpus_per_process",
    "walltime_s",
    "queue",
    "project",
    "stdout_path",
    "stderr_path",
)

_RESOURCE_FIELDS = {"node_count", "process_count", "processes_per_node", "cores_per_process", "gpus_per_process"}
_UNSET = {"node_count": 0, "process_count": 1, "processes_per_node": 0, "cores_per_process": 1, "gpus_per_process": 0}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class ScriptTemplate:
    dialect: str
    directive_prefix: str
    directive_map: tuple[tuple[str, str | None], ...]
    launch_line_format: str
    shebang: str = "#!/bin/bash"

    def __post_init__(self):
        mapped = {f for f, _ in self.directive_map}
        missing = [f for f in PLACEMENT_FIELDS if f not in mapped]
        if missing:
            raise TemplateError(f"dialect {self.dialect}: no directive or '{UNSUPPORTED}' marker for {missing}")

    @classmethod
    def from_dict(cls, doc: dict) -> ScriptTemplate:
        directives = tuple(
            (str(k), None if v == UNSUPPORTED else str(v)) for k, v in doc["directives"].items()
        )
        return cls(
            dialect=doc["dialect"],
            directive_prefix=doc["directive_prefix"],
            directive_map=directives,
            launch_line_format=doc["launch_line"],
            shebang=doc.get("shebang", "#!/bin/bash"),
        )

    @classmethod
    def load(cls, path: str | Path) -> ScriptTemplate:
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def dialect_names() -> list[str]:
    folder = resources.files(__package__) / "dialects"
    return sorted(p.name[: -len(".yaml")] for p in folder.iterdir() if p.name.endswith(".yaml"))


def get_template(dialect: str) -> ScriptTemplate:
    path = resources.files(__package__) / "dialects" / f"{dialect}.yaml"
    if not path.is_file():
        raise LookupError(f"unknown dialect {dialect!r}; available: {', '.join(dialect_names())}")
    return ScriptTemplate.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))


def _hms(seconds: int) -> str:
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def _field_value(spec: ValidatedJobSpec, name: str):
    if name in _RESOURCE_FIELDS:
        return getattr(spec.resources, name)
    return getattr(spec, name)


def _is_set(name: str, value) -> bool:
    if name in _UNSET:
        return value != _UNSET[name]
    return value is not None and value != ""


def render_submit_script(template: ScriptTemplate, spec: ValidatedJobSpec) -> str:
    """Directive block, environment exports, launch line; LF-terminated."""
    lines = [template.shebang]
    for name, fmt in template.directive_map:
        value = _field_value(spec, name)
        if not _is_set(name, value):
            continue
        if fmt is None:
            raise TemplateError(f"dialect {template.dialect} does not support {name}")
        hms = _hms(value) if isinstance(value, int) else ""
        lines.append(f"{template.directive_prefix} {fmt.format(value=value, hms=hms)}")
    if spec.environment:
        lines.append("")
        for key in sorted(spec.environment):
            lines.append(f"export {key}={shlex.quote(spec.environment[key])}")
    lines.append("")
    command = shlex.join([spec.executable, *spec.arguments])
    lines.append(template.launch_line_format.format(ranks=spec.resources.process_count, command=command))
    return "\n".join(lines) + "\n"
