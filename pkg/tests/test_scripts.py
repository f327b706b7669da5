from pathlib import Path

import pytest
import yaml

from wfstack.lrm import ScriptTemplate, TemplateError, dialect_names, get_template, render_submit_script
from wfstack.lrm.scripts import PLACEMENT_FIELDS
from wfstack.model import JobSpec, ResourceSpec, validate_job_spec

FIXTURES = Path(__file__).parent / "fixtures"
SPECS = sorted(p.stem for p in (FIXTURES / "specs").glob("*.yaml"))
DIALECTS = ["slurm-like", "pbs-like"]


def load_spec(name):
    doc = yaml.safe_load((FIXTURES / "specs" / f"{name}.yaml").read_text(encoding="utf-8"))
    return validate_job_spec(JobSpec.from_dict(doc))


def test_fixture_set():
    assert len(SPECS) == 5
    assert dialect_names() == sorted(DIALECTS)


@pytest.mark.parametrize("dialect", DIALECTS)
@pytest.mark.parametrize("name", SPECS)
def test_golden(name, dialect):
    expected = (FIXTURES / "scripts" / "v1" / f"{name}.{dialect}.sh").read_bytes()
    assert render_submit_script(get_template(dialect), load_spec(name)).encode("utf-8") == expected


def test_eight_ranks_launch_line():
    text = render_submit_script(get_template("slurm-like"), load_spec("eight_ranks"))
    assert text.splitlines()[-1].startswith("srun -n 8 ")
    assert "#SBATCH --time=01:00:00" in text


def test_queue_directive_once():
    text = render_submit_script(get_template("pbs-like"), load_spec("debug_queue"))
    assert text.count("#PBS -q debug") == 1


def test_deterministic():
    t, s = get_template("slurm-like"), load_spec("env_quoting")
    assert render_submit_script(t, s) == render_submit_script(t, s)


def test_unsupported_field_set():
    spec = validate_job_spec(JobSpec("/bin/true", resources=ResourceSpec(cores_per_process=4), directory="/w"))
    with pytest.raises(TemplateError, match="cores_per_process"):
        render_submit_script(get_template("pbs-like"), spec)
    text = render_submit_script(get_template("slurm-like"), spec)
    assert "#SBATCH --cpus-per-task=4\n" in text


def test_template_must_cover_placement_fields():
    with pytest.raises(TemplateError, match="queue"):
        ScriptTemplate("x", "#X", tuple((f, "{value}") for f in PLACEMENT_FIELDS if f != "queue"), "run {command}")


def test_unknown_dialect():
    with pytest.raises(LookupError, match="slurm-like"):
        get_template("xyz")


def test_template_from_file(tmp_path):
    path = tmp_path / "lsf-like.yaml"
    directives = {f: "unsupported" for f in PLACEMENT_FIELDS}
    directives["walltime_s"] = "-W {hms}"
    path.write_text(yaml.safe_dump({"dialect": "lsf-like", "directive_prefix": "#BSUB",
                                    "directives": directives, "launch_line": "jsrun -n {ranks} {command}"}))
    t = ScriptTemplate.load(path)
    spec = validate_job_spec(JobSpec("/bin/true", walltime_s=61, directory="/w"))
    assert render_submit_script(t, spec) == "#!/bin/bash\n#BSUB -W 00:01:01\n\njsrun -n 1 /bin/true\n"
