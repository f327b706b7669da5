"""wfstack command line.

Exit codes:
  0  success
  1  usage, I/O or parse error; unknown dialect
  2  validation error (workflow graph, job spec, platform file)
  3  one or more tasks failed (results are still written)
  4  pilot failed to start or was lost before the run ended (walltime included)
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

import yaml

from . import dataflow
from .experiments import build_report, homogeneous_bag, merged_events, mixed_bag, run_bag, write_events, write_report
from .lrm import dialect_names, get_template, render_submit_script
from .lrm.base import WaitTimeout
from .model import DEFAULT_WALLTIME_S, JobSpec, JobState, ResourceSpec, ValidationError, validate_job_spec
from .pilot import POLICIES, PilotDescription, submit_pilot
from .platform import PlatformConfig
from .simcluster import CSV_HEADER, ClusterConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_TASK_FAILED = 3
EXIT_PILOT_FAILED = 4

log = logging.getLogger("wfstack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_doc(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
        doc = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    return doc


def _load_platform(path: str) -> PlatformConfig:
    doc = _read_doc(path)
    if not isinstance(doc, dict):
        raise ValidationError([("platform", "expected a mapping")])
    return PlatformConfig.from_dict(doc)


def _load_graph(path: str) -> dataflow.WorkflowGraph:
    try:
        return dataflow.load_workflow(path)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _load_spec(path: str) -> JobSpec:
    doc = _read_doc(path)
    if not isinstance(doc, dict):
        raise ValidationError([("spec", "expected a mapping")])
    return validate_job_spec(JobSpec.from_dict(doc))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    graph = _load_graph(args.workflow)
    dataflow.validate_graph(graph)
    print(f"{len(graph)} nodes, {graph.edge_count} edges")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        template = get_template(args.dialect)
    except LookupError:
        print(f"unknown dialect {args.dialect!r}; available: {', '.join(dialect_names())}", file=sys.stderr)
        return EXIT_USAGE
    spec = _load_spec(args.spec)
    sys.stdout.write(render_submit_script(template, spec))
    return EXIT_OK


def cmd_submit(args) -> int:
    spec = _load_spec(args.spec)
    platform = _load_platform(args.platform)
    executor = platform.make_executor()
    try:
        handle = executor.submit(spec)
        print(handle.job_id)
        if args.no_wait:
            return EXIT_OK
        try:
            handle = executor.wait(handle.job_id, args.timeout)
        except WaitTimeout:
            executor.cancel(handle.job_id)
            handle = executor.status(handle.job_id)
        print(f"{handle.state.value} exit_code={handle.exit_code}")
    finally:
        executor.shutdown()
    return EXIT_OK if handle.state is JobState.COMPLETED else EXIT_TASK_FAILED


def _run_dir(args) -> Path:
    if not args.run_id or "/" in args.run_id or args.run_id in (".", ".."):
        raise UsageError(f"bad run id {args.run_id!r}")
    return Path(args.out) / args.run_id


def _start_pilot(args, platform: PlatformConfig, sandbox: Path | None):
    executor = platform.make_executor()
    desc = PilotDescription(ResourceSpec(node_count=args.nodes), args.walltime, args.instances, platform.name)
    pilot = submit_pilot(desc, executor, policy=args.policy, launch_rate=platform.launch_rate, sandbox=sandbox)
    return executor, pilot


def cmd_run(args) -> int:
    graph = _load_graph(args.workflow)
    dataflow.validate_graph(graph)
    platform = _load_platform(args.platform)
    out = _run_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    # function payloads that draw random numbers see the same stream on every run
    random.seed(args.seed)
    executor, pilot = _start_pilot(args, platform, None if platform.simulated else out / "sandbox")
    try:
        if not pilot.wait_ready():
            print(f"pilot failed: {pilot.error or pilot.state.value}", file=sys.stderr)
            write_events(merged_events(pilot), out / "events.jsonl")
            return EXIT_PILOT_FAILED
        outcomes = dataflow.run(graph, pilot)
    finally:
        pilot.shutdown()
        executor.shutdown()

    results = {uid: outcomes[uid].to_dict() for uid in sorted(outcomes)}
    (out / "results.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    events = merged_events(pilot)
    nodes = pilot.allocation.nodes
    cluster = ClusterConfig(pilot.job_id, len(nodes), nodes[0].cores, nodes[0].gpus)
    try:
        report = build_report(events, cluster)
    except ValueError:
        # nothing ever ran: keep the log, write an empty series
        write_events(events, out / "events.jsonl")
        (out / "utilization.csv").write_text(",".join(CSV_HEADER) + "\n", encoding="utf-8")
    else:
        write_report(report, out, title=f"{args.run_id} on {platform.name}", plot=not args.no_plot)

    failed = sorted(u for u, o in outcomes.items() if not o.ok)
    done = len(outcomes) - len(failed)
    print(f"{done}/{len(outcomes)} nodes done; report in {out}")
    if pilot.error is not None or pilot.state is JobState.FAILED:
        return EXIT_PILOT_FAILED
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_TASK_FAILED
    return EXIT_OK


def cmd_experiment(args) -> int:
    platform = _load_platform(args.platform)
    if not platform.simulated:
        raise UsageError("experiments need a simulated platform")
    out = _run_dir(args)
    cluster = platform.schedulable_cluster()
    nodes = args.nodes
    capacity = nodes * cluster.cores_per_node
    count = args.tasks or int(args.load * capacity / args.cpu_cores)
    if args.gpu_share > 0:
        tasks = mixed_bag(count, gpu_share=args.gpu_share, duration=args.duration, cpu_cores=args.cpu_cores,
                          seed=args.seed)
    else:
        tasks = homogeneous_bag(count, duration=args.duration, cores=args.cpu_cores)
    pilot, report = run_bag(platform, tasks, nodes=nodes, instances=args.instances, walltime_s=args.walltime,
                            policy=args.policy)
    write_report(report, out, title=f"{args.run_id} on {platform.name}", plot=not args.no_plot)
    s = report.summary()
    line = f"{count} tasks, makespan {s['makespan']}, steady cores {s['steady_core_utilization']:.4f}"
    if s["steady_gpu_utilization"] is not None:
        line += f", steady gpus {s['steady_gpu_utilization']:.4f}"
    print(line)
    return EXIT_OK if pilot.all_done else EXIT_TASK_FAILED


# ---------------------------------------------------------------------------
# parser


def _pilot_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--platform", required=True, help="platform configuration file")
    p.add_argument("--nodes", type=int, required=True, help="pilot node_count")
    p.add_argument("--instances", type=int, default=1, help="pilot instance_count (nested schedulers)")
    p.add_argument("--walltime", type=int, default=DEFAULT_WALLTIME_S, help="pilot walltime in seconds")
    p.add_argument("--policy", choices=sorted(POLICIES), default="round-robin")
    p.add_argument("--run-id", required=True, help="names the report directory under --out")
    p.add_argument("--out", default="runs", help="parent directory for reports")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figure")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wfstack", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a workflow file without running it")
    p.add_argument("workflow")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a workflow inside a pilot")
    p.add_argument("workflow")
    _pilot_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render", help="print the submit script for a job spec")
    p.add_argument("spec")
    p.add_argument("-m", "--dialect", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("submit", help="submit a single job spec to a platform's executor")
    p.add_argument("spec")
    p.add_argument("--platform", required=True)
    p.add_argument("--no-wait", action="store_true")
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("experiment", help="bag-of-tasks utilization run on a simulated platform")
    _pilot_flags(p)
    p.add_argument("--tasks", type=int, default=0, help="task count (default: --load times core capacity)")
    p.add_argument("--load", type=float, default=10.0)
    p.add_argument("--duration", type=int, default=300)
    p.add_argument("--cpu-cores", type=int, default=1, help="cores per CPU task")
    p.add_argument("--gpu-share", type=float, default=0.0, help="fraction of 1-GPU tasks")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except dataflow.CyclicDependency as exc:
        print(f"cycle: {' -> '.join(exc.cycle)}", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, dataflow.DanglingReference) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
