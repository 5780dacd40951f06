"""Command-line front end.

Subcommands mirror the library entry points: `run` drives one task,
`bench` runs the benchmark matrix and writes a report document, `memory`
inspects a playbook store, `eval` re-renders a report at chosen k values.
Exit status is 0 exactly when the requested operation completed; a failed
design run still exits 0 (the run completed and reported its result).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import agents, evalkit, memory, orchestrate, taskfile
from .model import difficulty_for_id


def _add_run(sub) -> None:
    p = sub.add_parser("run", help="run one task against a backend")
    p.add_argument("--task", required=True, help="task file path")
    p.add_argument("--backend", required=True,
                   help="backend spec: scripted:<path> or http:<url>")
    p.add_argument("--store", required=True, help="playbook store path")
    p.add_argument("--K", type=int, default=30, help="iteration budget")
    p.add_argument("--workspace", default=None,
                   help="artifact directory (default: <task stem>.work)")
    p.add_argument("--no-bias-repair", action="store_true",
                   help="skip the bias-patched sibling on failures")
    p.add_argument("--tune", action="store_true",
                   help="run parameter refinement after a pass")


def _add_bench(sub) -> None:
    p = sub.add_parser("bench", help="run every task in a directory n times")
    p.add_argument("--tasks", required=True, help="directory of .task files")
    p.add_argument("--n", type=int, default=30, help="runs per task")
    p.add_argument("--K", type=int, default=30, help="iteration budget per run")
    p.add_argument("--report", required=True, help="report JSON output path")
    p.add_argument("--backend", required=True,
                   help="backend spec: scripted:<path> or http:<url>")
    p.add_argument("--store", default=None,
                   help="shared store path (default: <report dir>/bench.playbook)")
    p.add_argument("--workspace", default=None,
                   help="bench workspace root (default: <report dir>/bench.work)")
    p.add_argument("--label", default=None,
                   help="column label in the report (default: backend spec)")
    p.add_argument("--isolated-memory", action="store_true",
                   help="fresh store per run instead of one shared store")


def _add_memory(sub) -> None:
    p = sub.add_parser("memory", help="inspect a playbook store")
    p.add_argument("action", choices=("show", "export"),
                   help="show: human summary; export: full store text")
    p.add_argument("--store", required=True, help="playbook store path")


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="re-render a benchmark report")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--passk", default="1,5",
                   help="comma-separated k values (default: 1,5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="circuitloop",
        description="closed-loop circuit design: generate, verify, remember")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_bench(sub)
    _add_memory(sub)
    _add_eval(sub)
    return parser


def _cmd_run(args) -> int:
    task = taskfile.load(Path(args.task))
    backend = agents.parse_backend_spec(args.backend)
    workspace = Path(args.workspace) if args.workspace else Path(
        Path(args.task).stem + ".work")
    config = orchestrate.RunConfig(
        K=args.K,
        enable_bias_repair=not args.no_bias_repair,
        enable_tuning=args.tune)
    state = orchestrate.run_task(task, backend, Path(args.store), config, workspace)
    status = "pass" if state.success else "fail"
    print(f"task {task.task_id} ({task.task_type}): {status}")
    print(f"  attempts: {state.attempts}/{config.K}")
    if state.first_success_at is not None:
        print(f"  first success at: {state.first_success_at}")
        print(f"  time to first success: {state.ttfs:g}")
    print(f"  cumulative tokens: {state.cumulative_tokens}")
    print(f"  workspace: {workspace}")
    return 0


def _cmd_bench(args) -> int:
    tasks = taskfile.load_dir(Path(args.tasks))
    if not tasks:
        print(f"no .task files under {args.tasks}", file=sys.stderr)
        return 1
    backend = agents.parse_backend_spec(args.backend)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    store = Path(args.store) if args.store else report_path.parent / "bench.playbook"
    workspace = Path(args.workspace) if args.workspace else report_path.parent / "bench.work"
    config = orchestrate.BenchConfig(
        n_samples=args.n,
        run=orchestrate.RunConfig(K=args.K),
        isolated_memory=args.isolated_memory)
    tallies, _ = orchestrate.run_benchmark(tasks, backend, store, workspace, config)
    label = args.label or args.backend
    difficulty = {t.task_id: t.difficulty.value for t in tasks}
    doc = evalkit.report([(label, [tallies])], difficulty)
    report_path.write_text(doc.to_json())
    print(doc.render())
    print(f"report written to {report_path}")
    return 0


def _cmd_memory(args) -> int:
    path = Path(args.store)
    state = memory.load(path)        # validates checksum and format
    if args.action == "export":
        sys.stdout.write(path.read_text())
        return 0
    entries = state.all_entries()
    print(f"store version {state.version}: {len(entries)} entries, "
          f"{len(state.conventions)} conventions")
    for e in entries:
        print(f"  [{e.scope}] {e.entry_id}  {e.admission_basis.value}")
        print(f"    {e.rule}")
    return 0


def _cmd_eval(args) -> int:
    doc = evalkit.ReportDocument.from_json(Path(args.report).read_text())
    try:
        ks = tuple(int(k.strip()) for k in args.passk.split(",") if k.strip())
    except ValueError:
        print(f"bad --passk value: {args.passk!r}", file=sys.stderr)
        return 1
    if not ks:
        print("--passk needs at least one k", file=sys.stderr)
        return 1
    print(doc.render(ks))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "bench": _cmd_bench,
        "memory": _cmd_memory,
        "eval": _cmd_eval,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
