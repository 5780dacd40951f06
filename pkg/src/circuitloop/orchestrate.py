"""The refinement loop: generate, execute, diagnose, remember, repeat.

run_task drives one task against a budget of K generate calls.  Each
iteration retrieves playbook rules, composes the prompt, generates a
candidate, runs the verification pipeline, and - on failure - diagnoses,
optionally evaluates the bias-repaired sibling, distills rules, and
commits admitted ones to the store before the next iteration retrieves
(the closed-loop coupling: iteration t+1 always sees the store version
produced after iteration t).

Workspaces are write-once: re-running a deterministic loop may rewrite a
file with identical bytes, but changing history is an error.  Timestamps
and TTFS come from an injectable clock; scripted backends default to a
logical tick counter so two identical runs produce identical artifacts,
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import agents, memory, verify
from .evalkit import TaskTally
from .model import (DesignCandidate, Diagnostic, ExecutionOutcome,
                    ResultBundle, Stage, TaskInstance, pass_verdict)
from .tune import (SearchSpace, default_variables, history_table,
                   loss_from_assertion, optimize, patch_assignment)
from .sim import write_table


class WorkspaceCollision(Exception):
    pass


class LogicalClock:
    """Deterministic tick counter standing in for wall time."""

    def __init__(self) -> None:
        self.ticks = 0

    def now(self) -> float:
        self.ticks += 1
        return float(self.ticks)


class SystemClock:
    def now(self) -> float:
        return time.time()


def clock_for(backend) -> object:
    if isinstance(backend, agents.ScriptedBackend):
        return LogicalClock()
    return SystemClock()


@dataclass
class RunConfig:
    K: int = 30
    enable_bias_repair: bool = True
    enable_tuning: bool = False
    tune_budget: int = 30
    feedback_cap: int = agents.FEEDBACK_CAP


@dataclass
class RunState:
    task: TaskInstance
    attempts: int = 0
    observations: list[ExecutionOutcome] = field(default_factory=list)
    per_attempt_success: list[bool] = field(default_factory=list)
    subgoal: str = ""
    success: bool = False
    first_success_at: Optional[int] = None
    ttfs: Optional[float] = None
    cumulative_tokens: int = 0


class Workspace:
    """Write-once artifact directory for one run of one task."""

    def __init__(self, root) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        path = self.root / name
        if path.exists():
            if path.read_text() == text:
                return path          # identical rewrite is a no-op
            raise WorkspaceCollision(f"{path} already holds different content")
        path.write_text(text)
        return path


def next_subgoal(task: TaskInstance, observations: Sequence[ExecutionOutcome]) -> str:
    """Rule-based sub-goal: first attempt aims at the full contract; later
    attempts name the distinct signatures of the latest failing outcome."""
    for outcome in reversed(observations):
        if outcome.diagnostic_log:
            seen: list[str] = []
            for d in outcome.diagnostic_log:
                if d.signature not in seen:
                    seen.append(d.signature)
            return "resolve: " + ", ".join(seen)
        break
    return "produce a candidate satisfying every required constraint and functional target"


def _ensure_store(path: Path) -> memory.MemoryState:
    if path.exists():
        return memory.load(path)
    state = memory.empty_state()
    path.parent.mkdir(parents=True, exist_ok=True)
    memory.persist(state, path)
    return state


def _write_measurements(ws: Workspace, iteration: int, z: ResultBundle) -> None:
    if z.sweeps:
        src, curve = z.sweeps[0]
        path = ws.root / f"sweep_{iteration}.tsv"
        if not path.exists():
            write_table(path, src, curve.grid, curve.signals)
    if z.transients:
        _, ts = z.transients[0]
        path = ws.root / f"tran_{iteration}.tsv"
        if not path.exists():
            write_table(path, "time", ts.times, ts.signals)
    if z.ac_responses:
        _, fr = z.ac_responses[0]
        path = ws.root / f"ac_{iteration}.tsv"
        if not path.exists():
            write_table(path, "hz", fr.freqs, fr.magnitude_db)


def _backend_failure_outcome(exc: Exception) -> ExecutionOutcome:
    kind = type(exc).__name__
    diag = Diagnostic(Stage.Runtime, f"backend-{kind.lower()}", str(exc))
    return ExecutionOutcome(True, False, (diag,), ResultBundle())


def _tune_pass(task: TaskInstance, cand: DesignCandidate, ws: Workspace,
               config: RunConfig) -> None:
    """Refine a passing candidate's parameters against its first tunable
    assertion; purely additive - the accepted candidate already passed."""
    target = None
    for a in task.assertions:
        try:
            loss_from_assertion(a, 0.0)
            target = a
            break
        except ValueError:
            continue
    if target is None or cand.netlist is None:
        return
    variables = default_variables(cand.netlist)
    if not variables:
        return

    def evaluate(assignment: dict[str, float]) -> Optional[float]:
        patched = patch_assignment(cand.netlist, assignment)
        trial_cand = DesignCandidate(
            source_text="", netlist=patched, parse_error=None,
            parse_error_kind=None, iteration=cand.iteration)
        outcome = verify.run_pipeline(task, trial_cand)
        if outcome.program_error or outcome.simulator_error:
            return None
        from .model import evaluate_assertion
        r = evaluate_assertion(target, outcome.measurements)
        if r.observed != r.observed:
            return None
        return loss_from_assertion(target, r.observed)

    space = SearchSpace(variables=variables, budget=config.tune_budget,
                        seed=task.task_id)
    _, history = optimize(space, evaluate)
    ws.write("tune_history.tsv", history_table(history))


def run_task(task: TaskInstance, backend, store_path, config: RunConfig,
             workspace_root, clock=None,
             signature_history: Optional[dict[str, int]] = None) -> RunState:
    """One budgeted refinement run; every iteration leaves its artifacts."""
    clock = clock if clock is not None else clock_for(backend)
    store_path = Path(store_path)
    ws = Workspace(workspace_root)
    mem = _ensure_store(store_path)
    state = RunState(task=task)
    started = clock.now()
    run_diags: list[tuple[int, Diagnostic]] = []
    last_feedback: list[Diagnostic] = []

    for iteration in range(1, config.K + 1):
        state.subgoal = next_subgoal(task, state.observations)
        retrieved = memory.retrieve(mem, task.task_type)
        ws.write(f"retrieved_{iteration}.txt", "".join(
            f"{e.entry_id}\t{e.scope}\t{e.rule}\n" for e in retrieved) or "(none)\n")
        prompt = agents.compose_prompt(
            task, retrieved, last_feedback, iteration,
            subgoal=state.subgoal, feedback_cap=config.feedback_cap)
        ws.write(f"prompt_{iteration}.txt", prompt.text())

        try:
            result = backend.generate(prompt)
        except (agents.BackendTimeout, agents.BackendRefusal,
                agents.QuotaExhausted) as exc:
            outcome = _backend_failure_outcome(exc)
            ws.write(f"candidate_{iteration}.cir", f"* backend failure: {exc}\n")
            ws.write(f"feedback_{iteration}.log",
                     "".join(d.to_line() + "\n" for d in outcome.diagnostic_log))
            state.observations.append(outcome)
            state.per_attempt_success.append(False)
            state.attempts = iteration
            run_diags.extend((iteration, d) for d in outcome.diagnostic_log)
            last_feedback = list(outcome.diagnostic_log)
            continue

        source = agents.extract_netlist(result.source_text)
        state.cumulative_tokens += result.token_cost
        ws.write(f"candidate_{iteration}.cir", source)
        cand = DesignCandidate.from_source(
            source, iteration=iteration,
            prompt_hash=hashlib.sha256(prompt.text().encode()).hexdigest()[:12])
        outcome = verify.run_pipeline(task, cand)
        verdict = pass_verdict(task, outcome)
        chosen_cand = cand

        if (not verdict.passed and config.enable_bias_repair
                and task.task_type in verify.BIAS_FAMILIES
                and cand.netlist is not None
                and not outcome.program_error):
            try:
                sibling, point = verify.bias_repair(task, cand)
                sib_outcome = verify.run_pipeline(task, sibling)
                sib_verdict = pass_verdict(task, sib_outcome)
                if sib_verdict.passed:
                    ws.write(f"candidate_{iteration}.bias.cir", sibling.source_text)
                    ws.write(f"bias_{iteration}.txt",
                             f"{point.source_id}\t{point.value!r}\t{point.rationale.value}\n")
                    outcome, verdict, chosen_cand = sib_outcome, sib_verdict, sibling
            except (verify.NoBiasSource, verify.SweepFailed):
                pass

        state.observations.append(outcome)
        state.attempts = iteration
        state.per_attempt_success.append(verdict.passed)
        _write_measurements(ws, iteration, outcome.measurements)

        if verdict.passed:
            ws.write(f"feedback_{iteration}.log", "pass\n")
            state.success = True
            state.first_success_at = iteration
            state.ttfs = clock.now() - started
            if config.enable_tuning:
                _tune_pass(task, chosen_cand, ws, config)
            break

        enriched = verify.diagnose(outcome)
        ws.write(f"feedback_{iteration}.log",
                 "".join(d.to_line() + "\n" for d in enriched) or "fail\n")
        run_diags.extend((iteration, d) for d in enriched)
        last_feedback = enriched

        bundle = memory.FeedbackBundle(
            task=task, candidate=cand, program_error=outcome.program_error,
            simulator_error=outcome.simulator_error,
            diagnostics=tuple(run_diags), measurements=outcome.measurements,
            passed=False)
        delta = agents.curate(backend, bundle, signature_history, now=clock.now())
        if delta:
            with memory.write_lock(store_path):
                mem = memory.load(store_path)
                updated = memory.update(mem, delta)
                if updated is not mem:
                    memory.persist(updated, store_path)
                mem = updated
        ws.write(f"curation_{iteration}.txt", "".join(
            f"{e.entry_id}\t{e.scope}\t{e.admission_basis.value}\t{e.rule}\n"
            for e in delta) or "(no entries admitted)\n")

    return state


# ----------------------------------------------------------------------
# benchmark driver
# ----------------------------------------------------------------------

@dataclass
class BenchConfig:
    n_samples: int = 30
    run: RunConfig = field(default_factory=RunConfig)
    isolated_memory: bool = False


def _state_record(state: RunState) -> dict:
    return {
        "success": state.success,
        "attempts": state.attempts,
        "first_success_at": state.first_success_at,
        "ttfs": state.ttfs,
        "tokens": state.cumulative_tokens,
        "per_attempt": [bool(b) for b in state.per_attempt_success],
    }


def run_benchmark(tasks: Sequence[TaskInstance], backend, store_path,
                  workspace_root, config: BenchConfig,
                  clock_factory=None) -> tuple[list[TaskTally], dict]:
    """n independent runs per task, resumable through state.json.

    With shared memory (default) every run reads and writes one store, so
    later runs benefit from earlier distillations - that coupling is the
    behavior under measurement.  --isolated-memory gives each run a fresh
    store file inside its own workspace instead.
    """
    root = Path(workspace_root)
    root.mkdir(parents=True, exist_ok=True)
    state_file = root / "state.json"
    completed: dict[str, dict] = {}
    if state_file.exists():
        completed = json.loads(state_file.read_text())
    signature_history: dict[str, int] = {}

    for task in tasks:
        for r in range(1, config.n_samples + 1):
            key = f"task{task.task_id}-run{r}"
            if key in completed:
                continue
            run_root = root / f"task{task.task_id:02d}" / f"run{r:02d}"
            if config.isolated_memory:
                # the ablation severs every cross-run channel: store and
                # failure history both start empty for each run
                run_store = run_root / "store.playbook"
                history: dict[str, int] = {}
            else:
                run_store = Path(store_path)
                history = dict(signature_history)
            clock = clock_factory() if clock_factory else clock_for(backend)
            state = run_task(task, backend, run_store, config.run, run_root,
                             clock=clock, signature_history=history)
            if not config.isolated_memory:
                for _, diag in _iter_run_failures(state):
                    signature_history[diag.signature] = signature_history.get(diag.signature, 0) + 1
            completed[key] = _state_record(state)
            tmp = state_file.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(completed, indent=1, sort_keys=True))
            tmp.replace(state_file)

    tallies = []
    for task in tasks:
        records = [completed[f"task{task.task_id}-run{r}"]
                   for r in range(1, config.n_samples + 1)]
        per_attempt = tuple(tuple(rec["per_attempt"]) for rec in records)
        c = sum(1 for rec in records if rec["per_attempt"][:1] == [True])
        ttfs = tuple(rec["ttfs"] for rec in records if rec["ttfs"] is not None)
        tokens = tuple(rec["tokens"] for rec in records if rec["success"])
        tallies.append(TaskTally(
            task_id=task.task_id, n=config.n_samples, c=c,
            per_attempt_success=per_attempt, ttfs_samples=ttfs,
            token_samples=tokens))
    return tallies, completed


def _iter_run_failures(state: RunState):
    for i, outcome in enumerate(state.observations, start=1):
        for d in outcome.diagnostic_log:
            yield i, d
