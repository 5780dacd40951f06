"""Metrics and reporting for benchmark runs.

Two success metrics are supported:

* sample mode - Pass@k over n independent runs per task, using the unbiased
  estimator 1 - C(n-c, k)/C(n, k) where c counts runs that passed on their
  first attempt.  Computed in product form so large n never overflows.
* attempt mode - CSR(k), the fraction of runs that passed within their first
  k iterative attempts of one run's repair loop.

``report`` aggregates tallies into a ReportDocument: per-task scores, per
difficulty-tier mean +/- sample std over trials, token/time-to-first-success
averages (NA when any task in a tier is unsolved), and a relative-improvement
row comparing method columns against the best overall average.  Documents
serialize to JSON with full-precision floats so a load/render round-trip is
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

DIFFICULTY_TIERS = ("Easy", "Medium", "Hard")


def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that at least one of k draws (without replacement) from
    n samples containing c correct ones is correct: 1 - C(n-c,k)/C(n,k).

    Evaluated as a running product of (n-c-i)/(n-i) so it is exact for
    boundary cases and stable for n well beyond 10**4.
    """
    if not (0 <= c <= n):
        raise ValueError(f"c must be in [0, n]; got n={n} c={c}")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, n]; got n={n} k={k}")
    if c == 0:
        return 0.0
    if n - c < k:
        # fewer failures than draws: some draw must hit a success
        return 1.0
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


@dataclass(frozen=True)
class TaskTally:
    """Per-task outcome counts for one benchmark trial.

    c counts runs that passed on their first attempt (the sample-mode
    success notion); per_attempt_success is the run x attempt bit matrix
    that attempt-mode metrics (CSR) are computed from.
    """

    task_id: int
    n: int
    c: int
    per_attempt_success: tuple[tuple[int, ...], ...] = ()
    ttfs_samples: tuple[float, ...] = ()
    token_samples: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= self.c <= self.n):
            raise ValueError(f"task {self.task_id}: need 0 <= c <= n, got c={self.c} n={self.n}")
        if self.per_attempt_success and len(self.per_attempt_success) != self.n:
            raise ValueError(f"task {self.task_id}: matrix has {len(self.per_attempt_success)} rows, n={self.n}")

    @property
    def attempts_width(self) -> int:
        return max((len(r) for r in self.per_attempt_success), default=0)


def csr(tally: TaskTally, k: int) -> float:
    """Cumulative success rate: fraction of runs with a success among the
    first k attempts.  Monotone non-decreasing in k."""
    if k < 1 or k > tally.attempts_width:
        raise ValueError(f"k must be in [1, {tally.attempts_width}]; got {k}")
    if not tally.per_attempt_success:
        return 0.0
    hits = sum(1 for row in tally.per_attempt_success if any(row[:k]))
    return hits / len(tally.per_attempt_success)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def _sample_std(xs: Sequence[float]) -> float:
    # sample (n-1) std; a single trial has no spread to report
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return (sum((x - m) ** 2 for x in xs) / (len(xs) - 1)) ** 0.5


def _fmt(x: Optional[float]) -> str:
    return "NA" if x is None else f"{x:.1f}"


@dataclass
class ReportDocument:
    """Aggregated benchmark results; the machine-readable record is the
    `payload` dict, which holds raw tallies plus computed aggregates so a
    renderer can recompute Pass@k for any k without the original runs."""

    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReportDocument":
        return cls(payload=json.loads(text))

    # -- accessors ----------------------------------------------------

    def tallies(self, column: str) -> list[TaskTally]:
        out = []
        for trial in self.payload["columns"][column]["trials"]:
            out.append([
                TaskTally(
                    task_id=t["task_id"], n=t["n"], c=t["c"],
                    per_attempt_success=tuple(tuple(r) for r in t["matrix"]),
                    ttfs_samples=tuple(t["ttfs"]),
                    token_samples=tuple(t["tokens"]),
                )
                for t in trial
            ])
        return out

    def render(self, ks: Sequence[int] = (1, 5)) -> str:
        return render_report(self, ks)


def report(
    columns: Sequence[tuple[str, Sequence[Sequence[TaskTally]]]],
    difficulty_map: dict[int, str],
    mode: str = "samples",
) -> ReportDocument:
    """Build a ReportDocument from one or more method columns.

    Each column is (label, trials) where every trial is a full set of
    TaskTally records.  mode selects the success notion: "samples" scores
    Pass@k from (n, c); "attempts" scores CSR(k) from the attempt matrix.
    """
    if mode not in ("samples", "attempts"):
        raise ValueError(f"unknown mode {mode!r}")
    payload: dict = {"mode": mode, "difficulty": {str(t): d for t, d in difficulty_map.items()}, "columns": {}}
    for label, trials in columns:
        payload["columns"][label] = {
            "trials": [
                [
                    {
                        "task_id": t.task_id,
                        "n": t.n,
                        "c": t.c,
                        "matrix": [list(r) for r in t.per_attempt_success],
                        "ttfs": list(t.ttfs_samples),
                        "tokens": list(t.token_samples),
                    }
                    for t in trial
                ]
                for trial in trials
            ]
        }
    payload["column_order"] = [label for label, _ in columns]
    return ReportDocument(payload=payload)


def _task_score(tally: TaskTally, k: int, mode: str) -> Optional[float]:
    """Per-task score in percent for one trial; None when k exceeds the
    sample count (the estimator is undefined there, rendered NA)."""
    if mode == "attempts":
        kk = min(k, tally.attempts_width)
        return 100.0 * (csr(tally, kk) if kk >= 1 else 0.0)
    if tally.n == 0 or k > tally.n:
        return None
    return 100.0 * pass_at_k(tally.n, tally.c, k)


def _tier_tasks(doc: ReportDocument, tier: str) -> set[int]:
    return {int(t) for t, d in doc.payload["difficulty"].items() if d == tier}


def summarize(doc: ReportDocument, ks: Sequence[int] = (1, 5)) -> dict:
    """Compute the aggregate table: per-task scores, tier and overall
    mean +/- std over trials, TTFS/token means (None = NA), and the
    relative-improvement row against the best overall Pass@k_min column."""
    mode = doc.payload["mode"]
    cols = doc.payload["column_order"]
    out: dict = {"mode": mode, "ks": list(ks), "columns": cols, "per_task": {}, "tiers": {}, "overall": {}, "imp": {}, "ttfs": {}, "tokens": {}}

    for label in cols:
        trials = doc.tallies(label)
        task_ids = sorted({t.task_id for trial in trials for t in trial})
        per_task = {}
        for tid in task_ids:
            per_task[tid] = {}
            for k in ks:
                scores = [s for trial in trials for t in trial
                          if t.task_id == tid and (s := _task_score(t, k, mode)) is not None]
                per_task[tid][k] = _mean(scores) if scores else None
        out["per_task"][label] = per_task

        # trial-level tier scores -> mean +/- sample std
        for tier in DIFFICULTY_TIERS + ("Avg",):
            members = _tier_tasks(doc, tier) if tier != "Avg" else set(task_ids)
            for k in ks:
                samples = []
                for trial in trials:
                    scores = [s for t in trial if t.task_id in members
                              and (s := _task_score(t, k, mode)) is not None]
                    if scores:
                        samples.append(_mean(scores))
                key = (label, tier, k)
                if samples:
                    out["tiers"][key] = (_mean(samples), _sample_std(samples))
            # TTFS / tokens: NA when any member task is unsolved in any trial
            ttfs_vals: Optional[list[float]] = []
            token_vals: Optional[list[float]] = []
            for trial in trials:
                for t in trial:
                    if t.task_id not in members:
                        continue
                    if not t.ttfs_samples:
                        ttfs_vals = None
                        token_vals = None
                    if ttfs_vals is not None:
                        ttfs_vals.extend(t.ttfs_samples)
                        token_vals.extend(float(x) for x in t.token_samples)
            out["ttfs"][(label, tier)] = _mean(ttfs_vals) if ttfs_vals else None
            out["tokens"][(label, tier)] = _mean(token_vals) if token_vals else None
        for k in ks:
            cell = out["tiers"].get((label, "Avg", k))
            out["overall"][(label, k)] = cell[0] if cell else None

    # improvement row: (best - x)/x * 100 per k, against the best overall
    for k in ks:
        vals = {label: v for label in cols if (v := out["overall"][(label, k)]) is not None}
        best = max(vals.values(), default=0.0)
        for label in cols:
            x = vals.get(label)
            out["imp"][(label, k)] = None if x is None else (0.0 if x == 0 else (best - x) / x * 100.0)
    return out


def render_report(doc: ReportDocument, ks: Sequence[int] = (1, 5)) -> str:
    """Deterministic plain-text table; one-decimal percent rendering."""
    s = summarize(doc, ks)
    cols = s["columns"]
    lines = [f"mode: {s['mode']}"]
    header = ["task"] + [f"{label} @{k}" for label in cols for k in ks]
    rows = [header]
    task_ids = sorted({tid for label in cols for tid in s["per_task"][label]})
    for tid in task_ids:
        row = [str(tid)]
        for label in cols:
            for k in ks:
                row.append(_fmt(s["per_task"][label].get(tid, {}).get(k)))
        rows.append(row)
    for tier in DIFFICULTY_TIERS + ("Avg",):
        row = [tier]
        for label in cols:
            for k in ks:
                cell = s["tiers"].get((label, tier, k))
                row.append("NA" if cell is None else f"{cell[0]:.1f} +/- {cell[1]:.1f}")
        rows.append(row)
    row = ["Imp"]
    for label in cols:
        for k in ks:
            row.append(_fmt(s["imp"][(label, k)]))
    rows.append(row)
    row = ["TTFS(s)"]
    for label in cols:
        for k in ks:
            row.append(_fmt(s["ttfs"][(label, "Avg")]))
    rows.append(row)
    row = ["Tokens"]
    for label in cols:
        for k in ks:
            cell = s["tokens"][(label, "Avg")]
            row.append("NA" if cell is None else f"{cell:.1f}")
    rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
