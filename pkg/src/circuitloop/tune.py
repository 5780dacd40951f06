"""Parameter refinement by Tree-structured Parzen Estimator search.

Runs after a candidate is feasible: pick tunable variables (component
values, MOSFET widths), then iteratively propose assignments.  The first
n_startup trials sample uniformly inside the box; afterwards the history
splits at the gamma-quantile of loss into good/bad sets, each variable
gets a univariate Gaussian KDE per set (Silverman bandwidth, floored at
1% of the range), and the proposal is the candidate - of n_candidates
drawn from the good density - that maximizes g(x)/b(x).

Log-scaled variables transform to log10 space for sampling and density
work, so "uniform" startup means uniform per decade.  Failed evaluations
never raise out of optimize; they score a penalty of 10x the worst
feasible loss seen so far (1e6 before any trial succeeds).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .model import AssertionKind, FunctionalAssertion
from .netlist import Netlist, ParamPatch, apply_patch

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
BANDWIDTH_FLOOR_FRACTION = 0.01
INITIAL_PENALTY = 1e6
PENALTY_FACTOR = 10.0


class EmptySpace(Exception):
    pass


class Scale(enum.Enum):
    Linear = "Linear"
    Log = "Log"


@dataclass(frozen=True)
class Variable:
    device_id: str
    param: str
    lower: float
    upper: float
    scale: Scale = Scale.Linear

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError(f"variable {self.key}: lower must be < upper")
        if self.scale is Scale.Log and self.lower <= 0:
            raise ValueError(f"variable {self.key}: log scale needs lower > 0")

    @property
    def key(self) -> str:
        return f"{self.device_id}.{self.param}"

    def to_internal(self, value: float) -> float:
        return math.log10(value) if self.scale is Scale.Log else value

    def from_internal(self, x: float) -> float:
        return 10.0 ** x if self.scale is Scale.Log else x

    @property
    def bounds_internal(self) -> tuple[float, float]:
        return self.to_internal(self.lower), self.to_internal(self.upper)


@dataclass(frozen=True)
class SearchSpace:
    variables: tuple[Variable, ...]
    budget: int
    seed: int = 0
    gamma: float = GAMMA
    n_startup: int = N_STARTUP
    n_candidates: int = N_CANDIDATES


@dataclass(frozen=True)
class Trial:
    index: int
    assignment: tuple[tuple[str, float], ...]
    loss: float
    note: str = ""

    def value(self, key: str) -> float:
        return dict(self.assignment)[key]


def _kde_logpdf(x: float, centers: np.ndarray, bandwidth: float) -> float:
    z = (x - centers) / bandwidth
    # mean of normal pdfs, in log space for stability
    log_terms = -0.5 * z * z - math.log(bandwidth * math.sqrt(2 * math.pi))
    m = float(np.max(log_terms))
    return m + math.log(float(np.mean(np.exp(log_terms - m))))


def _bandwidth(samples: np.ndarray, span: float) -> float:
    """Silverman's rule of thumb, 0.9 * min(sigma, IQR/1.34) * n^(-1/5).

    The min() term matters: a tight cluster inside a wide spread must get
    a tight bandwidth, or dense regions of the bad set smear flat and stop
    repelling proposals."""
    floor = BANDWIDTH_FLOOR_FRACTION * span
    if samples.size < 2:
        return max(floor, 1e-12)
    sigma = float(np.std(samples, ddof=1))
    q1, q3 = np.percentile(samples, [25.0, 75.0])
    spread = min(sigma, float(q3 - q1) / 1.34) or sigma
    silverman = 0.9 * spread * samples.size ** (-0.2)
    return max(silverman, floor, 1e-12)


def suggest(history: Sequence[Trial], space: SearchSpace,
            rng: np.random.Generator) -> dict[str, float]:
    """Propose the next assignment; uniform during startup, TPE after."""
    if not space.variables:
        raise EmptySpace("search space has no variables")
    if len(history) < space.n_startup:
        out = {}
        for v in space.variables:
            lo, hi = v.bounds_internal
            out[v.key] = v.from_internal(float(rng.uniform(lo, hi)))
        return out

    ranked = sorted(history, key=lambda t: (t.loss, t.index))
    n_good = max(1, math.ceil(space.gamma * len(history)))
    good, bad = ranked[:n_good], ranked[n_good:]
    if not bad:
        bad = ranked        # degenerate split; densities coincide

    per_var = []
    for v in space.variables:
        lo, hi = v.bounds_internal
        g = np.array([v.to_internal(t.value(v.key)) for t in good])
        b = np.array([v.to_internal(t.value(v.key)) for t in bad])
        per_var.append((v, lo, hi, g, _bandwidth(g, hi - lo),
                        b, _bandwidth(b, hi - lo)))

    best_score, best = -math.inf, None
    for _ in range(space.n_candidates):
        xs = []
        score = 0.0
        for v, lo, hi, g, g_bw, b, b_bw in per_var:
            center = float(rng.choice(g))
            x = float(np.clip(center + rng.normal(0.0, g_bw), lo, hi))
            score += _kde_logpdf(x, g, g_bw) - _kde_logpdf(x, b, b_bw)
            xs.append((v, x))
        if score > best_score:
            best_score = score
            best = xs
    return {v.key: v.from_internal(x) for v, x in best}


def loss_from_assertion(a: FunctionalAssertion, observed: float) -> float:
    """Scalarize one assertion: Near kinds are relative distance to the
    target, AtLeast kinds are a relative hinge below the target."""
    near = {
        AssertionKind.OutputSwitchesAt: "input_value",
        AssertionKind.CornerFrequencyNear: "target_hz",
        AssertionKind.OscillatesWithPeriodNear: "period_s",
        AssertionKind.DCValueNear: "target_v",
    }
    at_least = {
        AssertionKind.GainAtLeast: "min_gain",
        AssertionKind.AttenuationInBand: "min_db",
    }
    if a.kind in near:
        target = a.param(near[a.kind])
        return abs(observed - target) / abs(target)
    if a.kind in at_least:
        target = a.param(at_least[a.kind])
        return max(0.0, target - observed) / abs(target)
    raise ValueError(f"{a.kind.value} has no scalar tuning loss")


def default_variables(net: Netlist, span: float = 10.0,
                      exclude: frozenset[str] = frozenset()) -> tuple[Variable, ...]:
    """Rule-based variable extraction: every R and C value plus every
    MOSFET width, each searched over value/span..value*span in log space."""
    out = []
    for d in net.devices:
        if d.id in exclude:
            continue
        if d.kind in ("R", "C"):
            v = d.param("value")
            out.append(Variable(d.id, "value", v / span, v * span, Scale.Log))
        elif d.kind == "MOSFET":
            w = d.param("w") or 1e-6
            out.append(Variable(d.id, "w", w / span, w * span, Scale.Log))
    return tuple(out)


def patch_assignment(net: Netlist, assignment: dict[str, float]) -> Netlist:
    for key, value in assignment.items():
        device_id, _, param = key.rpartition(".")
        net = apply_patch(net, ParamPatch(device_id, param, value))
    return net


def optimize(space: SearchSpace,
             evaluate: Callable[[dict[str, float]], Optional[float]],
             rng: Optional[np.random.Generator] = None) -> tuple[Trial, list[Trial]]:
    """Run exactly space.budget evaluations; return (best, full history).

    evaluate returns the scalar loss, or None for a failed simulation;
    failures are folded in as penalty trials so the loop never stops
    early.  If even the best trial is a penalty it is flagged NotImproved.
    """
    if space.budget < 1:
        raise ValueError("budget must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(space.seed)
    history: list[Trial] = []
    worst_feasible: Optional[float] = None
    for index in range(space.budget):
        assignment = suggest(history, space, rng)
        loss = evaluate(assignment)
        if loss is None or not math.isfinite(loss):
            penalty = (INITIAL_PENALTY if worst_feasible is None
                       else PENALTY_FACTOR * worst_feasible)
            trial = Trial(index, tuple(sorted(assignment.items())), penalty, "penalty")
        else:
            trial = Trial(index, tuple(sorted(assignment.items())), float(loss))
            worst_feasible = (loss if worst_feasible is None
                              else max(worst_feasible, loss))
        history.append(trial)
    best = min(history, key=lambda t: (t.loss, t.index))
    if best.note == "penalty":
        best = replace(best, note="NotImproved")
    return best, history


def history_table(history: Sequence[Trial]) -> str:
    """Tabular text for the workspace: index, loss, note, then variables."""
    if not history:
        return "index\tloss\tnote\n"
    keys = [k for k, _ in history[0].assignment]
    lines = ["\t".join(["index", "loss", "note", *keys])]
    for t in history:
        vals = dict(t.assignment)
        lines.append("\t".join([
            str(t.index), f"{t.loss:.12g}", t.note or "-",
            *(f"{vals[k]:.12g}" for k in keys)]))
    return "\n".join(lines) + "\n"
