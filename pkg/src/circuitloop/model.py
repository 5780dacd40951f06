"""Core problem types shared by every stage of the loop.

A task is (instruction, task_type, constraints, assertions, difficulty); a
candidate execution yields (program_error, simulator_error, diagnostics,
measurements); the PASS verdict is the conjunction: no program error, no
simulator error, every functional assertion holds.

All values are SI base units (volts, amperes, seconds, hertz, farads, ohms);
suffix expansion happens only in the netlist parser.  Everything here is an
immutable value object, safe to share across concurrent runs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .netlist import Netlist, NetlistError, parse as parse_netlist


class Difficulty(enum.Enum):
    Easy = "Easy"
    Medium = "Medium"
    Hard = "Hard"


def difficulty_for_id(task_id: int) -> Optional[Difficulty]:
    """Benchmark tier partition for the standard id range: 1-8 Easy,
    9-13 Medium, 14-30 Hard.  Ids outside the range are unconstrained."""
    if 1 <= task_id <= 8:
        return Difficulty.Easy
    if 9 <= task_id <= 13:
        return Difficulty.Medium
    if 14 <= task_id <= 30:
        return Difficulty.Hard
    return None


class AssertionKind(enum.Enum):
    GainAtLeast = "GainAtLeast"
    OutputSwitchesAt = "OutputSwitchesAt"
    MonotoneTransfer = "MonotoneTransfer"
    CornerFrequencyNear = "CornerFrequencyNear"
    OscillatesWithPeriodNear = "OscillatesWithPeriodNear"
    DCValueNear = "DCValueNear"
    AttenuationInBand = "AttenuationInBand"


REQUIRED_PARAMS: dict[AssertionKind, frozenset[str]] = {
    AssertionKind.GainAtLeast: frozenset({"min_gain"}),
    AssertionKind.OutputSwitchesAt: frozenset({"input_value"}),
    AssertionKind.MonotoneTransfer: frozenset({"direction"}),
    AssertionKind.CornerFrequencyNear: frozenset({"target_hz"}),
    AssertionKind.OscillatesWithPeriodNear: frozenset({"period_s"}),
    AssertionKind.DCValueNear: frozenset({"target_v"}),
    AssertionKind.AttenuationInBand: frozenset({"f_lo_hz", "f_hi_hz", "min_db"}),
}

MISSING_MEASUREMENT = "missing-measurement"


class UnsupportedKindError(Exception):
    pass


@dataclass(frozen=True)
class FunctionalAssertion:
    kind: AssertionKind
    target_signal: str
    parameters: tuple[tuple[str, float], ...]
    tolerance: float

    def __post_init__(self) -> None:
        if not (0.0 < self.tolerance < 1.0):
            raise ValueError(f"tolerance must be in (0, 1), got {self.tolerance}")
        have = {k for k, _ in self.parameters}
        missing = REQUIRED_PARAMS[self.kind] - have
        if missing:
            raise ValueError(f"{self.kind.value} assertion missing params: {sorted(missing)}")

    def param(self, name: str) -> float:
        for k, v in self.parameters:
            if k == name:
                return v
        raise KeyError(name)


@dataclass(frozen=True)
class ConstraintSet:
    """Hard interface constraints; every field maps to a registered checker
    rule so violations are machine-detectable."""

    required_node_names: tuple[str, ...] = ()
    required_subcircuit_pins: tuple[tuple[str, tuple[str, ...]], ...] = ()
    simulator_settings: tuple[str, ...] = ()      # analysis kinds that must appear
    naming_rules: tuple[str, ...] = ()            # extra checker rule ids to enforce

    def subcircuit_pins(self, name: str) -> Optional[tuple[str, ...]]:
        for n, pins in self.required_subcircuit_pins:
            if n == name:
                return pins
        return None


@dataclass(frozen=True)
class TaskInstance:
    task_id: int
    task_type: str
    instruction: str
    constraints: ConstraintSet
    assertions: tuple[FunctionalAssertion, ...]
    difficulty: Difficulty

    def __post_init__(self) -> None:
        if not self.task_type.strip():
            raise ValueError("task_type must be non-empty")
        if not self.assertions:
            raise ValueError("a task needs at least one assertion")
        expected = difficulty_for_id(self.task_id)
        if expected is not None and expected != self.difficulty:
            raise ValueError(
                f"task {self.task_id} sits in the {expected.value} tier, "
                f"got {self.difficulty.value}")


# ----------------------------------------------------------------------
# measurement containers (the concrete shape of z)
# ----------------------------------------------------------------------

def _check_increasing(grid: Sequence[float], what: str) -> None:
    for a, b in zip(grid, grid[1:]):
        if not b > a:
            raise ValueError(f"{what} grid must be strictly increasing")


@dataclass(frozen=True)
class OperatingPoint:
    node_voltages: tuple[tuple[str, float], ...]
    device_currents: tuple[tuple[str, float], ...]
    regions: tuple[tuple[str, str], ...] = ()

    def voltage(self, node: str) -> Optional[float]:
        for n, v in self.node_voltages:
            if n == node:
                return v
        return None


@dataclass(frozen=True)
class SweepCurve:
    grid: tuple[float, ...]
    signals: tuple[tuple[str, tuple[float, ...]], ...]
    holes: tuple[int, ...] = ()                   # grid indices with no solution

    def __post_init__(self) -> None:
        _check_increasing(self.grid, "sweep")

    def signal(self, name: str) -> Optional[tuple[float, ...]]:
        for n, vals in self.signals:
            if n == name:
                return vals
        return None


@dataclass(frozen=True)
class TimeSeries:
    times: tuple[float, ...]
    signals: tuple[tuple[str, tuple[float, ...]], ...]

    def __post_init__(self) -> None:
        _check_increasing(self.times, "time")

    def signal(self, name: str) -> Optional[tuple[float, ...]]:
        for n, vals in self.signals:
            if n == name:
                return vals
        return None


@dataclass(frozen=True)
class FrequencyResponse:
    freqs: tuple[float, ...]
    magnitude_db: tuple[tuple[str, tuple[float, ...]], ...]
    phase_deg: tuple[tuple[str, tuple[float, ...]], ...]

    def __post_init__(self) -> None:
        _check_increasing(self.freqs, "frequency")

    def mag(self, name: str) -> Optional[tuple[float, ...]]:
        for n, vals in self.magnitude_db:
            if n == name:
                return vals
        return None


@dataclass(frozen=True)
class ResultBundle:
    operating_point: Optional[OperatingPoint] = None
    sweeps: tuple[tuple[str, SweepCurve], ...] = ()
    transients: tuple[tuple[str, TimeSeries], ...] = ()
    ac_responses: tuple[tuple[str, FrequencyResponse], ...] = ()

    def is_empty(self) -> bool:
        return (self.operating_point is None and not self.sweeps
                and not self.transients and not self.ac_responses)


# ----------------------------------------------------------------------
# diagnostics and execution outcomes
# ----------------------------------------------------------------------

class Stage(enum.Enum):
    Requirement = "Requirement"
    DCFeasibility = "DCFeasibility"
    DCSweep = "DCSweep"
    Functional = "Functional"
    Waveform = "Waveform"
    Runtime = "Runtime"


@dataclass(frozen=True)
class Diagnostic:
    stage: Stage
    signature: str            # stable normalized key; volatile values stripped
    evidence: str             # verbatim excerpt from logs or checker output
    suggested_fix: Optional[str] = None

    def to_line(self) -> str:
        fix = self.suggested_fix or "-"
        return f"{self.stage.value}\t{self.signature}\t{self.evidence}\t{fix}"


@dataclass(frozen=True)
class ExecutionOutcome:
    program_error: bool
    simulator_error: bool
    diagnostic_log: tuple[Diagnostic, ...]
    measurements: ResultBundle
    wall_time: float = 0.0
    token_cost: int = 0

    def __post_init__(self) -> None:
        if self.program_error and not self.measurements.is_empty():
            raise ValueError("a program error leaves no measurements")


@dataclass(frozen=True)
class DesignCandidate:
    """A generated script: raw text plus its parse (or the parse failure)."""

    source_text: str
    netlist: Optional[Netlist]
    parse_error: Optional[str]
    parse_error_kind: Optional[str]
    iteration: int = 1
    prompt_hash: str = ""
    bias_note: str = ""

    @classmethod
    def from_source(cls, text: str, iteration: int = 1, prompt_hash: str = "") -> "DesignCandidate":
        try:
            net = parse_netlist(text)
            return cls(text, net, None, None, iteration, prompt_hash)
        except NetlistError as exc:
            return cls(text, None, str(exc), type(exc).__name__, iteration, prompt_hash)


# ----------------------------------------------------------------------
# assertion evaluation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class AssertionResult:
    assertion: FunctionalAssertion
    holds: bool
    observed: float           # NaN when nothing could be measured
    reason: str


@dataclass(frozen=True)
class Verdict:
    passed: bool
    failed_assertions: tuple[AssertionResult, ...]

    def to_text(self) -> str:
        # stable field order for workspace logs
        lines = [f"pass: {str(self.passed).lower()}"]
        for r in self.failed_assertions:
            obs = "nan" if math.isnan(r.observed) else format(r.observed, ".6g")
            lines.append(f"failed: {r.assertion.kind.value} {r.assertion.target_signal} "
                         f"observed={obs} reason={r.reason}")
        return "\n".join(lines) + "\n"


def _missing(a: FunctionalAssertion, what: str) -> AssertionResult:
    return AssertionResult(a, False, float("nan"), f"{MISSING_MEASUREMENT}: {what}")


def _first_with_signal(collections, signal):
    for name, coll in collections:
        if coll.signal(signal) is not None:
            return coll
    return None


def _finite_pairs(xs, ys):
    return [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]


def _eval_gain(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    curve = _first_with_signal(z.sweeps, a.target_signal)
    if curve is None:
        return _missing(a, f"no sweep carries {a.target_signal!r}")
    pts = _finite_pairs(curve.grid, curve.signal(a.target_signal))
    if len(pts) < 2:
        return _missing(a, "sweep has fewer than two solved points")
    slope = max(abs((y2 - y1) / (x2 - x1)) for (x1, y1), (x2, y2) in zip(pts, pts[1:]))
    target = a.param("min_gain")
    holds = slope >= target * (1.0 - a.tolerance)
    return AssertionResult(a, holds, slope,
                           "ok" if holds else f"max slope {slope:.4g} below {target:.4g}")


def _eval_switches(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    curve = _first_with_signal(z.sweeps, a.target_signal)
    if curve is None:
        return _missing(a, f"no sweep carries {a.target_signal!r}")
    pts = _finite_pairs(curve.grid, curve.signal(a.target_signal))
    if len(pts) < 2:
        return _missing(a, "sweep has fewer than two solved points")
    ys = [y for _, y in pts]
    mid = (max(ys) + min(ys)) / 2.0
    crossing = None
    for (x1, y1), (x2, y2) in zip(pts, pts[1:]):
        if (y1 - mid) * (y2 - mid) <= 0 and y1 != y2:
            crossing = x1 + (mid - y1) * (x2 - x1) / (y2 - y1)
            break
    if crossing is None or max(ys) == min(ys):
        return AssertionResult(a, False, float("nan"), "no output transition")
    target = a.param("input_value")
    scale = max(abs(target), 1e-12)
    holds = abs(crossing - target) <= a.tolerance * scale
    return AssertionResult(a, holds, crossing,
                           "ok" if holds else f"switches at {crossing:.4g}, wanted {target:.4g}")


def _eval_monotone(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    curve = _first_with_signal(z.sweeps, a.target_signal)
    if curve is None:
        return _missing(a, f"no sweep carries {a.target_signal!r}")
    pts = _finite_pairs(curve.grid, curve.signal(a.target_signal))
    if len(pts) < 2:
        return _missing(a, "sweep has fewer than two solved points")
    direction = 1.0 if a.param("direction") >= 0 else -1.0
    ys = [y for _, y in pts]
    swing = max(ys) - min(ys)
    backslide = sum(max(0.0, -direction * (y2 - y1)) for y1, y2 in zip(ys, ys[1:]))
    holds = backslide <= a.tolerance * max(swing, 1e-12)
    return AssertionResult(a, holds, backslide,
                           "ok" if holds else f"non-monotone excursion {backslide:.4g}")


def _eval_corner(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    resp = None
    for _, r in z.ac_responses:
        if r.mag(a.target_signal) is not None:
            resp = r
            break
    if resp is None:
        return _missing(a, f"no ac response carries {a.target_signal!r}")
    mags = resp.mag(a.target_signal)
    ref = max(mags)
    level = ref - 20.0 * math.log10(math.sqrt(2.0))
    peak_at = mags.index(ref)
    # scan away from the passband peak for the half-power crossing
    idx = range(peak_at, len(mags) - 1) if peak_at < len(mags) / 2 else range(peak_at, 0, -1)
    crossing = None
    for i in idx:
        j = i + 1 if peak_at < len(mags) / 2 else i - 1
        m1, m2 = mags[i], mags[j]
        if (m1 - level) * (m2 - level) <= 0 and m1 != m2:
            f1, f2 = resp.freqs[i], resp.freqs[j]
            t = (level - m1) / (m2 - m1)
            crossing = 10 ** (math.log10(f1) + t * (math.log10(f2) - math.log10(f1)))
            break
    if crossing is None:
        return AssertionResult(a, False, float("nan"), "no half-power crossing in analyzed band")
    target = a.param("target_hz")
    holds = abs(crossing - target) <= a.tolerance * target
    return AssertionResult(a, holds, crossing,
                           "ok" if holds else f"corner {crossing:.4g} Hz, wanted {target:.4g} Hz")


def _eval_oscillates(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    series = _first_with_signal(z.transients, a.target_signal)
    if series is None:
        return _missing(a, f"no transient carries {a.target_signal!r}")
    vals = series.signal(a.target_signal)
    # skip the startup tail before judging periodicity
    start = len(vals) // 10
    ts, ys = series.times[start:], vals[start:]
    lo, hi = min(ys), max(ys)
    mid = (lo + hi) / 2.0
    rising = []
    for i in range(1, len(ys)):
        if ys[i - 1] < mid <= ys[i]:
            t = ts[i - 1] + (mid - ys[i - 1]) * (ts[i] - ts[i - 1]) / (ys[i] - ys[i - 1])
            rising.append(t)
    if len(rising) < 3:
        return AssertionResult(a, False, float("nan"), "zero crossings below threshold")
    periods = [t2 - t1 for t1, t2 in zip(rising, rising[1:])]
    period = sum(periods) / len(periods)
    target = a.param("period_s")
    holds = abs(period - target) <= a.tolerance * target
    return AssertionResult(a, holds, period,
                           "ok" if holds else f"period {period:.4g} s, wanted {target:.4g} s")


def _eval_dc_value(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    if z.operating_point is None:
        return _missing(a, "no operating point")
    v = z.operating_point.voltage(a.target_signal)
    if v is None:
        return _missing(a, f"node {a.target_signal!r} absent from operating point")
    target = a.param("target_v")
    scale = max(abs(target), 1e-12)
    holds = abs(v - target) <= a.tolerance * scale
    return AssertionResult(a, holds, v,
                           "ok" if holds else f"dc value {v:.6g} V, wanted {target:.6g} V")


def _eval_attenuation(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    resp = None
    for _, r in z.ac_responses:
        if r.mag(a.target_signal) is not None:
            resp = r
            break
    if resp is None:
        return _missing(a, f"no ac response carries {a.target_signal!r}")
    mags = resp.mag(a.target_signal)
    ref = max(mags)
    f_lo, f_hi = a.param("f_lo_hz"), a.param("f_hi_hz")
    in_band = [ref - m for f, m in zip(resp.freqs, mags) if f_lo <= f <= f_hi]
    if not in_band:
        return _missing(a, "analyzed grid has no points inside the band")
    worst = min(in_band)
    target = a.param("min_db")
    holds = worst >= target * (1.0 - a.tolerance)
    return AssertionResult(a, holds, worst,
                           "ok" if holds else f"attenuation {worst:.4g} dB below {target:.4g} dB")


_EVALUATORS = {
    AssertionKind.GainAtLeast: _eval_gain,
    AssertionKind.OutputSwitchesAt: _eval_switches,
    AssertionKind.MonotoneTransfer: _eval_monotone,
    AssertionKind.CornerFrequencyNear: _eval_corner,
    AssertionKind.OscillatesWithPeriodNear: _eval_oscillates,
    AssertionKind.DCValueNear: _eval_dc_value,
    AssertionKind.AttenuationInBand: _eval_attenuation,
}


def evaluate_assertion(a: FunctionalAssertion, z: ResultBundle) -> AssertionResult:
    """Deterministically judge one assertion against measured results.

    Missing data is a failing result with a distinguishable reason prefix,
    never an exception; only a kind outside the enum raises."""
    fn = _EVALUATORS.get(a.kind)
    if fn is None:
        raise UnsupportedKindError(str(a.kind))
    return fn(a, z)


def pass_verdict(task: TaskInstance, outcome: ExecutionOutcome) -> Verdict:
    """The PASS conjunction: no program error, no simulator error, and every
    assertion holds.  All failing assertions are reported, not just the
    first, so diagnosis sees the complete failure set."""
    results = [evaluate_assertion(a, outcome.measurements) for a in task.assertions]
    failed = tuple(r for r in results if not r.holds)
    passed = (not outcome.program_error and not outcome.simulator_error and not failed)
    return Verdict(passed=passed, failed_assertions=failed)
