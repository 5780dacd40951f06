"""Staged candidate evaluation, failure diagnosis, and DC bias repair.

run_pipeline is the evaluation half of the loop: structure rules first
(violations are program errors, nothing gets simulated), then the DC
operating point (non-convergence stops everything downstream), then the
analyses the candidate declares, the task's functional assertions, and a
waveform sanity screen.  Every failure becomes one Diagnostic whose
signature is built only from identifiers and rule names - never measured
values - so the same failure mode maps to the same signature across runs
and across parameter tweaks.

bias_repair implements the transfer-curve fallback: sweep the candidate's
declared input source, pick a bias point by family rule, and patch that
single value, leaving the original candidate untouched.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

from . import sim
from .checks import check_structure
from .model import (DesignCandidate, Diagnostic, ExecutionOutcome, ResultBundle,
                    Stage, TaskInstance, evaluate_assertion)
from .netlist import Netlist, ParamPatch, apply_patch, emit

_QUOTED = re.compile(r"'([^']+)'")

# parse exception class -> stable signature slug
_KIND_SLUGS = {
    "DuplicateIdentifierError": "duplicate-identifier",
    "NetlistSyntaxError": "syntax-error",
    "ArityMismatchError": "arity-mismatch",
    "UnknownModelError": "unknown-model",
    "UnknownSubcircuitError": "subckt-undefined",
    "UnknownDeviceError": "unknown-device",
    "IllegalParamError": "illegal-param",
    "NetlistError": "parse-error",
}


class NoBiasSource(Exception):
    pass


class SweepFailed(Exception):
    pass


class BiasRationale(enum.Enum):
    MidTransition = "MidTransition"
    SaturationRegion = "SaturationRegion"
    MaxGainSlope = "MaxGainSlope"


# task families that get the transfer-curve repair, and their selection rule
BIAS_FAMILIES = {
    "amplifier": BiasRationale.MaxGainSlope,
    "comparator": BiasRationale.MidTransition,
    "inverter": BiasRationale.MidTransition,
}


@dataclass(frozen=True)
class BiasPoint:
    source_id: str
    value: float
    rationale: BiasRationale


def _subject(text: str) -> str:
    m = _QUOTED.search(text or "")
    return m.group(1).lower() if m else ""


def _sig(prefix: str, subject: str) -> str:
    return f"{prefix}:{subject}" if subject else prefix


def _dc_grid(start: float, stop: float, step: float) -> list[float]:
    n = int(round((stop - start) / step))
    return [start + i * step for i in range(n + 1)]


def _supply_window(net: Netlist) -> tuple[float, float]:
    """Envelope of source levels (sin sources contribute offset +/- swing)."""
    levels = [0.0]
    for d in net.devices:
        if d.kind != "V":
            continue
        levels.append(d.param("value"))
        va = d.param("sin_va")
        if va is not None:
            v0 = d.param("sin_v0") or 0.0
            levels.extend([v0 - abs(va), v0 + abs(va)])
    return min(levels), max(levels)


def run_pipeline(task: TaskInstance, cand: DesignCandidate) -> ExecutionOutcome:
    """Evaluate one candidate through every stage; failures become data."""
    diags: list[Diagnostic] = []

    # stage (i): requirement compliance
    if cand.netlist is None:
        slug = _KIND_SLUGS.get(cand.parse_error_kind or "", "parse-error")
        diags.append(Diagnostic(Stage.Requirement,
                                _sig(slug, _subject(cand.parse_error or "")),
                                cand.parse_error or "unparseable candidate"))
        return ExecutionOutcome(True, False, tuple(diags), ResultBundle())
    violations = check_structure(cand.netlist, task.constraints)
    if violations:
        for v in violations:
            diags.append(Diagnostic(Stage.Requirement,
                                    _sig(v.rule_id, _subject(v.message)), v.message))
        return ExecutionOutcome(True, False, tuple(diags), ResultBundle())
    net = cand.netlist

    # stage (ii): DC feasibility
    try:
        op, _ = sim.operating_point(net)
    except sim.NonConvergence as exc:
        nodes = ",".join(sorted(set(exc.report.failure_nodes))) or "unknown"
        diags.append(Diagnostic(Stage.DCFeasibility,
                                f"op-nonconvergence:{nodes}", str(exc)))
        return ExecutionOutcome(False, True, tuple(diags), ResultBundle())

    # stage (iii): declared analyses; solver failures are soft from here on
    simulator_error = False
    sweeps: list[tuple[str, object]] = []
    transients: list[tuple[str, object]] = []
    ac_responses: list[tuple[str, object]] = []
    for a in net.analyses:
        if a.kind == "dc":
            src = a.arg("source")
            try:
                curve, _ = sim.dc_sweep(
                    net, src, _dc_grid(a.arg("start"), a.arg("stop"), a.arg("step")))
                sweeps.append((src, curve))
            except sim.AllPointsFailed as exc:
                simulator_error = True
                diags.append(Diagnostic(Stage.DCSweep, f"sweep-failed:{src}", str(exc)))
            except (sim.UnknownSource, ValueError) as exc:
                simulator_error = True
                diags.append(Diagnostic(Stage.DCSweep, f"sweep-invalid:{src}", str(exc)))
        elif a.kind == "tran":
            try:
                ts = sim.transient(net, a.arg("tstop"), a.arg("tstep"))
                transients.append(("tran", ts))
            except sim.NonConvergence as exc:
                simulator_error = True
                nodes = ",".join(sorted(set(exc.report.failure_nodes))) or "unknown"
                diags.append(Diagnostic(Stage.Waveform,
                                        f"tran-nonconvergence:{nodes}", str(exc)))
        elif a.kind == "ac":
            src = next((d.id for d in net.devices
                        if d.kind == "V" and (d.param("ac") or 0.0) != 0.0), None)
            if src is None:
                # the checker flags this when 'ac' is a required analysis;
                # here it just means the response cannot be produced
                simulator_error = True
                diags.append(Diagnostic(Stage.DCSweep, "sweep-invalid:ac",
                                        "no voltage source carries an ac magnitude"))
                continue
            try:
                fr = sim.ac_response(net, src, None, a.arg("fstart"), a.arg("fstop"),
                                     a.arg("points"))
                ac_responses.append(("ac", fr))
            except sim.NonConvergence as exc:
                simulator_error = True
                nodes = ",".join(sorted(set(exc.report.failure_nodes))) or "unknown"
                diags.append(Diagnostic(Stage.DCFeasibility,
                                        f"op-nonconvergence:{nodes}", str(exc)))
    z = ResultBundle(operating_point=op, sweeps=tuple(sweeps),
                     transients=tuple(transients), ac_responses=tuple(ac_responses))

    # stage (iv): functional assertions
    for a in task.assertions:
        r = evaluate_assertion(a, z)
        if not r.holds:
            obs = "nan" if r.observed != r.observed else format(r.observed, ".6g")
            diags.append(Diagnostic(Stage.Functional,
                                    f"assert-{a.kind.value}:{a.target_signal}",
                                    f"{r.reason}; observed {obs}"))

    # stage (v): waveform sanity - finite, inside the supply window +/- 10%
    lo, hi = _supply_window(net)
    margin = 0.1 * max(hi - lo, 1.0)
    for name, curve in sweeps:
        for sig_name, values in curve.signals:
            finite = [v for i, v in enumerate(values) if i not in curve.holes]
            if any(v != v or abs(v) == float("inf") for v in finite):
                diags.append(Diagnostic(Stage.Waveform, f"waveform-nan:{sig_name}",
                                        f"sweep of '{name}' produced non-finite samples on '{sig_name}'"))
            elif any(v < lo - margin or v > hi + margin for v in finite):
                diags.append(Diagnostic(Stage.Waveform, f"waveform-bounds:{sig_name}",
                                        f"'{sig_name}' leaves the supply window [{lo:.6g}, {hi:.6g}] by more than 10%"))
    for _, ts in transients:
        for sig_name, values in ts.signals:
            if any(v != v or abs(v) == float("inf") for v in values):
                diags.append(Diagnostic(Stage.Waveform, f"waveform-nan:{sig_name}",
                                        f"transient produced non-finite samples on '{sig_name}'"))
            elif any(v < lo - margin or v > hi + margin for v in values):
                diags.append(Diagnostic(Stage.Waveform, f"waveform-bounds:{sig_name}",
                                        f"'{sig_name}' leaves the supply window [{lo:.6g}, {hi:.6g}] by more than 10%"))
    for _, fr in ac_responses:
        for sig_name, values in fr.magnitude_db:
            if any(v != v for v in values):
                diags.append(Diagnostic(Stage.Waveform, f"waveform-nan:{sig_name}",
                                        f"ac response produced non-finite magnitude on '{sig_name}'"))

    return ExecutionOutcome(False, simulator_error, tuple(diags), z)


@lru_cache(maxsize=4)
def load_fix_catalog(path: Optional[str] = None) -> tuple[tuple[str, str], ...]:
    """Signature-prefix -> suggested-fix table; ships as editable data."""
    if path is not None:
        text = Path(path).read_text()
    else:
        text = resources.files("circuitloop").joinpath("data/fix_catalog.tsv").read_text()
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        prefix, _, fix = line.partition("\t")
        if prefix and fix:
            out.append((prefix, fix.strip()))
    return tuple(out)


def diagnose(outcome: ExecutionOutcome,
             catalog: Optional[tuple[tuple[str, str], ...]] = None) -> list[Diagnostic]:
    """Attach suggested fixes from the catalog by longest-prefix match.

    Unmatched signatures pass through untouched (the generator sees them
    verbatim).  Calling this on a passing outcome is a contract violation.
    """
    if (not outcome.program_error and not outcome.simulator_error
            and not outcome.diagnostic_log):
        raise ValueError("diagnose called on a passing outcome")
    catalog = catalog if catalog is not None else load_fix_catalog()
    out = []
    for d in outcome.diagnostic_log:
        best = ""
        fix = None
        for prefix, text in catalog:
            if d.signature.startswith(prefix) and len(prefix) > len(best):
                best, fix = prefix, text
        out.append(replace(d, suggested_fix=fix) if fix else d)
    return out


def bias_repair(task: TaskInstance, cand: DesignCandidate) -> tuple[DesignCandidate, BiasPoint]:
    """Build the auxiliary bias-patched sibling of a transfer-curve candidate.

    The bias source is the one the candidate's own .dc directive sweeps;
    its declared range is the search grid.  Selection is by family rule:
    amplifiers take the maximum-slope segment, comparator-like families
    take the mid-transition crossing.  Only that one source value changes.
    """
    rationale = BIAS_FAMILIES.get(task.task_type)
    if rationale is None:
        raise NoBiasSource(f"task family '{task.task_type}' has no bias-repair rule")
    if cand.netlist is None:
        raise NoBiasSource("candidate did not parse; nothing to rebias")
    net = cand.netlist
    directive = next((a for a in net.analyses if a.kind == "dc"), None)
    if directive is None:
        raise NoBiasSource("candidate declares no .dc sweep to take a bias from")
    src = directive.arg("source")
    if not any(d.id == src and d.kind == "V" for d in net.devices):
        raise NoBiasSource(f"swept source '{src}' is not a voltage source")
    grid = _dc_grid(directive.arg("start"), directive.arg("stop"), directive.arg("step"))
    try:
        curve, _ = sim.dc_sweep(net, src, grid)
    except (sim.AllPointsFailed, sim.UnknownSource) as exc:
        raise SweepFailed(str(exc)) from exc

    out_name = None
    for a in task.assertions:
        if curve.signal(a.target_signal) is not None:
            out_name = a.target_signal
            break
    if out_name is None:
        raise SweepFailed("no asserted signal appears in the bias sweep")
    ys = curve.signal(out_name)
    pts = [(x, y) for i, (x, y) in enumerate(zip(curve.grid, ys))
           if i not in curve.holes]
    if len(pts) < 2:
        raise SweepFailed("bias sweep has fewer than two solved points")

    if rationale is BiasRationale.MaxGainSlope:
        best_i, best_slope = 0, -1.0
        for i in range(len(pts) - 1):
            (x0, y0), (x1, y1) = pts[i], pts[i + 1]
            slope = abs((y1 - y0) / (x1 - x0))
            if slope > best_slope:
                best_i, best_slope = i, slope
        value = pts[best_i][0]
    else:
        y_lo = min(y for _, y in pts)
        y_hi = max(y for _, y in pts)
        mid = 0.5 * (y_lo + y_hi)
        value = None
        for i in range(len(pts) - 1):
            (x0, y0), (x1, y1) = pts[i], pts[i + 1]
            if (y0 - mid) * (y1 - mid) <= 0.0 and y0 != y1:
                value = x0 + (mid - y0) * (x1 - x0) / (y1 - y0)
                break
        if value is None:
            raise SweepFailed("output never crosses mid-transition in the sweep range")

    patched = apply_patch(net, ParamPatch(src, "value", value))
    point = BiasPoint(source_id=src, value=value, rationale=rationale)
    sibling = DesignCandidate(
        source_text=emit(patched), netlist=patched, parse_error=None,
        parse_error_kind=None, iteration=cand.iteration, prompt_hash=cand.prompt_hash,
        bias_note=f"bias '{src}' set to {value:.6g} ({rationale.value})")
    return sibling, point
