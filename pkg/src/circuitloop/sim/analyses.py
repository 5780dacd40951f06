"""The four analyses: operating point, DC sweep, transient, small-signal AC.

Each call is self-contained: build a System over the flattened netlist, run
the solver, package results into the plain containers from model.py.  The
transient integrator is fixed-step backward Euler, which is unconditionally
stable and keeps oscillation detection free of trapezoidal ringing.  AC is
a complex MNA solve per frequency point around the DC operating point, with
every independent source zeroed except the designated input.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np

from ..model import FrequencyResponse, OperatingPoint, SweepCurve, TimeSeries
from ..netlist import Netlist
from .devices import diode_eval, mos_eval
from .mna import (GMIN_SCHEDULE, NonConvergence, SolveReport, Strategy, System,
                  newton, solve_op)

TWO_PI = 2.0 * math.pi


class UnknownSource(Exception):
    pass


class AllPointsFailed(Exception):
    pass


def _node_voltages(sys: System, x: np.ndarray) -> tuple[tuple[str, float], ...]:
    return tuple((name, float(x[i])) for i, name in enumerate(sys.nodes))


def _volts_across(sys: System, x: np.ndarray, pins: Sequence[str]) -> float:
    a, b = sys.nidx(pins[0]), sys.nidx(pins[1])
    va = 0.0 if a < 0 else float(x[a])
    vb = 0.0 if b < 0 else float(x[b])
    return va - vb


def operating_point(net: Netlist) -> tuple[OperatingPoint, SolveReport]:
    """DC operating point; raises NonConvergence when the ladder fails."""
    sys = System(net)
    r, report = solve_op(sys)
    if not report.converged:
        raise NonConvergence(report)
    op = OperatingPoint(
        node_voltages=_node_voltages(sys, r.x),
        device_currents=tuple((k, float(v)) for k, v in r.last.device_currents.items()),
        regions=tuple(r.last.regions.items()),
    )
    return op, report


def dc_sweep(net: Netlist, source_id: str,
             grid: Sequence[float]) -> tuple[SweepCurve, tuple[SolveReport, ...]]:
    """One operating point per grid value, warm-started left to right.

    Unsolved points become NaN samples and their indices land in holes;
    only a sweep with no solved point at all raises AllPointsFailed.
    """
    sys = System(net)
    src = next((d for d in sys.net.devices if d.id == source_id and d.kind in ("V", "I")), None)
    if src is None:
        raise UnknownSource(f"no independent source named {source_id!r}")
    grid = [float(g) for g in grid]
    if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sweep grid must be increasing with at least two points")

    columns: dict[str, list[float]] = {n: [] for n in sys.nodes}
    holes: list[int] = []
    reports: list[SolveReport] = []
    warm: Optional[np.ndarray] = None
    for idx, val in enumerate(grid):
        r, report = solve_op(sys, x0=warm, overrides={source_id: val})
        reports.append(report)
        if report.converged:
            warm = r.x
            for i, name in enumerate(sys.nodes):
                columns[name].append(float(r.x[i]))
        else:
            holes.append(idx)
            for name in sys.nodes:
                columns[name].append(float("nan"))
    if len(holes) == len(grid):
        raise AllPointsFailed(f"dc sweep of {source_id!r}: no grid point converged")
    curve = SweepCurve(grid=tuple(grid),
                       signals=tuple((n, tuple(vs)) for n, vs in columns.items()),
                       holes=tuple(holes))
    return curve, tuple(reports)


def _sin_sources(sys: System) -> list:
    return [d for d in sys.net.devices
            if d.kind == "V" and d.param("sin_freq") is not None]


def _source_values_at(sin_devs: list, t: float) -> dict[str, float]:
    out = {}
    for d in sin_devs:
        v0, va, freq = d.param("sin_v0"), d.param("sin_va"), d.param("sin_freq")
        out[d.id] = v0 + va * math.sin(TWO_PI * freq * t)
    return out


def transient(net: Netlist, t_stop: float, dt: float,
              initial_conditions: Optional[Mapping[str, float]] = None) -> TimeSeries:
    """Fixed-step backward Euler from 0 to t_stop.

    With initial_conditions given, or any capacitor carrying an ic= value,
    the operating-point solve is skipped and integration starts from the
    supplied state (nodes not mentioned start at 0 V).  Otherwise the DC
    operating point seeds the run.
    """
    if dt <= 0 or t_stop < dt:
        raise ValueError("need dt > 0 and t_stop >= dt")
    sys = System(net)
    sin_devs = _sin_sources(sys)
    caps = [d for d in sys.net.devices if d.kind == "C"]
    inds = [d for d in sys.net.devices if d.kind == "L"]
    use_ic = bool(initial_conditions) or any(c.param("ic") is not None for c in caps)

    if use_ic:
        x = np.zeros(sys.size)
        for node, volts in (initial_conditions or {}).items():
            node = node.lower()
            if node == "0":
                continue
            if node not in sys.node_index:
                raise ValueError(f"initial condition names unknown node {node!r}")
            x[sys.node_index[node]] = float(volts)
        cap_v = {c.id: (c.param("ic") if c.param("ic") is not None
                        else _volts_across(sys, x, c.pins)) for c in caps}
        ind_i = {l.id: 0.0 for l in inds}
    else:
        r, report = solve_op(sys, overrides=_source_values_at(sin_devs, 0.0))
        if not report.converged:
            raise NonConvergence(report, when=0.0)
        x = r.x
        cap_v = {c.id: _volts_across(sys, x, c.pins) for c in caps}
        ind_i = {l.id: float(x[sys.branch_index[l.id]]) for l in inds}

    times = [0.0]
    columns: dict[str, list[float]] = {
        n: [float(x[i])] for i, n in enumerate(sys.nodes)}
    n_steps = int(round(t_stop / dt))
    for k in range(1, n_steps + 1):
        t = k * dt
        companions = {"dt": dt, "cap_v": cap_v, "ind_i": ind_i}
        overrides = _source_values_at(sin_devs, t)
        r = newton(sys, x, overrides=overrides, tran=companions)
        trace = [Strategy.Direct]
        if not r.ok:
            # one retry pass with shrinking gmin before giving up on the step
            trace.append(Strategy.GminStepping)
            xg = x
            for gmin in (*GMIN_SCHEDULE, 0.0):
                r = newton(sys, xg, gmin=gmin, overrides=overrides, tran=companions)
                if not r.ok:
                    break
                xg = r.x
        if not r.ok:
            report = SolveReport(False, r.iterations, tuple(trace),
                                 r.max_residual, r.failure_nodes)
            raise NonConvergence(report, when=t)
        x = r.x
        for c in caps:
            cap_v[c.id] = _volts_across(sys, x, c.pins)
        for l in inds:
            ind_i[l.id] = float(x[sys.branch_index[l.id]])
        times.append(t)
        for i, n in enumerate(sys.nodes):
            columns[n].append(float(x[i]))
    return TimeSeries(times=tuple(times),
                      signals=tuple((n, tuple(vs)) for n, vs in columns.items()))


def log_grid(f_start: float, f_stop: float, points_per_decade: int) -> tuple[float, ...]:
    if f_start <= 0 or f_stop <= f_start or points_per_decade < 1:
        raise ValueError("need 0 < f_start < f_stop and points_per_decade >= 1")
    decades = math.log10(f_stop / f_start)
    n_pts = max(2, int(round(decades * points_per_decade)) + 1)
    return tuple(float(f) for f in np.logspace(
        math.log10(f_start), math.log10(f_stop), n_pts))


def ac_response(net: Netlist, input_source: str, output_node: Optional[str],
                f_start: float, f_stop: float,
                points_per_decade: int = 20) -> FrequencyResponse:
    """Small-signal transfer from input_source to every node.

    The circuit is linearized at its DC operating point; the input source
    drives its ac magnitude (default 1.0) and every other independent
    source is zeroed, so node magnitudes are transfer gains directly.
    output_node is a convenience check that the node of interest exists.
    """
    sys = System(net)
    src = next((d for d in sys.net.devices if d.id == input_source and d.kind in ("V", "I")), None)
    if src is None:
        raise UnknownSource(f"no independent source named {input_source!r}")
    if output_node is not None and output_node != "0" and output_node not in sys.node_index:
        raise ValueError(f"unknown output node {output_node!r}")
    freqs = log_grid(f_start, f_stop, points_per_decade)

    r, report = solve_op(sys)
    if not report.converged:
        raise NonConvergence(report)
    x_op = r.x
    amp = src.param("ac")
    if amp is None or amp == 0.0:
        amp = 1.0

    mags: dict[str, list[float]] = {m: [] for m in sys.nodes}
    phases: dict[str, list[float]] = {m: [] for m in sys.nodes}
    for f in freqs:
        w = TWO_PI * f
        Y = np.zeros((sys.size, sys.size), dtype=complex)
        b = np.zeros(sys.size, dtype=complex)

        def stamp2(a: int, bb: int, y: complex) -> None:
            if a >= 0:
                Y[a, a] += y
            if bb >= 0:
                Y[bb, bb] += y
            if a >= 0 and bb >= 0:
                Y[a, bb] -= y
                Y[bb, a] -= y

        for d in sys.net.devices:
            a = sys.nidx(d.pins[0])
            bn = sys.nidx(d.pins[1]) if len(d.pins) > 1 else -1
            if d.kind == "R":
                stamp2(a, bn, 1.0 / d.param("value"))
            elif d.kind == "C":
                stamp2(a, bn, 1j * w * d.param("value"))
            elif d.kind in ("V", "L"):
                bi = sys.branch_index[d.id]
                if a >= 0:
                    Y[a, bi] += 1.0
                    Y[bi, a] += 1.0
                if bn >= 0:
                    Y[bn, bi] -= 1.0
                    Y[bi, bn] -= 1.0
                if d.kind == "L":
                    Y[bi, bi] -= 1j * w * d.param("value")
                elif d.id == input_source:
                    b[bi] = amp
            elif d.kind == "I":
                if d.id == input_source:
                    if a >= 0:
                        b[a] -= amp
                    if bn >= 0:
                        b[bn] += amp
            elif d.kind == "Diode":
                ev = diode_eval(sys.models[d.model], _volts_across(sys, x_op, d.pins))
                stamp2(a, bn, ev.g)
            elif d.kind == "MOSFET":
                nd_, ng, ns = a, bn, sys.nidx(d.pins[2])
                vd = 0.0 if nd_ < 0 else float(x_op[nd_])
                vg = 0.0 if ng < 0 else float(x_op[ng])
                vs = 0.0 if ns < 0 else float(x_op[ns])
                ev = mos_eval(sys.models[d.model], d, vd, vg, vs)
                for col, g in ((nd_, ev.g_dd), (ng, ev.g_dg), (ns, ev.g_ds)):
                    if col >= 0:
                        if nd_ >= 0:
                            Y[nd_, col] += g
                        if ns >= 0:
                            Y[ns, col] -= g

        v = np.linalg.solve(Y, b)
        for i, name in enumerate(sys.nodes):
            mag = abs(v[i])
            mags[name].append(20.0 * math.log10(max(mag, 1e-300)))
            phases[name].append(float(np.angle(v[i], deg=True)))

    return FrequencyResponse(
        freqs=freqs,
        magnitude_db=tuple((m, tuple(vs)) for m, vs in mags.items()),
        phase_deg=tuple((m, tuple(vs)) for m, vs in phases.items()))


def write_table(path, axis_name: str, axis: Sequence[float],
                signals: Sequence[tuple[str, Sequence[float]]]) -> None:
    """Plain tabular text: one axis column plus one column per signal."""
    with open(path, "w") as fh:
        fh.write("\t".join([axis_name, *(name for name, _ in signals)]) + "\n")
        for i, g in enumerate(axis):
            row = [f"{g:.12g}"] + [f"{vals[i]:.12g}" for _, vals in signals]
            fh.write("\t".join(row) + "\n")
