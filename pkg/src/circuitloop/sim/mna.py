"""Modified nodal analysis: assembly, damped Newton, convergence ladder.

Unknowns are node voltages (ground excluded) plus one branch current per
voltage source and per inductor.  KCL rows are written as "sum of currents
leaving the node = 0"; each device stamps its linearized companion into the
Jacobian and its current into the residual, so linear devices are exact and
nonlinear ones converge quadratically near the solution.

The operating-point driver walks the classic aid ladder when a direct solve
fails: gmin stepping (a shrinking conductance from every node to ground,
1e-2 down by decades), dynamic gmin stepping (adaptive shrink factor with
backtracking), then source stepping (all independent sources ramped 0 -> 1
in ten steps).  The SolveReport records every strategy attempted, in order,
and names the nodes implicated in the final failure - the top residual rows,
or the floating rows of a singular matrix.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..netlist import Netlist, flatten
from .devices import diode_eval, mos_eval

ABSTOL = 1e-12               # amps
VNTOL = 1e-6                 # volts
RELTOL = 1e-3
ITL = 100                    # newton iterations per point
VLIMIT = 2.0                 # max node-voltage step per iteration, volts

GMIN_SCHEDULE = tuple(10.0 ** -k for k in range(2, 13))   # 1e-2 .. 1e-12
SOURCE_RAMPS = 10


class Strategy(enum.Enum):
    Direct = "Direct"
    GminStepping = "GminStepping"
    DynamicGmin = "DynamicGmin"
    SourceStepping = "SourceStepping"


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    strategy_trace: tuple[Strategy, ...]
    max_residual: float
    failure_nodes: tuple[str, ...] = ()


class NonConvergence(Exception):
    """Raised when the whole ladder is exhausted; carries the report."""

    def __init__(self, report: SolveReport, when: Optional[float] = None):
        at = f" at t={when:g}s" if when is not None else ""
        super().__init__(f"operating point did not converge{at}; "
                         f"strategies tried: {[s.value for s in report.strategy_trace]}; "
                         f"check nodes {list(report.failure_nodes)}")
        self.report = report
        self.when = when


class System:
    """Index structure for one flattened netlist."""

    def __init__(self, net: Netlist):
        if net.subckts:
            net = flatten(net)
        self.net = net
        self.nodes: list[str] = []
        seen = set()
        for d in net.devices:
            for p in d.pins:
                if p != "0" and p not in seen:
                    seen.add(p)
                    self.nodes.append(p)
        self.node_index = {n: i for i, n in enumerate(self.nodes)}
        self.branches: list = [d for d in net.devices if d.kind in ("V", "L")]
        self.branch_index = {d.id: len(self.nodes) + i for i, d in enumerate(self.branches)}
        self.size = len(self.nodes) + len(self.branches)
        self.models = {m.name: m for m in net.models}

    def nidx(self, node: str) -> int:
        return -1 if node == "0" else self.node_index[node]


@dataclass
class AssembleResult:
    jac: np.ndarray
    res: np.ndarray
    node_scale: np.ndarray            # per-node sum of |branch currents|
    device_currents: dict[str, float] = field(default_factory=dict)
    regions: dict[str, str] = field(default_factory=dict)


def assemble(sys: System, x: np.ndarray, gmin: float = 0.0, source_scale: float = 1.0,
             overrides: Optional[dict[str, float]] = None,
             tran: Optional[dict] = None) -> AssembleResult:
    """Build the Jacobian and residual at x.

    overrides replaces source values by device id (used by sweeps); tran,
    when given, holds {'dt': step, 'cap_v': {...}, 'ind_i': {...}} and
    switches capacitors and inductors to their backward-Euler companions.
    """
    n = len(sys.nodes)
    J = np.zeros((sys.size, sys.size))
    f = np.zeros(sys.size)
    scale = np.zeros(sys.size)
    out = AssembleResult(J, f, scale)
    overrides = overrides or {}

    def v_at(idx: int) -> float:
        return 0.0 if idx < 0 else float(x[idx])

    def kcl(idx: int, current: float) -> None:
        if idx >= 0:
            f[idx] += current
            scale[idx] += abs(current)

    def dkcl(idx: int, widx: int, g: float) -> None:
        if idx >= 0 and widx >= 0:
            J[idx, widx] += g

    def two_terminal(a: int, b: int, i: float, g: float) -> None:
        kcl(a, i)
        kcl(b, -i)
        dkcl(a, a, g)
        dkcl(a, b, -g)
        dkcl(b, a, -g)
        dkcl(b, b, g)

    for d in sys.net.devices:
        a = sys.nidx(d.pins[0])
        b = sys.nidx(d.pins[1]) if len(d.pins) > 1 else -1
        if d.kind == "R":
            g = 1.0 / d.param("value")
            i = g * (v_at(a) - v_at(b))
            two_terminal(a, b, i, g)
            out.device_currents[d.id] = i
        elif d.kind == "C":
            if tran is None:
                out.device_currents[d.id] = 0.0
                continue
            g = d.param("value") / tran["dt"]
            i = g * ((v_at(a) - v_at(b)) - tran["cap_v"][d.id])
            two_terminal(a, b, i, g)
            out.device_currents[d.id] = i
        elif d.kind in ("V", "L"):
            bi = sys.branch_index[d.id]
            ib = float(x[bi])
            kcl(a, ib)
            kcl(b, -ib)
            dkcl(a, bi, 1.0)
            dkcl(b, bi, -1.0)
            # branch constraint row (each row owned by exactly one device)
            if d.kind == "V":
                val = overrides.get(d.id, d.param("value")) * source_scale
                f[bi] = (v_at(a) - v_at(b)) - val
            elif tran is None:
                f[bi] = v_at(a) - v_at(b)          # inductor is a dc short
            else:
                l_over_dt = d.param("value") / tran["dt"]
                f[bi] = (v_at(a) - v_at(b)) - l_over_dt * (ib - tran["ind_i"][d.id])
                J[bi, bi] -= l_over_dt
            if a >= 0:
                J[bi, a] += 1.0
            if b >= 0:
                J[bi, b] -= 1.0
            scale[bi] = max(abs(v_at(a)), abs(v_at(b)), 1.0)
            out.device_currents[d.id] = ib
        elif d.kind == "I":
            val = overrides.get(d.id, d.param("value")) * source_scale
            kcl(a, val)
            kcl(b, -val)
            out.device_currents[d.id] = val
        elif d.kind == "Diode":
            card = sys.models[d.model]
            ev = diode_eval(card, v_at(a) - v_at(b))
            two_terminal(a, b, ev.i, ev.g)
            out.device_currents[d.id] = ev.i
        elif d.kind == "MOSFET":
            card = sys.models[d.model]
            nd_, ng, ns = a, b, sys.nidx(d.pins[2])
            ev = mos_eval(card, d, v_at(nd_), v_at(ng), v_at(ns))
            kcl(nd_, ev.i_d), kcl(ns, -ev.i_d)
            for col, g in ((nd_, ev.g_dd), (ng, ev.g_dg), (ns, ev.g_ds)):
                dkcl(nd_, col, g)
                dkcl(ns, col, -g)
            out.device_currents[d.id] = ev.i_d
            out.regions[d.id] = ev.region
        else:
            raise AssertionError(f"unflattened device {d.kind} reached assembly")

    if gmin > 0.0:
        for i in range(n):
            J[i, i] += gmin
            f[i] += gmin * x[i]
    return out


@dataclass
class NewtonResult:
    ok: bool
    x: np.ndarray
    iterations: int
    max_residual: float
    failure_nodes: tuple[str, ...] = ()
    reason: str = ""
    last: Optional[AssembleResult] = None


def _residual_ok(sys: System, res: AssembleResult) -> bool:
    n = len(sys.nodes)
    for i in range(n):
        if abs(res.res[i]) > ABSTOL + RELTOL * res.node_scale[i]:
            return False
    for i in range(n, sys.size):
        if abs(res.res[i]) > VNTOL + RELTOL * res.node_scale[i]:
            return False
    return True


def _worst_nodes(sys: System, f: np.ndarray, count: int = 2) -> tuple[str, ...]:
    n = len(sys.nodes)
    order = sorted(range(n), key=lambda i: -abs(f[i]))
    return tuple(sys.nodes[i] for i in order[:count])


def _singular_nodes(sys: System, J: np.ndarray) -> tuple[str, ...]:
    """Name the nodes spanning a singular Jacobian's null space.

    The undetermined voltages of a floating island show up as the dominant
    components of the right null vector, which localizes far better than
    residuals do (a floating subcircuit has zero residual everywhere).
    """
    try:
        _, sigma, vh = np.linalg.svd(J)
    except np.linalg.LinAlgError:
        return ()
    if sigma.size == 0 or sigma[-1] > 1e-9 * max(sigma[0], 1.0):
        return ()
    null = np.abs(vh[-1][:len(sys.nodes)])
    order = sorted(range(len(sys.nodes)), key=lambda i: -null[i])
    return tuple(sys.nodes[i] for i in order[:2] if null[i] > 1e-6)


def newton(sys: System, x0: np.ndarray, gmin: float = 0.0, source_scale: float = 1.0,
           overrides: Optional[dict[str, float]] = None,
           tran: Optional[dict] = None, itl: int = ITL) -> NewtonResult:
    """Damped Newton-Raphson from x0; never raises on numeric trouble."""
    x = x0.copy()
    if sys.size == 0:
        empty = assemble(sys, x, gmin, source_scale, overrides, tran)
        return NewtonResult(True, x, 0, 0.0, last=empty)
    res = assemble(sys, x, gmin, source_scale, overrides, tran)
    for it in range(1, itl + 1):
        if not np.all(np.isfinite(res.res)) or not np.all(np.isfinite(res.jac)):
            return NewtonResult(False, x, it, float("inf"),
                                _worst_nodes(sys, np.nan_to_num(res.res, nan=np.inf)), "numeric overflow")
        try:
            dx = np.linalg.solve(res.jac, -res.res)
        except np.linalg.LinAlgError:
            nodes = _singular_nodes(sys, res.jac) or _worst_nodes(sys, res.res)
            return NewtonResult(False, x, it, float(np.max(np.abs(res.res))), nodes, "singular matrix")
        nv = len(sys.nodes)
        step = float(np.max(np.abs(dx[:nv]))) if nv else 0.0
        if step > VLIMIT:
            dx = dx * (VLIMIT / step)
        x = x + dx
        res = assemble(sys, x, gmin, source_scale, overrides, tran)
        delta_ok = bool(np.all(np.abs(dx[:nv]) <= VNTOL + RELTOL * np.abs(x[:nv]))) if nv else True
        if delta_ok and _residual_ok(sys, res):
            return NewtonResult(True, x, it, float(np.max(np.abs(res.res), initial=0.0)), last=res)
    return NewtonResult(False, x, itl, float(np.max(np.abs(res.res), initial=0.0)),
                        _worst_nodes(sys, res.res), "iteration limit reached")


def solve_op(sys: System, x0: Optional[np.ndarray] = None,
             overrides: Optional[dict[str, float]] = None) -> tuple[NewtonResult, SolveReport]:
    """Operating-point solve with the full convergence ladder."""
    start = x0 if x0 is not None else np.zeros(sys.size)
    trace: list[Strategy] = []
    total_iters = 0
    last: Optional[NewtonResult] = None

    def done(r: NewtonResult) -> tuple[NewtonResult, SolveReport]:
        return r, SolveReport(True, total_iters, tuple(trace), r.max_residual)

    trace.append(Strategy.Direct)
    r = newton(sys, start, overrides=overrides)
    total_iters += r.iterations
    if r.ok:
        return done(r)
    last = r

    trace.append(Strategy.GminStepping)
    x = start
    ok = True
    for gmin in (*GMIN_SCHEDULE, 0.0):
        r = newton(sys, x, gmin=gmin, overrides=overrides)
        total_iters += r.iterations
        if not r.ok:
            ok = False
            last = r
            break
        x = r.x
    if ok:
        return done(r)

    trace.append(Strategy.DynamicGmin)
    r = _dynamic_gmin(sys, start, overrides)
    if r is not None:
        total_iters += r.iterations
        if r.ok:
            return done(r)
        last = r

    trace.append(Strategy.SourceStepping)
    x = np.zeros(sys.size)
    ok = True
    for k in range(1, SOURCE_RAMPS + 1):
        r = newton(sys, x, source_scale=k / SOURCE_RAMPS, overrides=overrides)
        total_iters += r.iterations
        if not r.ok:
            ok = False
            last = r
            break
        x = r.x
    if ok:
        return done(r)

    report = SolveReport(False, total_iters, tuple(trace),
                         last.max_residual if last else float("inf"),
                         last.failure_nodes if last else ())
    return last, report


def _dynamic_gmin(sys: System, x0: np.ndarray,
                  overrides: Optional[dict[str, float]]) -> Optional[NewtonResult]:
    """Adaptive gmin: find a conductance large enough to converge, then
    shrink toward zero, backing the shrink factor off whenever a step
    fails.  Mirrors the behavior of the classic dynamic ladder stage."""
    iters = 0
    g = 1e-3
    r = None
    while g <= 10.0:
        r = newton(sys, x0, gmin=g, overrides=overrides)
        iters += r.iterations
        if r.ok:
            break
        g *= 100.0
    if r is None or not r.ok:
        if r is not None:
            r.iterations = iters
        return r
    x = r.x
    factor = 10.0
    while g > 1e-12:
        cand = g / factor
        rr = newton(sys, x, gmin=cand, overrides=overrides)
        iters += rr.iterations
        if rr.ok:
            g, x = cand, rr.x
        else:
            factor = math.sqrt(factor)
            if factor < 1.05:
                rr.iterations = iters
                return rr
    final = newton(sys, x, gmin=0.0, overrides=overrides)
    final.iterations = iters + final.iterations
    return final
