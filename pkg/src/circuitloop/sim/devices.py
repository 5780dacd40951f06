"""Nonlinear device equations: level-1 square-law MOSFET and junction diode.

Each evaluator returns the branch current together with its partial
derivatives with respect to the terminal voltages, which the Newton
assembly stamps as a linearized companion.  The MOSFET is symmetric: when
vds goes negative, drain and source swap roles.  The (1 + lambda*vds)
factor multiplies both triode and saturation current, so drain current is
continuous (and, with lambda = 0, smooth) across the region boundary.
Body terminals are structural only - no body effect at level 1 here.
"""

from __future__ import annotations

import math
from typing import NamedTuple

from ..netlist import DeviceLine, ModelCard

THERMAL_V = 0.025852          # kT/q at ~300 K
_EXP_CAP = 40.0               # linearize the diode beyond this exponent


class MosEval(NamedTuple):
    i_d: float                # current into the drain pin
    g_dd: float               # d i_d / d v_drain
    g_dg: float               # d i_d / d v_gate
    g_ds: float               # d i_d / d v_source
    region: str               # cutoff | triode | saturation


def _square_law(beta: float, vth: float, lam: float, vgs: float, vds: float):
    """Forward-mode (vds >= 0) drain current and (gm, gds)."""
    vov = vgs - vth
    if vov <= 0.0:
        return 0.0, 0.0, 0.0, "cutoff"
    cm = 1.0 + lam * vds
    if vds < vov:
        i = beta * (vov * vds - 0.5 * vds * vds)
        gm = beta * vds * cm
        gds = beta * (vov - vds) * cm + i * lam
        return i * cm, gm, gds, "triode"
    i = 0.5 * beta * vov * vov
    gm = beta * vov * cm
    gds = i * lam
    return i * cm, gm, gds, "saturation"


def _nmos_eval(beta: float, vth: float, lam: float, vd: float, vg: float, vs: float):
    """Current into the drain pin with per-terminal partials, NMOS frame."""
    if vd >= vs:
        i, gm, gds, region = _square_law(beta, vth, lam, vg - vs, vd - vs)
        return i, gds, gm, -gm - gds, region
    # reverse mode: the drain pin acts as the source
    i, gm, gds, region = _square_law(beta, vth, lam, vg - vd, vs - vd)
    return -i, gm + gds, -gm, -gds, region


def mos_eval(card: ModelCard, dev: DeviceLine, vd: float, vg: float, vs: float) -> MosEval:
    """Level-1 drain current and derivatives at the given pin voltages.

    PMOS is the NMOS equations at negated terminal voltages with the
    current flipped; the partials come out unchanged by the chain rule.
    """
    w = dev.param("w", 1e-6)
    l = dev.param("l", 1e-6)
    beta = card.kp * (w / l)
    if card.kind == "nmos1":
        i, g_dd, g_dg, g_ds, region = _nmos_eval(beta, card.vth, card.lambda_, vd, vg, vs)
    else:
        i, g_dd, g_dg, g_ds, region = _nmos_eval(beta, card.vth, card.lambda_, -vd, -vg, -vs)
        i = -i
    return MosEval(i_d=i, g_dd=g_dd, g_dg=g_dg, g_ds=g_ds, region=region)


class DiodeEval(NamedTuple):
    i: float                   # current from anode to cathode
    g: float                   # conductance d i / d v


def diode_eval(card: ModelCard, v: float) -> DiodeEval:
    """Shockley diode with a linear extension past a capped exponent so
    Newton never overflows."""
    x = v / THERMAL_V
    if x > _EXP_CAP:
        e = math.exp(_EXP_CAP)
        i = card.is_sat * (e * (1.0 + (x - _EXP_CAP)) - 1.0)
        g = card.is_sat * e / THERMAL_V
    else:
        e = math.exp(x)
        i = card.is_sat * (e - 1.0)
        g = card.is_sat * e / THERMAL_V
    # a touch of leakage keeps deep reverse bias well-posed
    return DiodeEval(i=i, g=g + 1e-15)
