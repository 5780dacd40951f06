"""Static structure rules over parsed netlists.

Every rule is a pure function Netlist x ConstraintSet -> violations,
registered under a stable rule id.  check_structure runs the default
catalog in a fixed order plus any extra registered ids the constraint
set names; violations are data, never exceptions, so the pipeline can
fold them into feedback instead of dying.

Messages put the offending identifier or node in single quotes; the
first quoted token is what diagnosis lifts into the failure signature,
so keep that convention when adding rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .model import ConstraintSet
from .netlist import DeviceLine, Netlist, flatten


@dataclass(frozen=True)
class StructuralViolation:
    rule_id: str
    location: int             # source line, 0 when not tied to one line
    message: str
    severity: str = "Error"

    def to_line(self) -> str:
        return f"{self.rule_id}\tline {self.location}\t{self.message}"


RuleFn = Callable[[Netlist, Netlist, ConstraintSet], list[StructuralViolation]]

_REGISTRY: dict[str, RuleFn] = {}

# default-on rules, in execution order
CATALOG = (
    "unique-ids",
    "required-node",
    "nmos-bulk-tie",
    "pmos-bulk-tie",
    "subckt-undefined",
    "subckt-pin-order",
    "dc-path-to-reference",
    "required-analyses",
)


def rule(rule_id: str):
    def deco(fn: RuleFn) -> RuleFn:
        _REGISTRY[rule_id] = fn
        return fn
    return deco


def registered_rules() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def check_structure(net: Netlist, omega: ConstraintSet) -> tuple[StructuralViolation, ...]:
    """Run the catalog plus omega's extra rules; unknown ids are a config
    error (ValueError), not a violation."""
    extra = [r for r in omega.naming_rules if r not in CATALOG]
    unknown = [r for r in extra if r not in _REGISTRY]
    if unknown:
        raise ValueError(f"constraint set names unregistered checker rules: {unknown}")
    try:
        flat = flatten(net) if net.subckts else net
    except Exception:
        flat = net                 # undefined subckts get their own rule below
    out: list[StructuralViolation] = []
    for rule_id in (*CATALOG, *extra):
        out.extend(_REGISTRY[rule_id](net, flat, omega))
    return tuple(out)


def _scopes(net: Netlist):
    yield "top level", net.devices
    for sub in net.subckts:
        yield f"subcircuit '{sub.name}'", sub.body.devices


def _mosfets(flat: Netlist, net: Netlist, kind: str) -> list[DeviceLine]:
    out = []
    for d in flat.devices:
        if d.kind != "MOSFET":
            continue
        card = net.model(d.model)
        if card is not None and card.kind == kind:
            out.append(d)
    return out


@rule("unique-ids")
def _unique_ids(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    out = []
    for scope, devices in _scopes(net):
        seen: dict[str, int] = {}
        for d in devices:
            if d.id in seen:
                out.append(StructuralViolation(
                    "unique-ids", d.line_no,
                    f"instance id '{d.id}' already used at line {seen[d.id]} in {scope}"))
            else:
                seen[d.id] = d.line_no
    return out


@rule("required-node")
def _required_node(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    present = set(flat.nodes())
    out = []
    for name in omega.required_node_names:
        if name.lower() not in present:
            out.append(StructuralViolation(
                "required-node", 0, f"required node '{name.lower()}' is missing"))
    return out


@rule("nmos-bulk-tie")
def _nmos_bulk(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    out = []
    for d in _mosfets(flat, net, "nmos1"):
        drain, gate, source, bulk = d.pins
        if bulk != source:
            out.append(StructuralViolation(
                "nmos-bulk-tie", d.line_no,
                f"nmos '{d.id}' bulk is '{bulk}' but must tie to its source '{source}'"))
    return out


@rule("pmos-bulk-tie")
def _pmos_bulk(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    out = []
    for d in _mosfets(flat, net, "pmos1"):
        bulk = d.pins[3]
        if bulk != "vdd":
            out.append(StructuralViolation(
                "pmos-bulk-tie", d.line_no,
                f"pmos '{d.id}' bulk is '{bulk}' but must tie to 'vdd'"))
    return out


@rule("subckt-undefined")
def _subckt_undefined(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    defined = {s.name for s in net.subckts}
    out = []
    for scope, devices in _scopes(net):
        for d in devices:
            if d.kind == "SubcktInstance" and d.model not in defined:
                out.append(StructuralViolation(
                    "subckt-undefined", d.line_no,
                    f"instance '{d.id}' uses undefined subcircuit '{d.model}'"))
    return out


@rule("subckt-pin-order")
def _subckt_pin_order(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    out = []
    for name, pins in omega.required_subcircuit_pins:
        name = name.lower()
        sub = net.subckt(name)
        if sub is None:
            out.append(StructuralViolation(
                "subckt-pin-order", 0, f"required subcircuit '{name}' is not defined"))
        elif sub.pins != tuple(p.lower() for p in pins):
            out.append(StructuralViolation(
                "subckt-pin-order", 0,
                f"subcircuit '{name}' pins {list(sub.pins)} do not match required order {list(pins)}"))
    return out


@rule("dc-path-to-reference")
def _dc_path(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    # conductive edges for DC purposes; C and I sources are open
    adjacency: dict[str, set[str]] = {}

    def link(a: str, b: str) -> None:
        adjacency.setdefault(a, set()).add(b)
        adjacency.setdefault(b, set()).add(a)

    nodes: set[str] = set()
    for d in flat.devices:
        nodes.update(d.pins)
        if d.kind in ("R", "L", "V"):
            link(d.pins[0], d.pins[1])
        elif d.kind == "MOSFET":
            link(d.pins[0], d.pins[2])        # channel: drain to source
    nodes.discard("0")
    reached = set()
    frontier = ["0"]
    while frontier:
        cur = frontier.pop()
        for nxt in adjacency.get(cur, ()):
            if nxt not in reached and nxt != "0":
                reached.add(nxt)
                frontier.append(nxt)
    out = []
    for name in sorted(nodes - reached):
        out.append(StructuralViolation(
            "dc-path-to-reference", 0,
            f"node '{name}' has no DC path to the reference node 0"))
    return out


@rule("required-analyses")
def _required_analyses(net: Netlist, flat: Netlist, omega: ConstraintSet) -> list[StructuralViolation]:
    present = [a.kind for a in net.analyses]
    out = []
    for kind in omega.simulator_settings:
        if kind not in present:
            out.append(StructuralViolation(
                "required-analyses", 0, f"required analysis '{kind}' is missing"))
    sources = {d.id: d for d in flat.devices if d.kind in ("V", "I")}
    for a in net.analyses:
        if a.kind == "dc":
            src = a.arg("source")
            if src not in sources:
                out.append(StructuralViolation(
                    "required-analyses", 0,
                    f"analysis 'dc' sweeps '{src}' which is not an independent source"))
        elif a.kind == "ac":
            driven = [d for d in sources.values()
                      if d.kind == "V" and (d.param("ac") or 0.0) != 0.0]
            if not driven:
                out.append(StructuralViolation(
                    "required-analyses", 0,
                    "analysis 'ac' needs a voltage source with an ac magnitude"))
    return out
