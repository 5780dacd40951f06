"""SPICE-subset netlist language: parser, canonical emitter, param patching.

The subset is what the generation loop actually needs, nothing more:

    r<id> n+ n- value
    c<id> n+ n- value [ic=v]
    l<id> n+ n- value
    v<id> n+ n- [dc] value [ac mag] | sin(offset ampl freq)
    i<id> n+ n- [dc] value
    d<id> n+ n- model
    m<id> nd ng ns nb model [w=..] [l=..]        (pin order: drain gate source body)
    x<id> node... subckt_name                    (subcircuit name last, classic style)
    .subckt name pin... / .ends
    .model name {nmos|pmos|d} k=v ...
    .op | .dc src start stop step | .tran tstep tstop | .ac dec pts fstart fstop
    .end                                         (optional, ignored)

Lines are case-insensitive and normalized to lower case; '*' and ';' start
comments; '+' continues the previous line.  Nodes are created implicitly on
first reference (there is no node-declaration form; node 0 is ground).
Numeric suffixes t g meg k m u/µ n p f expand to SI scalars ("meg" is matched
before "m"); trailing unit letters after a suffix are ignored, as in classic
decks.  PMOS model cards store vth as a magnitude (>= 0) and the device
negates it internally; a negative vth is rejected with a clear error rather
than silently accepted with classic semantics.

emit() produces a canonical form (models, subcircuits, devices, analyses;
single spaces; params sorted) such that emit(parse(emit(parse(s)))) equals
emit(parse(s)) byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional


class NetlistError(Exception):
    """Base for all netlist-language failures; carries the source line."""

    def __init__(self, message: str, line_no: int = 0):
        super().__init__(f"line {line_no}: {message}" if line_no else message)
        self.line_no = line_no


class NetlistSyntaxError(NetlistError):
    pass


class DuplicateIdentifierError(NetlistError):
    pass


class ArityMismatchError(NetlistError):
    pass


class UnknownModelError(NetlistError):
    pass


class UnknownSubcircuitError(NetlistError):
    pass


class UnknownDeviceError(NetlistError):
    pass


class IllegalParamError(NetlistError):
    pass


# suffix table; "meg" must be tried before "m"
_SUFFIXES = [
    ("meg", 1e6),
    ("t", 1e12), ("g", 1e9), ("k", 1e3), ("m", 1e-3),
    ("u", 1e-6), ("µ", 1e-6), ("n", 1e-9), ("p", 1e-12), ("f", 1e-15),
]

_NUMBER_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)([a-zµ]*)$")


def parse_value(token: str, line_no: int = 0) -> float:
    """Expand a numeric token with optional SPICE suffix to an SI scalar."""
    m = _NUMBER_RE.match(token.lower())
    if not m:
        raise NetlistSyntaxError(f"bad numeric value {token!r}", line_no)
    base = float(m.group(1))
    tail = m.group(2)
    for suffix, scale in _SUFFIXES:
        if tail.startswith(suffix):
            return base * scale
    # no suffix: any tail is a unit annotation (v, ohm, hz, ...), ignored
    return base


def format_value(x: float) -> str:
    """Canonical numeric text; repr round-trips floats exactly."""
    return repr(float(x))


@dataclass(frozen=True)
class DeviceLine:
    kind: str           # one of R C L V I MOSFET Diode SubcktInstance
    id: str
    pins: tuple[str, ...]
    model: Optional[str] = None
    params: tuple[tuple[str, float], ...] = ()
    line_no: int = 0

    def param(self, name: str, default: Optional[float] = None) -> Optional[float]:
        for k, v in self.params:
            if k == name:
                return v
        return default

    def param_names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.params)


@dataclass(frozen=True)
class ModelCard:
    name: str
    kind: str           # nmos1 | pmos1 | diode
    vth: float = 1.0
    kp: float = 1e-4
    lambda_: float = 0.0
    is_sat: float = 1e-14

    def __post_init__(self) -> None:
        if self.kind in ("nmos1", "pmos1"):
            if self.kp <= 0:
                raise NetlistError(f"model {self.name}: kp must be > 0")
            if self.vth < 0:
                raise NetlistError(
                    f"model {self.name}: vth is a magnitude (>= 0); pmos negates internally")


@dataclass(frozen=True)
class AnalysisDirective:
    kind: str           # op | dc | tran | ac
    args: tuple[tuple[str, object], ...] = ()

    def arg(self, name: str):
        for k, v in self.args:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class Subcircuit:
    name: str
    pins: tuple[str, ...]
    body: "Netlist"


@dataclass(frozen=True)
class Netlist:
    devices: tuple[DeviceLine, ...] = ()
    subckts: tuple[Subcircuit, ...] = ()
    analyses: tuple[AnalysisDirective, ...] = ()
    models: tuple[ModelCard, ...] = ()

    def subckt(self, name: str) -> Optional[Subcircuit]:
        for s in self.subckts:
            if s.name == name:
                return s
        return None

    def model(self, name: str) -> Optional[ModelCard]:
        for m in self.models:
            if m.name == name:
                return m
        return None

    def device(self, dev_id: str) -> Optional[DeviceLine]:
        for d in self.devices:
            if d.id == dev_id.lower():
                return d
        return None

    def nodes(self) -> set[str]:
        return {p for d in self.devices for p in d.pins}


_KIND_BY_LETTER = {"r": "R", "c": "C", "l": "L", "v": "V", "i": "I",
                   "d": "Diode", "m": "MOSFET", "x": "SubcktInstance"}
_LEGAL_PARAMS = {
    "R": {"value"}, "C": {"value", "ic"}, "L": {"value"},
    "V": {"value", "ac", "sin_v0", "sin_va", "sin_freq"}, "I": {"value"},
    "MOSFET": {"w", "l"}, "Diode": set(), "SubcktInstance": set(),
}
_MODEL_KINDS = {"nmos": "nmos1", "pmos": "pmos1", "d": "diode"}


def _join_continuations(source: str) -> list[tuple[int, str]]:
    out: list[tuple[int, str]] = []
    for no, raw in enumerate(source.splitlines(), start=1):
        line = raw.split(";", 1)[0]
        stripped = line.strip()
        if not stripped or stripped.startswith("*"):
            continue
        if stripped.startswith("+"):
            if not out:
                raise NetlistSyntaxError("continuation with no previous line", no)
            prev_no, prev = out[-1]
            out[-1] = (prev_no, prev + " " + stripped[1:].strip())
        else:
            out.append((no, stripped))
    return out


def _parse_kv(tok: str, line_no: int) -> tuple[str, float]:
    key, _, val = tok.partition("=")
    if not val:
        raise NetlistSyntaxError(f"expected key=value, got {tok!r}", line_no)
    return key, parse_value(val, line_no)


def _parse_two_pin(kind: str, toks: list[str], no: int) -> DeviceLine:
    if len(toks) < 4:
        raise NetlistSyntaxError(f"{kind} line needs id, two nodes and a value", no)
    params = [("value", parse_value(toks[3], no))]
    for tok in toks[4:]:
        params.append(_parse_kv(tok, no))
    return DeviceLine(kind=kind, id=toks[0], pins=(toks[1], toks[2]),
                      params=tuple(params), line_no=no)


def _parse_source(kind: str, toks: list[str], no: int) -> DeviceLine:
    if len(toks) < 4:
        raise NetlistSyntaxError(f"{kind} source needs id, two nodes and a value", no)
    rest = toks[3:]
    params: list[tuple[str, float]] = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if tok == "dc":
            i += 1
            if i >= len(rest):
                raise NetlistSyntaxError("dc keyword needs a value", no)
            params.append(("value", parse_value(rest[i], no)))
        elif tok == "ac" and kind == "V":
            i += 1
            if i >= len(rest):
                raise NetlistSyntaxError("ac keyword needs a magnitude", no)
            params.append(("ac", parse_value(rest[i], no)))
        elif tok.startswith("sin(") and kind == "V":
            # sin(offset ampl freq) possibly split across tokens
            text = tok
            while not text.endswith(")"):
                i += 1
                if i >= len(rest):
                    raise NetlistSyntaxError("unterminated sin(...)", no)
                text += " " + rest[i]
            inner = text[4:-1].split()
            if len(inner) != 3:
                raise NetlistSyntaxError("sin() takes offset, amplitude, frequency", no)
            params.append(("sin_v0", parse_value(inner[0], no)))
            params.append(("sin_va", parse_value(inner[1], no)))
            params.append(("sin_freq", parse_value(inner[2], no)))
        else:
            params.append(("value", parse_value(tok, no)))
        i += 1
    names = [k for k, _ in params]
    if "value" not in names:
        # a pure sin source sits at its offset for DC purposes
        v0 = dict(params).get("sin_v0")
        if v0 is None:
            raise NetlistSyntaxError(f"{kind} source {toks[0]} has no value", no)
        params.append(("value", v0))
    return DeviceLine(kind=kind, id=toks[0], pins=(toks[1], toks[2]),
                      params=tuple(params), line_no=no)


def _parse_mosfet(toks: list[str], no: int) -> DeviceLine:
    if len(toks) < 6:
        raise NetlistSyntaxError("mosfet needs id, drain gate source body, model", no)
    params = [_parse_kv(t, no) for t in toks[6:]]
    for k, _ in params:
        if k not in ("w", "l"):
            raise NetlistSyntaxError(f"unknown mosfet param {k!r}", no)
    return DeviceLine(kind="MOSFET", id=toks[0], pins=tuple(toks[1:5]),
                      model=toks[5], params=tuple(params), line_no=no)


def _parse_diode(toks: list[str], no: int) -> DeviceLine:
    if len(toks) != 4:
        raise NetlistSyntaxError("diode needs id, two nodes and a model", no)
    return DeviceLine(kind="Diode", id=toks[0], pins=(toks[1], toks[2]),
                      model=toks[3], line_no=no)


def _parse_subckt_instance(toks: list[str], no: int) -> DeviceLine:
    if len(toks) < 3:
        raise NetlistSyntaxError("subcircuit instance needs nodes and a name", no)
    return DeviceLine(kind="SubcktInstance", id=toks[0], pins=tuple(toks[1:-1]),
                      model=toks[-1], line_no=no)


def _parse_model(toks: list[str], no: int) -> ModelCard:
    body = " ".join(toks[1:]).replace("(", " ").replace(")", " ")
    parts = body.split()
    if len(parts) < 2:
        raise NetlistSyntaxError(".model needs a name and a kind", no)
    name, kind_tok = parts[0], parts[1]
    if kind_tok not in _MODEL_KINDS:
        raise NetlistSyntaxError(f"unknown model kind {kind_tok!r}", no)
    fields = {"vth": 1.0, "kp": 1e-4, "lambda": 0.0, "is": 1e-14}
    for tok in parts[2:]:
        k, v = _parse_kv(tok, no)
        if k not in fields:
            raise NetlistSyntaxError(f"unknown model param {k!r}", no)
        fields[k] = v
    try:
        return ModelCard(name=name, kind=_MODEL_KINDS[kind_tok], vth=fields["vth"],
                         kp=fields["kp"], lambda_=fields["lambda"], is_sat=fields["is"])
    except NetlistError as exc:
        raise NetlistSyntaxError(str(exc), no) from exc


def _parse_directive(toks: list[str], no: int) -> Optional[AnalysisDirective]:
    word = toks[0]
    if word == ".op":
        return AnalysisDirective(kind="op")
    if word == ".dc":
        if len(toks) != 5:
            raise NetlistSyntaxError(".dc takes source, start, stop, step", no)
        return AnalysisDirective(kind="dc", args=(
            ("source", toks[1]), ("start", parse_value(toks[2], no)),
            ("stop", parse_value(toks[3], no)), ("step", parse_value(toks[4], no))))
    if word == ".tran":
        if len(toks) != 3:
            raise NetlistSyntaxError(".tran takes tstep, tstop", no)
        return AnalysisDirective(kind="tran", args=(
            ("tstep", parse_value(toks[1], no)), ("tstop", parse_value(toks[2], no))))
    if word == ".ac":
        if len(toks) != 5 or toks[1] != "dec":
            raise NetlistSyntaxError(".ac takes dec, points, fstart, fstop", no)
        return AnalysisDirective(kind="ac", args=(
            ("points", int(parse_value(toks[2], no))),
            ("fstart", parse_value(toks[3], no)), ("fstop", parse_value(toks[4], no))))
    if word == ".end":
        return None
    raise NetlistSyntaxError(f"unknown directive {word!r}", no)


def parse(source: str) -> Netlist:
    """Parse netlist text; raises a NetlistError subclass on any defect."""
    lines = _join_continuations(source.lower())

    def parse_scope(lines: list[tuple[int, str]], top: bool) -> Netlist:
        devices: list[DeviceLine] = []
        subckts: list[Subcircuit] = []
        analyses: list[AnalysisDirective] = []
        models: list[ModelCard] = []
        seen_ids: dict[str, int] = {}
        i = 0
        while i < len(lines):
            no, line = lines[i]
            toks = line.split()
            word = toks[0]
            if word == ".subckt":
                if not top:
                    raise NetlistSyntaxError("nested .subckt definitions are not supported", no)
                if len(toks) < 3:
                    raise NetlistSyntaxError(".subckt needs a name and at least one pin", no)
                name, pins = toks[1], tuple(toks[2:])
                depth, j = 1, i + 1
                while j < len(lines):
                    w = lines[j][1].split()[0]
                    if w == ".subckt":
                        depth += 1
                    elif w == ".ends":
                        depth -= 1
                        if depth == 0:
                            break
                    j += 1
                if j >= len(lines):
                    raise NetlistSyntaxError(f".subckt {name} has no matching .ends", no)
                if any(s.name == name for s in subckts):
                    raise DuplicateIdentifierError(f"subcircuit {name!r} defined twice", no)
                body = parse_scope(lines[i + 1:j], top=False)
                subckts.append(Subcircuit(name=name, pins=pins, body=body))
                i = j + 1
                continue
            if word == ".ends":
                raise NetlistSyntaxError(".ends without .subckt", no)
            if word == ".model":
                if not top:
                    raise NetlistSyntaxError(".model cards belong at top level", no)
                if any(m.name == toks[1] for m in models):
                    raise DuplicateIdentifierError(f"model {toks[1]!r} defined twice", no)
                models.append(_parse_model(toks, no))
            elif word.startswith("."):
                d = _parse_directive(toks, no)
                if d is not None:
                    analyses.append(d)
            else:
                kind = _KIND_BY_LETTER.get(word[0])
                if kind is None:
                    raise NetlistSyntaxError(f"unknown device letter in {word!r}", no)
                if kind in ("R", "C", "L"):
                    dev = _parse_two_pin(kind, toks, no)
                elif kind in ("V", "I"):
                    dev = _parse_source(kind, toks, no)
                elif kind == "MOSFET":
                    dev = _parse_mosfet(toks, no)
                elif kind == "Diode":
                    dev = _parse_diode(toks, no)
                else:
                    dev = _parse_subckt_instance(toks, no)
                if dev.id in seen_ids:
                    raise DuplicateIdentifierError(
                        f"device {dev.id!r} already defined at line {seen_ids[dev.id]}", no)
                seen_ids[dev.id] = no
                devices.append(dev)
            i += 1
        return Netlist(devices=tuple(devices), subckts=tuple(subckts),
                       analyses=tuple(analyses), models=tuple(models))

    net = parse_scope(lines, top=True)

    # model references must resolve; instance arity must match known definitions
    def check_refs(scope: Netlist, defs: Netlist) -> None:
        for d in scope.devices:
            if d.kind in ("MOSFET", "Diode") and defs.model(d.model) is None:
                raise UnknownModelError(f"device {d.id!r} references unknown model {d.model!r}", d.line_no)
            if d.kind == "MOSFET" and defs.model(d.model).kind not in ("nmos1", "pmos1"):
                raise UnknownModelError(f"device {d.id!r} needs a mos model", d.line_no)
            if d.kind == "Diode" and defs.model(d.model).kind != "diode":
                raise UnknownModelError(f"device {d.id!r} needs a diode model", d.line_no)
            if d.kind == "SubcktInstance":
                sub = defs.subckt(d.model)
                if sub is not None and len(sub.pins) != len(d.pins):
                    raise ArityMismatchError(
                        f"instance {d.id!r} has {len(d.pins)} pins, "
                        f"subcircuit {d.model!r} declares {len(sub.pins)}", d.line_no)
        for s in scope.subckts:
            check_refs(s.body, defs)

    check_refs(net, net)
    return net


def emit(n: Netlist) -> str:
    """Canonical text form; parse(emit(n)) is structurally identical to n."""
    out: list[str] = []
    for m in n.models:
        kind = {"nmos1": "nmos", "pmos1": "pmos", "diode": "d"}[m.kind]
        out.append(f".model {m.name} {kind} vth={format_value(m.vth)} kp={format_value(m.kp)}"
                   f" lambda={format_value(m.lambda_)} is={format_value(m.is_sat)}")
    for s in n.subckts:
        out.append(f".subckt {s.name} {' '.join(s.pins)}")
        body = emit(s.body)
        out.extend("  " + line for line in body.splitlines() if line)
        out.append(".ends")
    for d in n.devices:
        parts = [d.id, *d.pins]
        if d.kind in ("R", "C", "L", "V", "I"):
            parts.append(format_value(d.param("value")))
            extras = sorted((k, v) for k, v in d.params if k != "value")
            if d.kind == "V" and any(k.startswith("sin_") for k, _ in extras):
                sin = dict(extras)
                parts.append(f"sin({format_value(sin['sin_v0'])} "
                             f"{format_value(sin['sin_va'])} {format_value(sin['sin_freq'])})")
                extras = [(k, v) for k, v in extras if not k.startswith("sin_")]
            for k, v in extras:
                if k == "ac":
                    parts.append(f"ac {format_value(v)}")
                else:
                    parts.append(f"{k}={format_value(v)}")
        elif d.kind in ("MOSFET", "Diode"):
            parts.append(d.model)
            for k, v in sorted(d.params):
                parts.append(f"{k}={format_value(v)}")
        else:
            parts.append(d.model)
        out.append(" ".join(parts))
    for a in n.analyses:
        if a.kind == "op":
            out.append(".op")
        elif a.kind == "dc":
            out.append(f".dc {a.arg('source')} {format_value(a.arg('start'))} "
                       f"{format_value(a.arg('stop'))} {format_value(a.arg('step'))}")
        elif a.kind == "tran":
            out.append(f".tran {format_value(a.arg('tstep'))} {format_value(a.arg('tstop'))}")
        elif a.kind == "ac":
            out.append(f".ac dec {a.arg('points')} {format_value(a.arg('fstart'))} "
                       f"{format_value(a.arg('fstop'))}")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class ParamPatch:
    device_id: str
    param: str
    value: float


def apply_patch(n: Netlist, patch: ParamPatch) -> Netlist:
    """Return a new netlist differing only in one device parameter."""
    dev_id = patch.device_id.lower()
    param = patch.param.lower()
    target = n.device(dev_id)
    if target is None:
        raise UnknownDeviceError(f"no device {patch.device_id!r} at top level")
    if param not in _LEGAL_PARAMS[target.kind]:
        raise IllegalParamError(f"{param!r} is not a parameter of {target.kind} devices")
    params = dict(target.params)
    params[param] = float(patch.value)
    new_dev = replace(target, params=tuple(sorted(params.items())))
    devices = tuple(new_dev if d.id == dev_id else d for d in n.devices)
    return replace(n, devices=devices)


def flatten(n: Netlist) -> Netlist:
    """Expand subcircuit instances; internal names get an 'xid.' prefix and
    pins map onto the instance's connection nodes.  Models are global."""

    def expand(devices: tuple[DeviceLine, ...], defs: Netlist) -> list[DeviceLine]:
        out: list[DeviceLine] = []
        for d in devices:
            if d.kind != "SubcktInstance":
                out.append(d)
                continue
            sub = defs.subckt(d.model)
            if sub is None:
                raise UnknownSubcircuitError(
                    f"instance {d.id!r} references undefined subcircuit {d.model!r}", d.line_no)
            pin_map = dict(zip(sub.pins, d.pins))
            for inner in expand(sub.body.devices, defs):
                pins = tuple(pin_map.get(p, p if p == "0" else f"{d.id}.{p}") for p in inner.pins)
                out.append(replace(inner, id=f"{d.id}.{inner.id}", pins=pins))
        return out

    return replace(n, devices=tuple(expand(n.devices, n)), subckts=())


def check_structure(n: Netlist, omega) -> list:
    """Structural rule check; the catalog lives in checks.py."""
    from .checks import check_structure as _check
    return _check(n, omega)
