"""Structural rule catalog: every rule firing, clean netlists passing."""

import pytest

from circuitloop.checks import CATALOG, check_structure, registered_rules
from circuitloop.model import ConstraintSet
from circuitloop.netlist import parse

from conftest import CS_AMP, DIVIDER


def _violations(src, **kw):
    return check_structure(parse(src), ConstraintSet(**kw))


def test_catalog_is_fixed_and_registered():
    assert CATALOG == (
        "unique-ids", "required-node", "nmos-bulk-tie", "pmos-bulk-tie",
        "subckt-undefined", "subckt-pin-order", "dc-path-to-reference",
        "required-analyses")
    assert set(registered_rules()) == set(CATALOG)


def test_clean_netlists_have_no_violations():
    assert _violations(DIVIDER) == ()
    assert _violations(CS_AMP, required_node_names=("out",),
                       simulator_settings=("dc",)) == ()


def test_unknown_extra_rule_rejected():
    with pytest.raises(ValueError):
        _violations(DIVIDER, naming_rules=("no-such-rule",))


def test_required_node():
    vs = _violations(DIVIDER, required_node_names=("out",))
    assert [v.rule_id for v in vs] == ["required-node"]
    assert "'out'" in vs[0].message


def test_unique_ids_across_scopes():
    # same id in different subcircuit scopes is legal
    src = """\
.subckt cell a b
r1 a b 1k
.ends
x1 in 0 cell
x2 in 0 cell
r1 in 0 1k
v1 in 0 1
.end
"""
    assert _violations(src) == ()


def test_nmos_bulk_tie():
    src = CS_AMP.replace("mn out in 0 0 mn1", "mn out in 0 vdd mn1")
    vs = _violations(src)
    assert [v.rule_id for v in vs] == ["nmos-bulk-tie"]
    assert "'mn'" in vs[0].message


def test_pmos_bulk_tie_requires_vdd():
    src = """\
vdd vdd 0 5
vin in 0 2.5
mp out in vdd 0 mp1 w=40u l=1u
mn out in 0 0 mn1 w=20u l=1u
.model mn1 nmos kp=100u vth=1.0
.model mp1 pmos kp=50u vth=1.0
.end
"""
    vs = _violations(src)
    assert [v.rule_id for v in vs] == ["pmos-bulk-tie"]
    assert "'mp'" in vs[0].message
    assert _violations(src.replace("mp out in vdd 0", "mp out in vdd vdd")) == ()


def test_subckt_pin_order():
    src = """\
.subckt opamp inp inn vout
r1 inp vout 1k
r2 inn vout 1k
.ends
x1 a b c opamp
v1 a 0 1
v2 b 0 1
.end
"""
    ok = _violations(src, required_subcircuit_pins=(("opamp", ("inp", "inn", "vout")),))
    assert ok == ()
    bad = _violations(src, required_subcircuit_pins=(("opamp", ("inn", "inp", "vout")),))
    assert [v.rule_id for v in bad] == ["subckt-pin-order"]
    missing = _violations(src, required_subcircuit_pins=(("buffer", ("a", "b")),))
    assert [v.rule_id for v in missing] == ["subckt-pin-order"]


def test_dc_path_to_reference():
    src = """\
v1 in 0 5
r1 in a 1k
r2 a 0 1k
r3 b c 1k
.end
"""
    vs = _violations(src)
    assert [v.rule_id for v in vs] == ["dc-path-to-reference"] * 2
    # one violation per unreachable node, sorted by name
    assert "'b'" in vs[0].message and "'c'" in vs[1].message


def test_capacitor_is_not_a_dc_path():
    src = "v1 in 0 5\nc1 in out 1u\nr1 out 0 1k\n.end\n"
    # out reaches 0 through r1; in reaches 0 through v1; all fine
    assert _violations(src) == ()
    floating = "v1 in 0 5\nr1 in mid 1k\nc1 mid out 1u\nr0 mid 0 1k\n.end\n"
    vs = _violations(floating)
    assert [v.rule_id for v in vs] == ["dc-path-to-reference"]
    assert "'out'" in vs[0].message


def test_required_analyses_presence_and_targets():
    vs = _violations(DIVIDER, simulator_settings=("dc",))
    assert [v.rule_id for v in vs] == ["required-analyses"]
    # .dc naming a missing source is a structural failure, not a crash
    src = DIVIDER.replace(".end", ".dc vx 0 5 0.5\n.end")
    vs = _violations(src, simulator_settings=("dc",))
    assert [v.rule_id for v in vs] == ["required-analyses"]
    assert "'vx'" in vs[0].message
    good = DIVIDER.replace(".end", ".dc v1 0 5 0.5\n.end")
    assert _violations(good, simulator_settings=("dc",)) == ()


def test_required_ac_needs_a_driven_source():
    src = "v1 in 0 5\nr1 in out 1k\nc1 out 0 1u\n.ac dec 10 1 1k\n.end\n"
    vs = _violations(src, simulator_settings=("ac",))
    assert [v.rule_id for v in vs] == ["required-analyses"]
    driven = src.replace("v1 in 0 5", "v1 in 0 5 ac 1")
    assert _violations(driven, simulator_settings=("ac",)) == ()


def test_violations_keep_catalog_order():
    src = """\
vdd vdd 0 5
vin inx 0 2.5
mp out inx vdd 0 mp1 w=40u l=1u
c3 out b 1u
.model mp1 pmos kp=50u vth=1.0
.end
"""
    vs = _violations(src, required_node_names=("nope",))
    assert [v.rule_id for v in vs] == [
        "required-node", "pmos-bulk-tie", "dc-path-to-reference"]
