"""Shared fixtures: shipped data paths and small circuit/task builders."""

import pathlib

import pytest

from circuitloop.model import (AssertionKind, ConstraintSet, Difficulty,
                               FunctionalAssertion, TaskInstance)

PKG_ROOT = pathlib.Path(__file__).resolve().parents[1]
DATA = pathlib.Path(__file__).resolve().parent / "data"
SHIPPED = PKG_ROOT / "src" / "circuitloop" / "data"

DIVIDER = """\
* two-resistor divider
v1 in 0 5
r1 in mid 1k
r2 mid 0 1k
.end
"""

CS_AMP = """\
* common-source amplifier
vdd vdd 0 5
vin in 0 1.447
rd vdd out 5k
mn out in 0 0 mn1 w=50u l=1u
.model mn1 nmos kp=100u vth=1.0 lambda=0.0
.dc vin 0 5 0.05
.end
"""

RC_LOWPASS = """\
* first-order rc low-pass filter
vin in 0 0 ac 1
r1 in out 1k
c1 out 0 1u
.ac dec 20 1 10k
.end
"""

FLOATING_ISLAND = """\
* resistor island with no reference path
v1 in 0 5
r1 in a 1k
r2 a 0 1k
r3 b c 1k
.end
"""


@pytest.fixture
def tasks_dir():
    return SHIPPED / "tasks"

@pytest.fixture
def bench_script():
    return DATA / "bench.script"


def make_task(task_id=1, task_type="amplifier", assertions=None,
              nodes=("out",), analyses=("dc",), rules=(), subckts=()):
    """Minimal valid TaskInstance for tests that exercise machinery, not
    task semantics."""
    if assertions is None:
        assertions = (FunctionalAssertion(
            kind=AssertionKind.GainAtLeast, target_signal="out",
            parameters=(("min_gain", 5.0),), tolerance=0.05),)
    return TaskInstance(
        task_id=task_id, task_type=task_type,
        instruction="design the circuit",
        constraints=ConstraintSet(
            required_node_names=tuple(nodes),
            required_subcircuit_pins=tuple(subckts),
            simulator_settings=tuple(analyses),
            naming_rules=tuple(rules)),
        assertions=tuple(assertions),
        difficulty=Difficulty.Easy if task_id <= 8 else (
            Difficulty.Medium if task_id <= 13 else Difficulty.Hard))
