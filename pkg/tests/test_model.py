"""Domain types: outcomes, assertions, verdicts, difficulty tiers."""

import math

import pytest

from circuitloop.model import (AssertionKind, Diagnostic, Difficulty,
                               ExecutionOutcome, FrequencyResponse,
                               FunctionalAssertion, OperatingPoint,
                               REQUIRED_PARAMS, ResultBundle, Stage,
                               SweepCurve, TimeSeries, difficulty_for_id,
                               evaluate_assertion, pass_verdict)

from conftest import make_task


def _sweep(xs, ys, name="out"):
    return ResultBundle(sweeps=(("vin", SweepCurve(
        grid=tuple(xs), signals=((name, tuple(ys)),), holes=frozenset())),))


def test_difficulty_tiers():
    assert difficulty_for_id(1) is Difficulty.Easy
    assert difficulty_for_id(8) is Difficulty.Easy
    assert difficulty_for_id(9) is Difficulty.Medium
    assert difficulty_for_id(13) is Difficulty.Medium
    assert difficulty_for_id(14) is Difficulty.Hard
    assert difficulty_for_id(30) is Difficulty.Hard
    assert difficulty_for_id(31) is None


def test_task_rejects_wrong_tier():
    with pytest.raises(ValueError):
        make_task(task_id=1).__class__(
            task_id=1, task_type="amplifier", instruction="x",
            constraints=make_task().constraints,
            assertions=make_task().assertions, difficulty=Difficulty.Hard)


def test_program_error_forbids_measurements():
    with pytest.raises(ValueError):
        ExecutionOutcome(True, False, (), _sweep([0, 1], [0, 1]))
    # the legal shape: error with empty bundle
    out = ExecutionOutcome(True, False, (), ResultBundle())
    assert out.measurements.is_empty()


def test_required_params_complete():
    assert set(REQUIRED_PARAMS) == set(AssertionKind)


def test_gain_at_least():
    a = FunctionalAssertion(AssertionKind.GainAtLeast, "out",
                            (("min_gain", 5.0),), 0.05)
    steep = _sweep([0.0, 1.0, 2.0], [0.0, 0.1, 6.0])
    assert evaluate_assertion(a, steep).holds
    shallow = _sweep([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    r = evaluate_assertion(a, shallow)
    assert not r.holds and r.observed == pytest.approx(1.0)
    missing = ResultBundle()
    assert not evaluate_assertion(a, missing).holds


def test_output_switches_at_interpolates():
    a = FunctionalAssertion(AssertionKind.OutputSwitchesAt, "out",
                            (("input_value", 1.5),), 0.05)
    xs = [0.0, 1.0, 2.0, 3.0]
    ys = [5.0, 5.0, 0.0, 0.0]      # mid 2.5 crossed between 1.0 and 2.0
    r = evaluate_assertion(a, _sweep(xs, ys))
    assert r.holds and r.observed == pytest.approx(1.5)
    flat = evaluate_assertion(a, _sweep(xs, [2.0] * 4))
    assert not flat.holds and math.isnan(flat.observed)


def test_monotone_transfer_directions():
    inc = FunctionalAssertion(AssertionKind.MonotoneTransfer, "out",
                              (("direction", 1.0),), 0.05)
    dec = FunctionalAssertion(AssertionKind.MonotoneTransfer, "out",
                              (("direction", -1.0),), 0.05)
    rising = _sweep([0, 1, 2], [0.0, 1.0, 2.0])
    assert evaluate_assertion(inc, rising).holds
    assert not evaluate_assertion(dec, rising).holds
    # small backslide within tolerance of the swing still passes
    wobble = _sweep([0, 1, 2, 3], [0.0, 1.0, 0.99, 2.0])
    assert evaluate_assertion(inc, wobble).holds


def test_dc_value_near():
    a = FunctionalAssertion(AssertionKind.DCValueNear, "out",
                            (("target_v", 3.0),), 0.05)
    z = ResultBundle(operating_point=OperatingPoint(
        node_voltages=(("out", 3.1),), device_currents=()))
    assert evaluate_assertion(a, z).holds
    z2 = ResultBundle(operating_point=OperatingPoint(
        node_voltages=(("out", 3.2),), device_currents=()))
    assert not evaluate_assertion(a, z2).holds


def test_corner_frequency_near():
    # synthetic one-pole magnitude at fc = 100 Hz
    freqs = [10.0 * 10 ** (i / 20) for i in range(61)]
    mags = [-10 * math.log10(1 + (f / 100.0) ** 2) for f in freqs]
    z = ResultBundle(ac_responses=(("ac", FrequencyResponse(
        freqs=tuple(freqs), magnitude_db=(("out", tuple(mags)),),
        phase_deg=(("out", tuple(0.0 for _ in freqs)),))),))
    a = FunctionalAssertion(AssertionKind.CornerFrequencyNear, "out",
                            (("target_hz", 100.0),), 0.05)
    r = evaluate_assertion(a, z)
    assert r.holds and r.observed == pytest.approx(100.0, rel=0.02)


def test_oscillates_with_period_near():
    dt = 1e-9
    times = [i * dt for i in range(2000)]
    vals = [2.5 + 2.0 * math.sin(2 * math.pi * t / 50e-9) for t in times]
    z = ResultBundle(transients=(("tran", TimeSeries(
        times=tuple(times), signals=(("out", tuple(vals)),))),))
    a = FunctionalAssertion(AssertionKind.OscillatesWithPeriodNear, "out",
                            (("period_s", 50e-9),), 0.05)
    r = evaluate_assertion(a, z)
    assert r.holds and r.observed == pytest.approx(50e-9, rel=0.01)
    flat = ResultBundle(transients=(("tran", TimeSeries(
        times=tuple(times), signals=(("out", tuple(2.5 for _ in times)),))),))
    assert not evaluate_assertion(a, flat).holds


def test_attenuation_in_band():
    freqs = (10.0, 100.0, 1000.0)
    z = ResultBundle(ac_responses=(("ac", FrequencyResponse(
        freqs=freqs, magnitude_db=(("out", (0.0, -3.0, -25.0)),),
        phase_deg=(("out", (0.0, 0.0, 0.0)),))),))
    a = FunctionalAssertion(AssertionKind.AttenuationInBand, "out",
                            (("f_hi_hz", 1000.0), ("f_lo_hz", 900.0),
                             ("min_db", 20.0)), 0.05)
    r = evaluate_assertion(a, z)
    assert r.holds and r.observed == pytest.approx(25.0)


def test_pass_verdict_conjunction(make=make_task):
    task = make()
    steep = _sweep([0.0, 1.0], [0.0, 10.0])
    ok = ExecutionOutcome(False, False, (), steep)
    assert pass_verdict(task, ok).passed
    sim_err = ExecutionOutcome(False, True, (), steep)
    assert not pass_verdict(task, sim_err).passed
    prog_err = ExecutionOutcome(True, False, (), ResultBundle())
    assert not pass_verdict(task, prog_err).passed
    shallow = ExecutionOutcome(False, False, (), _sweep([0.0, 1.0], [0.0, 0.5]))
    v = pass_verdict(task, shallow)
    assert not v.passed and len(v.failed_assertions) == 1


def test_diagnostic_line_is_tab_separated():
    d = Diagnostic(Stage.Functional, "assert-GainAtLeast:out", "max slope 1.0")
    assert d.to_line().split("\t") == [
        "Functional", "assert-GainAtLeast:out", "max slope 1.0", "-"]
