import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import normal_equations
from twospeed.dp_solver import GridSpec, ValueTable
from twospeed.model import DEFAULT_PARAMS, Mode, State
from twospeed.policy_fit import (PiecewiseLinearLaw, PolicySample, RankDeficientError, distill,
                                 evaluate_law, fit_plane, segment_samples, tabulate_law)

LAW = PiecewiseLinearLaw(0.020, (0.05, 0.02), (0.09, 0.05), 0.02)


def _samples(x, v, u, mode=Mode.LOW):
    return [PolicySample(float(a), float(b), float(c), mode) for a, b, c in zip(x, v, u)]


def test_segmentation():
    g1, g2 = segment_samples([PolicySample(0.0, 0.020, 0.0, Mode.LOW)], 0.020)
    assert len(g1) == 1 and not g2
    g1, g2 = segment_samples([PolicySample(0.0, 0.0, 0.0, Mode.HIGH)], 0.020)
    assert not g1 and len(g2) == 1
    rng = np.random.default_rng(1)
    batch = _samples(rng.uniform(-1, 1, 50), rng.uniform(-0.05, 0.05, 50), np.zeros(50))
    g1, g2 = segment_samples(batch, 0.020)
    assert len(g1) + len(g2) == 50
    assert {id(s) for s in g1}.isdisjoint({id(s) for s in g2})
    with pytest.raises(ValueError):
        segment_samples([], 0.02)


def test_plane_recovered_exactly():
    rng = np.random.default_rng(2)
    x, v = rng.uniform(-0.1, 0.1, 40), rng.uniform(-0.3, 0.3, 40)
    a, b = fit_plane(_samples(x, v, 2 * x + 3 * v))
    assert a == pytest.approx(2, rel=1e-12) and b == pytest.approx(3, rel=1e-12)


def test_noisy_fit_matches_normal_equations():
    rng = np.random.default_rng(4)
    x, v = rng.uniform(-0.15, 0.15, 300), rng.uniform(-0.5, 0.5, 300)
    u = -0.07 * x - 0.03 * v + rng.normal(0, 0.002, 300)
    a, b = fit_plane(_samples(x, v, u))
    ra, rb = normal_equations(x, v, u)
    assert abs(a - ra) <= 1e-10 * max(1, abs(ra)) and abs(b - rb) <= 1e-10 * max(1, abs(rb))


def test_degenerate_designs_rejected():
    with pytest.raises(RankDeficientError):
        fit_plane(_samples(np.zeros(10), np.linspace(-1, 1, 10), np.ones(10)))
    with pytest.raises(RankDeficientError):
        fit_plane(_samples(np.linspace(-1, 1, 10), 2 * np.linspace(-1, 1, 10), np.ones(10)))
    with pytest.raises(RankDeficientError):
        fit_plane(_samples([0.1, 0.2], [0.3, -0.1], [0.0, 0.0]))


def test_saturated_samples_excluded():
    rng = np.random.default_rng(5)
    x, v = rng.uniform(-0.1, 0.1, 30), rng.uniform(-0.3, 0.3, 30)
    clean = _samples(x, v, x - v)
    junk = [PolicySample(0.1, 0.1, 5.0, Mode.LOW, saturated=True)] * 10
    assert fit_plane(clean + junk) == pytest.approx(fit_plane(clean), rel=1e-14)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_fit_is_least_squares(seed, da, db):
    rng = np.random.default_rng(seed)
    x, v = rng.uniform(-0.15, 0.15, 50), rng.uniform(-0.5, 0.5, 50)
    u = rng.uniform(-0.02, 0.02, 50)
    a, b = fit_plane(_samples(x, v, u))

    def sse(p, q):
        return float(np.sum((u - p * x - q * v) ** 2))
    assert sse(a, b) <= sse(a + da, b + db) * (1 + 1e-12)


def test_round_trip_through_table():
    spec = GridSpec.from_params(DEFAULT_PARAMS, 101, 101, 11)
    law = PiecewiseLinearLaw(0.020, (0.03, 0.01), (0.05, 0.02), 1.0)  # no clamp on the grid
    table = tabulate_law(law, spec)
    got, report = distill(table, spec, 0.020, DEFAULT_PARAMS)
    assert np.allclose(got.gains_1, law.gains_1, rtol=0, atol=1e-8)
    assert np.allclose(got.gains_2, law.gains_2, rtol=0, atol=1e-8)
    assert report.mode_agreement == 1.0 and max(report.rms) < 1e-12


def test_target_cells_left_out_when_value_given():
    spec = GridSpec.from_params(DEFAULT_PARAMS, 101, 101, 11)
    table = tabulate_law(PiecewiseLinearLaw(0.02, (0.03, 0.01), (0.05, 0.02), 1.0), spec)
    table.u1_star[50, 50] = 0.5                   # junk stored on a target cell
    terminal = np.zeros((101, 101), bool)
    terminal[50, 50] = True
    value = ValueTable(np.zeros((101, 101)), np.ones((101, 101), bool), terminal)
    got, _ = distill(table, spec, 0.020, DEFAULT_PARAMS, value)
    assert np.allclose(got.gains_2, (0.05, 0.02), atol=1e-8)


def test_law_evaluation_examples():
    act = evaluate_law(LAW, State(0.0, 0.0))
    assert act.u1 == 0.0 and act.u2 == Mode.HIGH
    assert evaluate_law(LAW, State(0.0, 0.020)).u2 == Mode.LOW
    assert evaluate_law(LAW, State(0.0, -0.020)).u2 == Mode.LOW
    assert evaluate_law(LAW, State(-10.0, 0.0)).u1 == LAW.u1_max
    assert evaluate_law(LAW, State(10.0, 0.0)).u1 == -LAW.u1_max
    # stabilizing sign: positive gains push back toward the origin
    assert evaluate_law(LAW, State(0.01, 0.0)).u1 == pytest.approx(-0.09 * 0.01)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_law_is_odd(x, v):
    a, b = evaluate_law(LAW, State(x, v)), evaluate_law(LAW, State(-x, -v))
    assert a.u1 == -b.u1 and a.u2 == b.u2


def test_law_serialization_round_trip():
    assert PiecewiseLinearLaw.from_dict(LAW.to_dict()) == LAW
    with pytest.raises(ValueError):
        PiecewiseLinearLaw(0.0, (1, 1), (1, 1), 0.02)
