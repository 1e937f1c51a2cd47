import math
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from oracles import finite_horizon_dp, reflected, rk4_step
from twospeed.dp_solver import (ConvergenceError, GridSpec, InfeasibleStateError, PolicyTable,
                                TerminationSpec, ValueTable, _bilinear, admissible_actions,
                                bellman_backup, policy_lookup, sweep_once, value_iteration)
from twospeed.model import (DEFAULT_PARAMS, DEFAULT_QUADRATIC, ControlInput, CostKind,
                            CostWeights, Mode, State, stage_cost, step)

P = DEFAULT_PARAMS
KINDS = [DEFAULT_QUADRATIC, CostWeights(CostKind.MIN_TIME), CostWeights(CostKind.MIN_ENERGY)]


@pytest.fixture(scope="module")
def coarse():
    """101 x 101 solves of every cost kind with the default target box (one cell wide)."""
    spec = GridSpec.from_params(P, 101, 101, 11)
    term = TerminationSpec()
    return {w.kind: (spec, term, w) + value_iteration(P, w, spec, term) for w in KINDS}


# ------------------------------------------------------------------ actions

def test_action_counts_follow_speed_gate():
    spec = GridSpec.from_params(P, 11, 11, 51)
    assert len(admissible_actions(spec, P, State(0.0, 0.020))) == 102
    assert len(admissible_actions(spec, P, State(0.0, -0.020))) == 102
    fast = admissible_actions(spec, P, State(0.0, 0.0201))
    assert len(fast) == 51 and all(a.u2 == Mode.LOW for a in fast)


def test_three_level_ladder():
    spec = GridSpec.from_params(P, 11, 11, 3)
    assert sorted(spec.torque_levels(P)) == [-P.u1_max, 0.0, P.u1_max]


def test_even_ladder_rejected():
    with pytest.raises(ValueError):
        GridSpec.from_params(P, 11, 11, 50)


def test_target_box_must_cover_a_cell():
    spec = GridSpec.from_params(P, 11, 11, 5)
    with pytest.raises(ValueError):
        TerminationSpec().check_grid(spec)


# ------------------------------------------------------------------ backups

def _small_problem():
    # origin-asymmetric 3x3 grid so that only the top row and right column
    # lie outside a one-cell target box
    spec = GridSpec(3, 3, 3, 0.02, -0.01, 0.2, -0.02, 0.4)
    term = TerminationSpec(0.1051, 0.2101)
    rng = np.random.default_rng(3)
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    terminal = term.contains(X, V)
    values = np.where(terminal, 0.0, rng.uniform(0.5, 2.0, (3, 3)))
    return spec, term, ValueTable(values, np.ones((3, 3), bool), terminal, np.ones((3, 3), bool))


def _enumerate(spec, term, value, cell, weights):
    """Score every action at ``cell`` by hand and return the best (score, u1, mode)."""
    xs, vs = spec.x_nodes, spec.v_nodes
    x, v = xs[cell[0]], vs[cell[1]]
    best = (math.inf, None, None)
    for u in (-P.u1_max, 0.0, P.u1_max):
        for mode in (1, 2):
            if mode == 2 and abs(v) > P.v_gate:
                continue
            m, b, g = reflected(P, mode)
            xn, vn = rk4_step(m, b, g * u, x, v, spec.dt)
            if not (spec.x_min <= xn <= spec.x_max and spec.v_min <= vn <= spec.v_max):
                continue
            cost = (weights.w1 * x * x + weights.w2 * v * v + weights.w3 * u * u) * spec.dt
            if abs(xn) <= term.target_half_width_x and abs(vn) <= term.target_half_width_v:
                total = cost
            else:
                fx = (xn - spec.x_min) / spec.hx
                fv = (vn - spec.v_min) / spec.hv
                i0, j0 = min(int(fx), 1), min(int(fv), 1)
                a, c = fx - i0, fv - j0
                vals = value.values
                interp = ((1 - a) * (1 - c) * vals[i0, j0] + a * (1 - c) * vals[i0 + 1, j0]
                          + (1 - a) * c * vals[i0, j0 + 1] + a * c * vals[i0 + 1, j0 + 1])
                total = cost + interp
            if total < best[0] - 1e-15:
                best = (total, u, mode)
    return best


def test_single_backup_matches_enumeration():
    spec, term, value = _small_problem()
    w = CostWeights(CostKind.QUADRATIC, 1.0, 1.0, 1.0)
    new_value, new_policy = sweep_once(P, w, spec, term, value)
    checked = 0
    for i in range(3):
        for j in range(3):
            if value.terminal[i, j]:
                assert new_value.values[i, j] == 0.0
                continue
            best, u, mode = _enumerate(spec, term, value, (i, j), w)
            ref, act = bellman_backup(value, (i, j), P, w, spec, term)
            if best == math.inf:
                assert not new_value.feasible[i, j] and act is None
                continue
            checked += 1
            assert new_value.values[i, j] == pytest.approx(best, rel=1e-12)
            assert ref == pytest.approx(best, rel=1e-12)
            assert (new_policy.u1_star[i, j], new_policy.u2_star[i, j]) == (u, mode)
            assert (act.u1, int(act.u2)) == (u, mode)
    assert checked >= 3


def test_backup_on_target_cell_is_zero():
    spec = GridSpec.from_params(P, 101, 101, 5)
    term = TerminationSpec()
    value = ValueTable(np.zeros((101, 101)), np.ones((101, 101), bool),
                       np.zeros((101, 101), bool), np.ones((101, 101), bool))
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    value.terminal[...] = term.contains(X, V)
    val, act = bellman_backup(value, (50, 50), P, DEFAULT_QUADRATIC, spec, term)
    assert val == 0.0 and act.u1 == 0.0


def test_corner_cell_with_every_action_leaving_is_infeasible(coarse):
    spec, term, w, value, policy, _ = coarse[CostKind.MIN_TIME]
    # at x = x_max moving outward at v_max no torque keeps the state inside
    assert not value.feasible[-1, -1]
    assert np.isinf(value.values[-1, -1]) and policy.u2_star[-1, -1] == 0
    val, act = bellman_backup(value, (100, 100), P, w, spec, term)
    assert val == math.inf and act is None


# ---------------------------------------------------------- value iteration

def test_target_only_grid_converges_in_one_sweep():
    spec = GridSpec(3, 3, 3, 0.02, -0.003, 0.003, -0.01, 0.01)
    value, policy, report = value_iteration(P, DEFAULT_QUADRATIC, spec,
                                            TerminationSpec(0.003, 0.01))
    assert report.converged and report.iterations == 1
    assert np.all(value.values == 0.0) and value.terminal.all()


@pytest.mark.parametrize("kind", ["min_time", "quadratic"])
def test_matches_finite_horizon_oracle(kind):
    spec = GridSpec.from_params(P, 21, 21, 5)
    term = TerminationSpec(0.015, 0.05)
    w = CostWeights(CostKind.MIN_TIME) if kind == "min_time" else DEFAULT_QUADRATIC
    value, _, report = value_iteration(P, w, spec, term, tol=1e-12)
    ref, viable, _ = finite_horizon_dp(P, kind, (w.w1, w.w2, w.w3), 21, 21, 5, spec.dt,
                                       0.015, 0.05, term.out_of_bound_cost)
    assert report.converged
    assert np.array_equal(value.viable, viable)
    assert np.array_equal(value.feasible, viable & (ref < term.out_of_bound_cost))
    f = value.feasible
    assert np.max(np.abs(value.values[f] - ref[f])) < 1e-6


def test_non_convergence_reported():
    spec = GridSpec.from_params(P, 41, 41, 5)
    term = TerminationSpec(0.0075, 0.025)
    _, _, report = value_iteration(P, DEFAULT_QUADRATIC, spec, term, max_iter=3)
    assert not report.converged and report.iterations == 3
    assert report.final_residual > report.tol
    with pytest.raises(ConvergenceError) as err:
        value_iteration(P, DEFAULT_QUADRATIC, spec, term, max_iter=3, raise_on_failure=True)
    assert err.value.report.iterations == 3


@pytest.mark.parametrize("kind", list(CostKind))
def test_solution_invariants(coarse, kind):
    spec, term, w, value, policy, report = coarse[kind]
    f = value.feasible
    assert report.converged
    assert report.final_residual <= report.tol * np.max(value.values[f])
    assert np.all(value.values[f] >= 0)
    assert np.max(value.values[f]) < term.out_of_bound_cost
    assert np.all(np.abs(policy.u1_star[f]) <= P.u1_max)
    V = np.broadcast_to(spec.v_nodes, f.shape)
    assert np.all(policy.u2_star[f & (np.abs(V) > P.v_gate)] == 1)
    assert np.all(np.isnan(policy.u1_star[~f])) and np.all(policy.u2_star[~f] == 0)


@pytest.mark.parametrize("kind", list(CostKind))
def test_residuals_eventually_non_increasing(coarse, kind):
    r = np.array(coarse[kind][-1].residuals)
    tail = r[len(r) // 2:]
    assert np.all(np.diff(tail) <= 1e-12 * tail[1:])


@pytest.mark.parametrize("kind", list(CostKind))
def test_bellman_consistency(coarse, kind):
    spec, term, w, value, policy, report = coarse[kind]
    again, _ = sweep_once(P, w, spec, term, value)
    f = value.feasible
    assert np.array_equal(again.feasible, f)
    assert np.max(np.abs(again.values[f] - value.values[f])) <= report.tol * np.max(value.values[f])


def _score(spec, term, w, value, cell, u1, mode):
    s = State(float(spec.x_nodes[cell[0]]), float(spec.v_nodes[cell[1]]))
    a = ControlInput(float(u1), Mode(int(mode)))
    nxt = step(P, s, a, spec.dt)
    g = stage_cost(w, s, a) * spec.dt
    if term.contains(nxt.x, nxt.v):
        return g
    return g + _bilinear(value.values, value.viable, spec, nxt.x, nxt.v, term.out_of_bound_cost)


@pytest.mark.parametrize("kind", list(CostKind))
def test_odd_symmetry(coarse, kind):
    spec, term, w, value, policy, _ = coarse[kind]
    f = value.feasible
    assert np.array_equal(f, f[::-1, ::-1])
    V = np.where(f, value.values, 0.0)
    assert np.allclose(V, V[::-1, ::-1], rtol=1e-12, atol=1e-14)
    u = np.where(f, policy.u1_star, 0.0)
    # where the mirrored choice differs it must score the same (a floating-point tie)
    for i, j in np.argwhere(f & ~value.terminal & (u != -u[::-1, ::-1])):
        mine = _score(spec, term, w, value, (i, j), policy.u1_star[i, j], policy.u2_star[i, j])
        mirror = _score(spec, term, w, value, (i, j), -policy.u1_star[-1 - i, -1 - j],
                        policy.u2_star[-1 - i, -1 - j])
        assert mirror == pytest.approx(mine, rel=1e-12, abs=1e-15)


def test_deterministic_rerun(coarse):
    spec, term, w, value, policy, _ = coarse[CostKind.QUADRATIC]
    value2, policy2, _ = value_iteration(P, w, spec, term)
    assert value.values.tobytes() == value2.values.tobytes()
    assert policy.u1_star.tobytes() == policy2.u1_star.tobytes()
    assert policy.u2_star.tobytes() == policy2.u2_star.tobytes()


_WORKER_SCRIPT = textwrap.dedent("""
    import hashlib, sys
    from twospeed.model import DEFAULT_PARAMS, DEFAULT_QUADRATIC
    from twospeed.dp_solver import GridSpec, TerminationSpec, value_iteration
    spec = GridSpec.from_params(DEFAULT_PARAMS, 61, 61, 7)
    value, policy, _ = value_iteration(DEFAULT_PARAMS, DEFAULT_QUADRATIC, spec,
                                       TerminationSpec(0.005, 0.0167), workers=int(sys.argv[1]))
    h = hashlib.sha256()
    for a in (value.values, policy.u1_star, policy.u2_star):
        h.update(a.tobytes())
    print(h.hexdigest())
""")


def test_worker_count_does_not_change_tables():
    env = {**os.environ, "NUMBA_NUM_THREADS": "3"}
    digests = {subprocess.run([sys.executable, "-c", _WORKER_SCRIPT, str(n)], env=env,
                              capture_output=True, text=True, check=True).stdout
               for n in (1, 3)}
    assert len(digests) == 1


# ------------------------------------------------------------------ lookup

def test_lookup_on_node_returns_stored_action(coarse):
    spec, term, w, value, policy, _ = coarse[CostKind.QUADRATIC]
    for i, j in [(10, 40), (70, 55), (50, 50), (30, 80)]:
        if not value.feasible[i, j]:
            continue
        act = policy_lookup(policy, spec, State(spec.x_nodes[i], spec.v_nodes[j]), P)
        assert act.u1 == policy.u1_star[i, j] and int(act.u2) == policy.u2_star[i, j]


def test_lookup_interpolates_constants():
    spec = GridSpec.from_params(P, 5, 5, 3)
    table = PolicyTable(np.full((5, 5), 0.007), np.ones((5, 5), np.int8))
    x = 0.5 * (spec.x_nodes[1] + spec.x_nodes[2])
    v = 0.5 * (spec.v_nodes[3] + spec.v_nodes[4])
    act = policy_lookup(table, spec, State(x, v), P)
    assert act.u1 == pytest.approx(0.007, rel=1e-15) and act.u2 == Mode.LOW


def test_lookup_enforces_gate_and_bounds():
    spec = GridSpec.from_params(P, 5, 5, 3)
    table = PolicyTable(np.full((5, 5), 0.05), np.full((5, 5), 2, np.int8))
    act = policy_lookup(table, spec, State(0.0, 0.3), P)
    assert act.u2 == Mode.LOW and act.u1 == P.u1_max
    with pytest.raises(InfeasibleStateError):
        policy_lookup(table, spec, State(0.2, 0.0), P)
    empty = PolicyTable(np.full((5, 5), np.nan), np.zeros((5, 5), np.int8))
    with pytest.raises(InfeasibleStateError):
        policy_lookup(empty, spec, State(0.0, 0.0), P)


def test_min_time_fast_region_is_bang_bang(coarse):
    spec, term, w, value, policy, _ = coarse[CostKind.MIN_TIME]
    # far from the switching curve: full torque toward the target
    for x, v in [(-0.1, 0.1), (0.1, -0.1), (-0.14, 0.25), (0.0731, -0.2467)]:
        act = policy_lookup(policy, spec, State(x, v), P)
        assert act.u2 == Mode.LOW and abs(act.u1) == P.u1_max
