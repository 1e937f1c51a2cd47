"""Grid value iteration for the two-speed actuator.

The state plane is sampled on a regular ``n_x`` by ``n_v`` grid, the torque
on an odd ladder of ``n_u1`` levels, and each backup advances the model by
one RK4 step of ``dt`` with the action held. The cost-to-go between grid
nodes is bilinear.

Two absorbing states close the problem:

* the target box around the origin, worth ``target_cost``;
* the out-of-bound state, worth ``out_of_bound_cost``. An action goes there
  when its successor leaves the domain or when the bilinear stencil of the
  successor rests on a non-viable cell.

Solving runs in two passes. The viability pass shrinks the set of cells
that have at least one action keeping them in the domain (or reaching the
target) until it stops changing; the complement is the "no solution" region.
The value pass then starts every viable non-target cell at
``out_of_bound_cost`` and iterates down to the fixed point. Starting from
above keeps zero-cost loops (coasting under the energy cost, resting in
place) from passing as solutions.
"""

from __future__ import annotations

import contextlib
import math
import os
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import (
    ActuatorParams,
    ControlInput,
    CostKind,
    CostWeights,
    Mode,
    State,
    open_loop_rhs,
    reflected_params,
    rk4,
    stage_cost,
    step,
)

# The sweeps are plain row-parallel loops; the portable workqueue layer is
# enough and avoids probing for TBB/OpenMP at first use.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

# Bilinear weights at or below this are treated as zero: a successor sitting
# on a grid line does not depend on the far side of that line.
STENCIL_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    n_x: int
    n_v: int
    n_u1: int
    dt: float
    x_min: float
    x_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.n_x < 2 or self.n_v < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if self.n_u1 < 2 or self.n_u1 % 2 == 0:
            raise ValueError(f"n_u1 must be odd and >= 3 so that u1 = 0 is a level, got {self.n_u1}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.x_min < self.x_max and self.v_min < self.v_max):
            raise ValueError("empty grid bounds")

    @classmethod
    def from_params(cls, params: ActuatorParams, n_x: int, n_v: int, n_u1: int,
                    dt: float = 0.02) -> "GridSpec":
        return cls(n_x, n_v, n_u1, dt, params.x_min, params.x_max, params.v_min, params.v_max)

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def v_nodes(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_v)

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def hv(self) -> float:
        return (self.v_max - self.v_min) / (self.n_v - 1)

    def torque_levels(self, params: ActuatorParams) -> np.ndarray:
        levels = np.linspace(-params.u1_max, params.u1_max, self.n_u1)
        levels[self.n_u1 // 2] = 0.0
        return levels


@dataclass(frozen=True)
class TerminationSpec:
    target_half_width_x: float = 0.003
    target_half_width_v: float = 0.010
    out_of_bound_cost: float = 1e6
    target_cost: float = 0.0

    def __post_init__(self):
        if not (self.target_half_width_x > 0 and self.target_half_width_v > 0):
            raise ValueError("target half-widths must be positive")
        if not self.out_of_bound_cost > self.target_cost:
            raise ValueError("out_of_bound_cost must exceed target_cost")

    def check_grid(self, spec: GridSpec) -> None:
        if self.target_half_width_x < spec.hx or self.target_half_width_v < spec.hv:
            raise ValueError(
                "target box must be at least one grid cell wide "
                f"(hx={spec.hx:g}, hv={spec.hv:g})")

    def contains(self, x, v):
        # slack so that nodes placed on the box edge by linspace count as inside
        return ((np.abs(x) <= self.target_half_width_x * (1 + 1e-9))
                & (np.abs(v) <= self.target_half_width_v * (1 + 1e-9)))


@dataclass
class ValueTable:
    values: np.ndarray     # inf where no solution
    feasible: np.ndarray
    terminal: np.ndarray
    viable: np.ndarray | None = None

    def __post_init__(self):
        if self.viable is None:
            self.viable = self.feasible.copy()


@dataclass
class PolicyTable:
    u1_star: np.ndarray    # nan where infeasible
    u2_star: np.ndarray    # int8, 0 where infeasible


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    wall_time: float
    converged: bool
    tol: float
    residuals: list = field(default_factory=list, repr=False)


class ConvergenceError(RuntimeError):
    def __init__(self, report: SolveReport):
        super().__init__(f"value iteration did not converge in {report.iterations} sweeps "
                         f"(residual {report.final_residual:g})")
        self.report = report


def _priority_key(level: float, mode: Mode):
    # smaller |u1| first, then mode 1, then negative torque
    return (abs(level), int(mode), level >= 0)


def action_ladder(spec: GridSpec, params: ActuatorParams) -> list[ControlInput]:
    """All torque/mode pairs in tie-break order."""
    acts = [(lvl, m) for m in (Mode.LOW, Mode.HIGH) for lvl in spec.torque_levels(params)]
    acts.sort(key=lambda a: _priority_key(*a))
    return [ControlInput(float(lvl), m) for lvl, m in acts]


def gate_allows(params: ActuatorParams, v: float, mode: Mode) -> bool:
    return mode == Mode.LOW or abs(v) <= params.v_gate


def admissible_actions(spec: GridSpec, params: ActuatorParams, state: State) -> list[ControlInput]:
    """Torque ladder times the modes the speed gate allows at ``state``.

    Above the gate speed only mode 1 remains (the high-ratio motor would
    overspeed).
    """
    return [a for a in action_ladder(spec, params) if gate_allows(params, state.v, a.u2)]


def hold_action(params: ActuatorParams, v: float) -> ControlInput:
    """Action stored on target cells: no torque, most damped mode allowed."""
    return ControlInput(0.0, Mode.HIGH if abs(v) <= params.v_gate else Mode.LOW)


def _stage_parts(weights: CostWeights, xs, vs, levels_a):
    """Split the stage cost into a state part and an action part."""
    if weights.kind == CostKind.MIN_TIME:
        return np.ones((xs.size, vs.size)), np.zeros(levels_a.size)
    if weights.kind == CostKind.MIN_ENERGY:
        return np.zeros((xs.size, vs.size)), levels_a ** 2
    X, V = np.meshgrid(xs, vs, indexing="ij")
    return weights.w1 * X ** 2 + weights.w2 * V ** 2, weights.w3 * levels_a ** 2


def _bilinear(values, viable, spec: GridSpec, x: float, v: float, oob: float) -> float:
    """Stencil value at (x, v), or ``oob`` if the stencil touches a non-viable cell."""
    fi = (x - spec.x_min) / spec.hx
    fj = (v - spec.v_min) / spec.hv
    i0 = min(max(int(math.floor(fi)), 0), spec.n_x - 2)
    j0 = min(max(int(math.floor(fj)), 0), spec.n_v - 2)
    wx, wv = fi - i0, fj - j0
    acc = wsum = 0.0
    for di, wi in ((0, 1 - wx), (1, wx)):
        for dj, wj in ((0, 1 - wv), (1, wv)):
            w = wi * wj
            if w <= STENCIL_EPS:
                continue
            if not viable[i0 + di, j0 + dj]:
                return oob
            val = values[i0 + di, j0 + dj]
            acc += w * (val if math.isfinite(val) else oob)
            wsum += w
    return acc / wsum


def _in_bounds(spec: GridSpec, x: float, v: float) -> bool:
    sx = 1e-12 * (spec.x_max - spec.x_min)
    sv = 1e-12 * (spec.v_max - spec.v_min)
    return (spec.x_min - sx <= x <= spec.x_max + sx) and (spec.v_min - sv <= v <= spec.v_max + sv)


def bellman_backup(value: ValueTable, cell: tuple[int, int], params: ActuatorParams,
                   weights: CostWeights, spec: GridSpec, term: TerminationSpec,
                   discount: float = 1.0) -> tuple[float, ControlInput | None]:
    """One backup at ``cell`` against ``value``; reference path for the sweep kernel.

    Cells of ``value`` that are viable but have no finite cost yet count as
    ``out_of_bound_cost``. Returns ``(inf, None)`` when no action scores
    below ``out_of_bound_cost``.
    """
    i, j = cell
    state = State(float(spec.x_nodes[i]), float(spec.v_nodes[j]))
    if value.terminal[i, j]:
        return term.target_cost, hold_action(params, state.v)
    oob = term.out_of_bound_cost
    best, best_act = oob, None
    if not value.viable[i, j]:
        return math.inf, None
    for act in admissible_actions(spec, params, state):
        nxt = step(params, state, act, spec.dt)
        g = stage_cost(weights, state, act) * spec.dt
        if not _in_bounds(spec, nxt.x, nxt.v):
            continue
        if term.contains(nxt.x, nxt.v):
            score = g + discount * term.target_cost
        else:
            nv = _bilinear(value.values, value.viable, spec, nxt.x, nxt.v, oob)
            score = g + discount * nv
        if score < best:
            best, best_act = score, act
    if best >= oob:
        return math.inf, None
    return best, best_act


@numba.njit(cache=True)
def _successor(i, j, a, xs, dxs, vns, x_min, hx, v_min, hv, n_x, n_v):
    """Successor of node (i, j) under action a, and its bilinear stencil."""
    vn = vns[j, a]
    xn = xs[i] + dxs[j, a]
    fi = (xn - x_min) / hx
    fj = (vn - v_min) / hv
    i0 = min(max(int(math.floor(fi)), 0), n_x - 2)
    j0 = min(max(int(math.floor(fj)), 0), n_v - 2)
    return xn, vn, i0, j0, fi - i0, fj - j0


@numba.njit(cache=True, parallel=True)
def _viability_sweep(viable, out, terminal, xs, dxs, vns, allowed,
                     x_min, hx, v_min, hv, thx, thv, eps):
    n_x, n_v = viable.shape
    n_a = dxs.shape[1]
    sx = 1e-12 * hx * (n_x - 1)
    sv = 1e-12 * hv * (n_v - 1)
    x_hi = x_min + hx * (n_x - 1)
    v_hi = v_min + hv * (n_v - 1)
    for j in numba.prange(n_v):
        for i in range(n_x):
            if terminal[i, j]:
                out[i, j] = True
                continue
            if not viable[i, j]:
                out[i, j] = False
                continue
            ok = False
            for a in range(n_a):
                if not allowed[j, a]:
                    continue
                xn, vn, i0, j0, wx, wv = _successor(i, j, a, xs, dxs, vns, x_min, hx,
                                                    v_min, hv, n_x, n_v)
                if xn < x_min - sx or xn > x_hi + sx or vn < v_min - sv or vn > v_hi + sv:
                    continue
                if abs(xn) <= thx and abs(vn) <= thv:
                    ok = True
                    break
                good = True
                for di in range(2):
                    wi = wx if di == 1 else 1.0 - wx
                    for dj in range(2):
                        wj = wv if dj == 1 else 1.0 - wv
                        if wi * wj > eps and not viable[i0 + di, j0 + dj]:
                            good = False
                if good:
                    ok = True
                    break
            out[i, j] = ok


@numba.njit(cache=True, parallel=True)
def _sweep(V, Vn, act_out, viable, terminal, hold_idx, xs, dxs, vns, allowed,
           cost_xv, cost_u, x_min, hx, v_min, hv, thx, thv,
           oob, target_cost, discount, eps):
    # Arrays are stored velocity-major (V[j, i]) so the inner loop over
    # positions is contiguous. A fixed action moves every node of a velocity
    # row by the same offset, so the stencil weights are hoisted out of it.
    # Rows only read V, so they are independent and split across threads.
    n_v, n_x = V.shape
    n_a = cost_u.shape[0]
    sv = 1e-12 * hv * (n_v - 1)
    v_hi = v_min + hv * (n_v - 1)
    tol_i = 1e-12 * (n_x - 1)
    for j in numba.prange(n_v):
        best = np.empty(n_x)
        best_a = np.empty(n_x, dtype=np.int64)
        for i in range(n_x):
            best[i] = oob
            best_a[i] = -1
        for a in range(n_a):
            if not allowed[j, a]:
                continue
            vn = vns[j, a]
            if vn < v_min - sv or vn > v_hi + sv:
                continue
            fj = (vn - v_min) / hv
            j0 = min(max(int(math.floor(fj)), 0), n_v - 2)
            wv = fj - j0
            v_in_target = abs(vn) <= thv
            shift = dxs[j, a] / hx
            ishift = int(math.floor(shift))
            wx = shift - ishift
            ca = cost_u[a]
            for i in range(n_x):
                if not viable[j, i] or terminal[j, i]:
                    continue
                fi = i + shift
                if fi < -tol_i or fi > n_x - 1 + tol_i:
                    continue
                g = cost_xv[j, i] + ca
                if v_in_target and abs(xs[i] + dxs[j, a]) <= thx:
                    score = g + discount * target_cost
                else:
                    i0 = i + ishift
                    w_x = wx
                    if i0 < 0:
                        w_x = fi
                        i0 = 0
                    elif i0 > n_x - 2:
                        w_x = fi - (n_x - 2)
                        i0 = n_x - 2
                    acc = 0.0
                    wsum = 0.0
                    dead = False
                    for dj in range(2):
                        wj = wv if dj == 1 else 1.0 - wv
                        for di in range(2):
                            wi = w_x if di == 1 else 1.0 - w_x
                            w = wi * wj
                            if w <= eps:
                                continue
                            if not viable[j0 + dj, i0 + di]:
                                dead = True
                            acc += w * V[j0 + dj, i0 + di]
                            wsum += w
                    if dead:
                        continue
                    score = g + discount * (acc / wsum)
                if score < best[i]:
                    best[i] = score
                    best_a[i] = a
        for i in range(n_x):
            if terminal[j, i]:
                Vn[j, i] = target_cost
                act_out[j, i] = hold_idx[j]
            else:
                Vn[j, i] = best[i]
                act_out[j, i] = best_a[i]


class _Problem:
    """Per-solve precomputation shared by all sweeps."""

    def __init__(self, params, weights, spec, term, discount):
        term.check_grid(spec)
        if not 0 < discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        self.params, self.weights, self.spec, self.term = params, weights, spec, term
        self.discount = discount
        self.actions = action_ladder(spec, params)
        xs, vs = spec.x_nodes, spec.v_nodes
        self.xs, self.vs = xs, vs
        levels = np.array([a.u1 for a in self.actions])
        modes = np.array([int(a.u2) for a in self.actions])
        self.levels, self.modes = levels, modes
        n_a = len(self.actions)
        self.dxs = np.empty((vs.size, n_a))
        self.vns = np.empty((vs.size, n_a))
        # dynamics do not depend on x, so a successor is a column shift
        for a, act in enumerate(self.actions):
            m_r, b_r = reflected_params(params, act.u2)
            rhs = open_loop_rhs(m_r, b_r, params.gain(act.u2) * act.u1)
            xn, vn = rk4(rhs, np.zeros_like(vs), vs, spec.dt)
            self.dxs[:, a] = xn
            self.vns[:, a] = vn
        self.allowed = (modes[None, :] == 1) | (np.abs(vs)[:, None] <= params.v_gate)
        cxv, cu = _stage_parts(weights, xs, vs, levels)
        self.cost_xv = np.ascontiguousarray(cxv * spec.dt)
        self.cost_u = cu * spec.dt
        X, Vg = np.meshgrid(xs, vs, indexing="ij")
        self.terminal = term.contains(X, Vg)
        hold = [hold_action(params, v) for v in vs]
        self.hold_idx = np.array([self.actions.index(h) for h in hold], dtype=np.int64)
        self.thx = term.target_half_width_x * (1 + 1e-9)
        self.thv = term.target_half_width_v * (1 + 1e-9)
        self.terminal_t = np.ascontiguousarray(self.terminal.T)
        self.cost_xv_t = np.ascontiguousarray(self.cost_xv.T)

    def viability(self, max_iter: int):
        viable = np.ones((self.spec.n_x, self.spec.n_v), dtype=np.bool_)
        out = np.empty_like(viable)
        for it in range(1, max_iter + 1):
            _viability_sweep(viable, out, self.terminal, self.xs, self.dxs, self.vns,
                             self.allowed, self.spec.x_min, self.spec.hx, self.spec.v_min,
                             self.spec.hv, self.thx, self.thv, STENCIL_EPS)
            if np.array_equal(out, viable):
                return viable, it
            viable, out = out, viable
        return viable, max_iter

    def sweep(self, V, Vn, act, viable_t):
        """One Jacobi sweep on velocity-major arrays."""
        t = self.term
        _sweep(V, Vn, act, viable_t, self.terminal_t, self.hold_idx, self.xs, self.dxs,
               self.vns, self.allowed, self.cost_xv_t, self.cost_u,
               self.spec.x_min, self.spec.hx, self.spec.v_min, self.spec.hv,
               self.thx, self.thv, t.out_of_bound_cost, t.target_cost, self.discount,
               STENCIL_EPS)

    def initial_values(self):
        V = np.full((self.spec.n_v, self.spec.n_x), self.term.out_of_bound_cost)
        V[self.terminal_t] = self.term.target_cost
        return V

    def tables(self, V_t, act_t, viable):
        oob = self.term.out_of_bound_cost
        V, act = V_t.T, act_t.T
        feasible = viable & (V < oob)
        values = np.where(feasible, V, np.inf)
        ok = feasible & (act >= 0)
        u1 = np.where(ok, self.levels[np.maximum(act, 0)], np.nan)
        u2 = np.where(ok, self.modes[np.maximum(act, 0)], 0).astype(np.int8)
        return (ValueTable(values, feasible, self.terminal.copy(), viable.copy()),
                PolicyTable(u1, u2))


@contextlib.contextmanager
def worker_threads(workers: int | None):
    """Run the enclosed sweeps on ``workers`` threads (capped at what numba allows)."""
    if workers is None:
        yield
        return
    if workers < 1:
        raise ValueError("workers must be >= 1")
    old = numba.get_num_threads()
    numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))
    try:
        yield
    finally:
        numba.set_num_threads(old)


def value_iteration(params: ActuatorParams, weights: CostWeights, spec: GridSpec,
                    term: TerminationSpec, tol: float = 1e-6, max_iter: int = 5000,
                    discount: float = 1.0, raise_on_failure: bool = False,
                    progress=None, workers: int | None = None):
    """Synchronous value iteration to a fixed point.

    Stops when the set of cells with a finite cost is unchanged and the
    largest cell-wise change is below ``tol`` times the largest finite
    cost-to-go. Returns ``(ValueTable, PolicyTable, SolveReport)``; a run
    that hits ``max_iter`` has ``report.converged == False`` unless
    ``raise_on_failure`` is set. Results do not depend on ``workers``.
    """
    with worker_threads(workers):
        return _value_iteration(params, weights, spec, term, tol, max_iter, discount,
                                raise_on_failure, progress)


def _value_iteration(params, weights, spec, term, tol, max_iter, discount,
                     raise_on_failure, progress):
    if not tol > 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    prob = _Problem(params, weights, spec, term, discount)
    oob = term.out_of_bound_cost
    viable, _ = prob.viability(max_iter)
    viable_t = np.ascontiguousarray(viable.T)
    V = prob.initial_values()
    Vn = np.empty_like(V)
    act = np.empty(V.shape, dtype=np.int64)
    residuals = []
    converged = False
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        prob.sweep(V, Vn, act, viable_t)
        live_old = V < oob
        live_new = Vn < oob
        both = live_old & live_new
        residual = float(np.max(np.abs(Vn[both] - V[both]))) if both.any() else 0.0
        changed = bool(np.any(live_old != live_new))
        scale = float(Vn[live_new].max()) if live_new.any() else 0.0
        residuals.append(residual)
        V, Vn = Vn, V
        if progress is not None:
            progress(it, residual, changed)
        if not changed and residual <= tol * scale:
            converged = True
            break
    report = SolveReport(it, residual, time.perf_counter() - t0, converged, tol, residuals)
    if not converged and raise_on_failure:
        raise ConvergenceError(report)
    value, policy = prob.tables(V, act, viable)
    return value, policy, report


def sweep_once(params, weights, spec, term, value: ValueTable, discount: float = 1.0):
    """Apply one synchronous backup to ``value``; returns the new tables."""
    prob = _Problem(params, weights, spec, term, discount)
    oob = term.out_of_bound_cost
    V = np.ascontiguousarray(np.where(np.isfinite(value.values), value.values, oob).T)
    Vn = np.empty_like(V)
    act = np.empty(V.shape, dtype=np.int64)
    prob.sweep(V, Vn, act, np.ascontiguousarray(value.viable.T))
    return prob.tables(Vn, act, value.viable)


class InfeasibleStateError(ValueError):
    pass


def policy_lookup(policy: PolicyTable, spec: GridSpec, state: State,
                  params: ActuatorParams) -> ControlInput:
    """Evaluate a tabular policy at an off-grid state.

    The mode comes from the nearest solvable node of the enclosing cell; the
    torque is the bilinear blend of the enclosing nodes that share that mode.
    """
    if not _in_bounds(spec, state.x, state.v):
        raise InfeasibleStateError(f"state ({state.x:g}, {state.v:g}) outside the grid")
    fi = (state.x - spec.x_min) / spec.hx
    fj = (state.v - spec.v_min) / spec.hv
    i0 = min(max(int(math.floor(fi)), 0), spec.n_x - 2)
    j0 = min(max(int(math.floor(fj)), 0), spec.n_v - 2)
    wx, wv = fi - i0, fj - j0
    corners = []
    for di, wi in ((0, 1 - wx), (1, wx)):
        for dj, wj in ((0, 1 - wv), (1, wv)):
            i, j = i0 + di, j0 + dj
            dist = (fi - i) ** 2 + (fj - j) ** 2
            corners.append((dist, i, j, wi * wj))
    corners.sort(key=lambda c: c[0])
    live = [c for c in corners if policy.u2_star[c[1], c[2]] != 0]
    if not live:
        raise InfeasibleStateError(f"no solution near ({state.x:g}, {state.v:g})")
    mode = Mode(int(policy.u2_star[live[0][1], live[0][2]]))
    if not gate_allows(params, state.v, mode):
        mode = Mode.LOW
    same = [c for c in live if policy.u2_star[c[1], c[2]] == mode]
    if not same:
        # gate forced mode 1 but no enclosing node uses it; any live torque will do
        same = live
    wsum = sum(c[3] for c in same)
    if wsum > STENCIL_EPS:
        u1 = sum(c[3] * policy.u1_star[c[1], c[2]] for c in same) / wsum
    else:
        u1 = float(policy.u1_star[same[0][1], same[0][2]])
    u1 = min(max(u1, -params.u1_max), params.u1_max)
    return ControlInput(float(u1), mode)
