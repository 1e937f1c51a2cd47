"""Closed-loop simulation under a tabular policy, a distilled law or a fixed input.

Controls are updated every ``dt_control`` and held in between (zero-order
hold); the plant is integrated with ``substeps`` RK4 steps per control
period and every substep is recorded. A law source can instead be run with
``feedback="continuous"``: the torque is then re-evaluated inside each RK
stage while the mode stays fixed over the substep. That is the closed loop
the energy argument is about.

A run ends early once the state has stayed in the target box for
``settle_steps`` consecutive control updates. The box is absorbing and
cost-free, so stage costs from the start of that final stay are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dp_solver import (GridSpec, InfeasibleStateError, PolicyTable, TerminationSpec,
                        policy_lookup)
from .model import (ActuatorParams, ControlInput, CostKind, CostWeights, Mode, State,
                    check_torque, reflected_params)
from .policy_fit import PiecewiseLinearLaw
from .stability import EnergyParams

SATURATION_RTOL = 1e-9


class SimulationError(RuntimeError):
    """A run that could not be completed; ``trajectory`` holds the part done."""

    def __init__(self, message: str, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.trajectory = trajectory


class BoundsExitError(SimulationError):
    def __init__(self, exit_time: float, trajectory: "Trajectory | None" = None):
        super().__init__(f"trajectory left the state bounds at t = {exit_time:.4f} s", trajectory)
        self.exit_time = exit_time


class InfeasibleLookupError(SimulationError):
    pass


# ---------------------------------------------------------------- sources

class PolicySource:
    """Maps states to actions. Subclasses implement :meth:`decide_batch`."""

    description = "policy"

    def decide_batch(self, params: ActuatorParams, x: np.ndarray, v: np.ndarray):
        """Return ``(u1, u2)`` arrays for a batch of states."""
        raise NotImplementedError

    def energy_params(self, params: ActuatorParams) -> EnergyParams | None:
        return None


@dataclass
class TabularSource(PolicySource):
    policy: PolicyTable
    spec: GridSpec

    @property
    def description(self) -> str:
        return f"tabular {self.spec.n_x}x{self.spec.n_v}"

    def decide_batch(self, params, x, v):
        u1 = np.empty(len(x))
        u2 = np.empty(len(x), dtype=np.int8)
        for k in range(len(x)):
            try:
                inp = policy_lookup(self.policy, self.spec, State(float(x[k]), float(v[k])), params)
            except InfeasibleStateError as exc:
                raise InfeasibleLookupError(str(exc)) from None
            u1[k], u2[k] = inp.u1, int(inp.u2)
        return u1, u2


@dataclass
class LawSource(PolicySource):
    law: PiecewiseLinearLaw

    @property
    def description(self) -> str:
        g1, g2 = self.law.gains_1, self.law.gains_2
        return (f"law threshold={self.law.threshold:g} gains_1=({g1[0]:g}, {g1[1]:g}) "
                f"gains_2=({g2[0]:g}, {g2[1]:g})")

    def modes(self, v):
        return np.where(np.abs(v) >= self.law.threshold, 1, 2).astype(np.int8)

    def torques(self, x, v, u2):
        kp = np.where(u2 == 1, self.law.gains_1[0], self.law.gains_2[0])
        kd = np.where(u2 == 1, self.law.gains_1[1], self.law.gains_2[1])
        return np.clip(-(kp * x + kd * v), -self.law.u1_max, self.law.u1_max)

    def decide_batch(self, params, x, v):
        u2 = self.modes(v)
        return self.torques(x, v, u2), u2

    def energy_params(self, params):
        return EnergyParams.from_law(params, self.law)


@dataclass
class ConstantSource(PolicySource):
    action: ControlInput

    @property
    def description(self) -> str:
        return f"constant u1={self.action.u1:g} u2={int(self.action.u2)}"

    def decide_batch(self, params, x, v):
        n = len(x)
        return np.full(n, float(self.action.u1)), np.full(n, int(self.action.u2), dtype=np.int8)


@dataclass
class CallableSource(PolicySource):
    """Wraps ``fn(state) -> ControlInput``, e.g. a user script."""

    fn: Callable[[State], ControlInput]
    description: str = "callable"

    def decide_batch(self, params, x, v):
        out = [self.fn(State(float(a), float(b))) for a, b in zip(x, v)]
        return (np.array([o.u1 for o in out], dtype=float),
                np.array([int(o.u2) for o in out], dtype=np.int8))


# ------------------------------------------------------------- trajectory

@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    stage_cost: np.ndarray
    energy: np.ndarray          # active-mode energy, nan without a law
    saturated: np.ndarray
    in_bounds: np.ndarray
    gate_ok: np.ndarray
    settled: bool = False
    settle_time: float = math.nan
    exit_time: float = math.nan
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("t", "x", "v", "u1", "u2", "stage_cost", "energy", "saturated", "in_bounds",
               "gate_ok")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def final_state(self) -> State:
        return State(float(self.x[-1]), float(self.v[-1]))

    def columns(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


def accumulated_cost(traj: Trajectory) -> float:
    """Trapezoidal integral of the recorded stage cost."""
    if len(traj) < 2:
        return 0.0
    g, t = traj.stage_cost, traj.t
    return float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(t)))


# ------------------------------------------------------------ integration

def _reflected(params: ActuatorParams):
    m1, b1 = reflected_params(params, Mode.LOW)
    m2, b2 = reflected_params(params, Mode.HIGH)
    return (np.array([0.0, m1, m2]), np.array([0.0, b1, b2]),
            np.array([0.0, params.gain(Mode.LOW), params.gain(Mode.HIGH)]))


def _stage_cost(weights: CostWeights, x, v, u1):
    if weights.kind == CostKind.MIN_TIME:
        return np.ones_like(x)
    if weights.kind == CostKind.MIN_ENERGY:
        return u1 ** 2
    return weights.w1 * x ** 2 + weights.w2 * v ** 2 + weights.w3 * u1 ** 2


def _substep(x, v, u1, u2, h, tables, torque_fn=None):
    """One RK4 step; ``torque_fn(x, v)`` replaces the held torque if given."""
    m, b, g = tables
    mi, bi, gi = m[u2], b[u2], g[u2]

    def acc(xs, vs):
        u = u1 if torque_fn is None else torque_fn(xs, vs)
        return (gi * u - bi * vs) / mi

    k1x, k1v = v, acc(x, v)
    k2x, k2v = v + 0.5 * h * k1v, acc(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = v + 0.5 * h * k2v, acc(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = v + h * k3v, acc(x + h * k3x, v + h * k3v)
    return (x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
            v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v))


def _in_bounds(params: ActuatorParams, x, v, slack: float = 1e-12):
    sx = slack * (params.x_max - params.x_min)
    sv = slack * (params.v_max - params.v_min)
    return ((x >= params.x_min - sx) & (x <= params.x_max + sx)
            & (v >= params.v_min - sv) & (v <= params.v_max + sv))


def _gate(params: ActuatorParams, v, u2):
    """Force mode 1 above the gate speed; returns the corrected modes."""
    return np.where(np.abs(v) > params.v_gate, 1, u2).astype(np.int8)


def simulate_batch(params: ActuatorParams, weights: CostWeights, source: PolicySource,
                   starts: Sequence[State], t_final: float, dt_control: float = 0.02,
                   substeps: int = 10, feedback: str = "zoh",
                   term: TerminationSpec | None = None, settle_steps: int = 5,
                   stop_on_settle: bool = True, enforce_bounds: bool = True,
                   energy_params: EnergyParams | None = None) -> list[Trajectory]:
    """Simulate several starts in lockstep.

    Runs that leave the bounds stop there and carry ``exit_time``; nothing is
    raised. See :func:`simulate` for the single-run variant that raises.
    """
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    if not dt_control > 0 or substeps < 1:
        raise ValueError("dt_control must be positive and substeps >= 1")
    if feedback not in ("zoh", "continuous"):
        raise ValueError(f"unknown feedback {feedback!r}")
    if feedback == "continuous" and not isinstance(source, LawSource):
        raise ValueError("continuous feedback needs a law source")
    term = term or TerminationSpec()
    ep = energy_params or source.energy_params(params)
    n = len(starts)
    x = np.array([s.x for s in starts], dtype=float)
    v = np.array([s.v for s in starts], dtype=float)
    if enforce_bounds and not np.all(_in_bounds(params, x, v)):
        bad = int(np.argmin(_in_bounds(params, x, v)))
        raise ValueError(f"start {starts[bad]} is outside the state bounds")

    tables = _reflected(params)
    h = dt_control / substeps
    n_ctrl = int(math.ceil(t_final / dt_control - 1e-9))
    cap = n_ctrl * substeps + 1
    rec = {c: np.full((cap, n), np.nan) for c in ("x", "v", "u1", "cost")}
    rec_u2 = np.zeros((cap, n), dtype=np.int8)
    rec_sat = np.zeros((cap, n), dtype=bool)
    rec_gate = np.ones((cap, n), dtype=bool)
    length = np.full(n, cap)
    active = np.ones(n, dtype=bool)
    run = np.zeros(n, dtype=int)          # consecutive control updates in the box
    run_start = np.zeros(n, dtype=int)    # record index where the current stay began
    settled = np.zeros(n, dtype=bool)
    settle_rec = np.full(n, -1)
    exit_time = np.full(n, np.nan)
    law = source if isinstance(source, LawSource) else None

    def record(r, idx, xs, vs, u1, u2, sat, gate_ok):
        rec["x"][r, idx], rec["v"][r, idx], rec["u1"][r, idx] = xs, vs, u1
        rec_u2[r, idx], rec_sat[r, idx], rec_gate[r, idx] = u2, sat, gate_ok
        rec["cost"][r, idx] = _stage_cost(weights, xs, vs, u1)

    def decide(idx, xs, vs):
        u1, u2 = source.decide_batch(params, xs, vs)
        u1 = np.asarray(u1, dtype=float)
        for val in u1:
            check_torque(params, float(val))
        gated = _gate(params, vs, np.asarray(u2, dtype=np.int8))
        gate_ok = gated == u2
        sat = np.abs(u1) >= params.u1_max * (1 - SATURATION_RTOL)
        return u1, gated, sat, gate_ok

    def settle_check(idx, r):
        inbox = term.contains(x[idx], v[idx])
        run[idx] = np.where(inbox, run[idx] + 1, 0)
        run_start[idx] = np.where(inbox & (run[idx] == 1), r, run_start[idx])
        newly = (run[idx] >= settle_steps) & ~settled[idx]
        settled[idx[newly]] = True
        settle_rec[idx[newly]] = run_start[idx[newly]]
        return idx[newly]

    rec["x"][0], rec["v"][0] = x, v
    r = 0
    for _ in range(n_ctrl):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        done = settle_check(idx, r)
        if stop_on_settle and done.size:
            length[done] = r + 1
            active[done] = False
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
        xs, vs = x[idx], v[idx]
        u1, u2, sat, gate_ok = decide(idx, xs, vs)
        for _ in range(substeps):
            if feedback == "continuous":
                u2 = _gate(params, vs, law.modes(vs))
                u1 = law.torques(xs, vs, u2)
                sat = np.abs(u1) >= params.u1_max * (1 - SATURATION_RTOL)
                record(r, idx, xs, vs, u1, u2, sat, gate_ok)
                xs, vs = _substep(xs, vs, u1, u2, h, tables,
                                  lambda a, b, m=u2: law.torques(a, b, m))
            else:
                record(r, idx, xs, vs, u1, u2, sat, gate_ok)
                xs, vs = _substep(xs, vs, u1, u2, h, tables)
            r += 1
            rec["x"][r, idx], rec["v"][r, idx] = xs, vs
            if enforce_bounds:
                out = ~_in_bounds(params, xs, vs)
                if out.any():
                    gone = idx[out]
                    exit_time[gone] = r * h
                    length[gone] = r + 1
                    active[gone] = False
                    keep = ~out
                    idx, xs, vs = idx[keep], xs[keep], vs[keep]
                    u1, u2, sat, gate_ok = u1[keep], u2[keep], sat[keep], gate_ok[keep]
                    if idx.size == 0:
                        break
        x[idx], v[idx] = xs, vs
    live = np.nonzero(active)[0]
    if live.size:
        settle_check(live, r)
        length[live] = r + 1
    # last record of every run: state plus the action it would take next
    trajs = []
    for q in range(n):
        L = int(length[q])
        last = L - 1
        xq, vq = rec["x"][last, q], rec["v"][last, q]
        if np.isnan(rec["u1"][last, q]):
            u1, u2, sat, gate_ok = _final_action(params, source, feedback, law, xq, vq)
            rec["u1"][last, q], rec_u2[last, q] = u1, u2
            rec_sat[last, q], rec_gate[last, q] = sat, gate_ok
            rec["cost"][last, q] = float(_stage_cost(weights, np.array([xq]), np.array([vq]),
                                                     np.array([u1]))[0])
        cost = rec["cost"][:L, q].copy()
        if settled[q]:
            cost[settle_rec[q]:] = 0.0
        tq = np.arange(L) * h
        xq_all, vq_all, u2q = rec["x"][:L, q], rec["v"][:L, q], rec_u2[:L, q]
        if ep is not None:
            mass = np.where(u2q == 1, ep.mass[0], ep.mass[1])
            stiff = np.where(u2q == 1, ep.stiffness[0], ep.stiffness[1])
            energy = 0.5 * mass * vq_all * vq_all + 0.5 * stiff * xq_all * xq_all
        else:
            energy = np.full(L, np.nan)
        trajs.append(Trajectory(
            t=tq, x=xq_all.copy(), v=vq_all.copy(), u1=rec["u1"][:L, q].copy(), u2=u2q.copy(),
            stage_cost=cost, energy=energy, saturated=rec_sat[:L, q].copy(),
            in_bounds=_in_bounds(params, xq_all, vq_all), gate_ok=rec_gate[:L, q].copy(),
            settled=bool(settled[q]),
            settle_time=float(settle_rec[q] * h) if settled[q] else math.nan,
            exit_time=float(exit_time[q]),
            metadata={"source": source.description, "weights": weights.kind.value,
                      "dt_control": dt_control, "substeps": substeps, "feedback": feedback},
        ))
    return trajs


def _final_action(params, source, feedback, law, x, v):
    xs, vs = np.array([x]), np.array([v])
    try:
        u1, u2 = source.decide_batch(params, xs, vs)
    except InfeasibleLookupError:
        return 0.0, 0, False, True
    gated = _gate(params, vs, np.asarray(u2, dtype=np.int8))
    u1 = float(np.asarray(u1)[0])
    return (u1, int(gated[0]), abs(u1) >= params.u1_max * (1 - SATURATION_RTOL),
            bool(gated[0] == np.asarray(u2)[0]))


def simulate(params: ActuatorParams, weights: CostWeights, source: PolicySource, start: State,
             t_final: float, dt_control: float = 0.02, substeps: int = 10,
             feedback: str = "zoh", term: TerminationSpec | None = None,
             settle_steps: int = 5, stop_on_settle: bool = True) -> Trajectory:
    """Simulate one run from ``start``.

    Raises :class:`BoundsExitError` when the state leaves the bounds and
    :class:`InfeasibleLookupError` when a tabular source has no action; both
    carry the partial trajectory where one exists.
    """
    try:
        traj = simulate_batch(params, weights, source, [start], t_final, dt_control, substeps,
                              feedback, term, settle_steps, stop_on_settle)[0]
    except InfeasibleLookupError as exc:
        raise InfeasibleLookupError(str(exc)) from None
    if not math.isnan(traj.exit_time):
        raise BoundsExitError(traj.exit_time, traj)
    return traj


def phase_field(params: ActuatorParams, source: PolicySource, xs: np.ndarray,
                vs: np.ndarray) -> dict:
    """State derivative under ``source`` on the grid ``xs`` x ``vs``.

    Cells where a tabular source has no action get nan entries.
    """
    X, V = np.meshgrid(np.asarray(xs, float), np.asarray(vs, float), indexing="ij")
    x, v = X.ravel(), V.ravel()
    u1 = np.full(x.size, np.nan)
    u2 = np.zeros(x.size, dtype=np.int8)
    for k in range(x.size):
        try:
            a, b = source.decide_batch(params, x[k:k + 1], v[k:k + 1])
        except InfeasibleLookupError:
            continue
        u1[k] = float(np.asarray(a)[0])
        u2[k] = _gate(params, v[k:k + 1], np.asarray(b, dtype=np.int8))[0]
    m, b_r, g = _reflected(params)
    ok = u2 > 0
    vdot = np.full(x.size, np.nan)
    vdot[ok] = (g[u2[ok]] * u1[ok] - b_r[u2[ok]] * v[ok]) / m[u2[ok]]
    return {"x": x, "v": v, "xdot": v.copy(), "vdot": vdot, "u1": u1, "u2": u2}


__all__ = [
    "PolicySource", "TabularSource", "LawSource", "ConstantSource", "CallableSource",
    "Trajectory", "SimulationError", "BoundsExitError", "InfeasibleLookupError",
    "simulate", "simulate_batch", "accumulated_cost", "phase_field",
]
