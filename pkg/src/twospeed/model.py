"""Lumped-parameter model of a two-speed actuator.

The output (a mass on a ball screw) is driven by whichever of the two motors
is engaged. Mode 1 is the low-ratio (fast, weak) path and mode 2 the
high-ratio (slow, strong) path. Mode changes are instantaneous and keep the
output velocity continuous.

All quantities are SI: metres, m/s, N*m, kg.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable


class Mode(enum.IntEnum):
    LOW = 1
    HIGH = 2


class CostKind(str, enum.Enum):
    QUADRATIC = "quadratic"
    MIN_TIME = "min_time"
    MIN_ENERGY = "min_energy"


class TorqueBoundsError(ValueError):
    """Raised when a torque command exceeds the actuator limit."""


# Relative slack when comparing torques against the bound; ladder values
# are computed in floating point and may land one ulp outside.
_TORQUE_SLACK = 1e-12


@dataclass(frozen=True)
class ActuatorParams:
    m_o: float
    b_o: float
    J_1: float
    J_2: float
    b_1: float
    b_2: float
    R_1: float
    R_2: float
    L_o: float
    u1_max: float
    v_gate: float
    x_min: float
    x_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        checks = [
            (self.m_o > 0, "m_o must be positive"),
            (self.J_1 >= 0 and self.J_2 >= 0, "rotor inertias must be non-negative"),
            (self.b_o >= 0, "b_o must be non-negative"),
            (self.b_1 >= 0 and self.b_2 >= 0, "motor dampings must be non-negative"),
            (self.R_2 > self.R_1 > 0, "ratios must satisfy R_2 > R_1 > 0"),
            (self.L_o > 0, "L_o must be positive"),
            (self.u1_max > 0, "u1_max must be positive"),
            (self.v_gate > 0, "v_gate must be positive"),
            (self.x_min < 0 < self.x_max, "position bounds must bracket 0"),
            (self.v_min < 0 < self.v_max, "speed bounds must bracket 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def ratio(self, mode: Mode) -> float:
        return self.R_1 if mode == Mode.LOW else self.R_2

    def gain(self, mode: Mode) -> float:
        """Torque-to-force factor R_i / L_o (1/m)."""
        return self.ratio(mode) / self.L_o


@dataclass(frozen=True)
class State:
    x: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.v)):
            raise ValueError(f"non-finite state ({self.x}, {self.v})")


@dataclass(frozen=True)
class ControlInput:
    u1: float
    u2: Mode

    def __post_init__(self):
        object.__setattr__(self, "u2", Mode(self.u2))


@dataclass(frozen=True)
class CostWeights:
    kind: CostKind = CostKind.QUADRATIC
    w1: float = 0.0
    w2: float = 0.0
    w3: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.kind == CostKind.QUADRATIC and not self.w1 > 0:
            raise ValueError("quadratic cost needs w1 > 0")


def reflected_params(params: ActuatorParams, mode: Mode) -> tuple[float, float]:
    """Output-side (mass, damping) seen through the selected gear path."""
    n2 = params.gain(mode) ** 2
    if mode == Mode.LOW:
        return params.m_o + n2 * params.J_1, params.b_o + n2 * params.b_1
    return params.m_o + n2 * params.J_2, params.b_o + n2 * params.b_2


def check_torque(params: ActuatorParams, u1: float) -> None:
    if not abs(u1) <= params.u1_max * (1 + _TORQUE_SLACK):
        raise TorqueBoundsError(f"|u1|={abs(u1):g} exceeds u1_max={params.u1_max:g}")


def acceleration(params: ActuatorParams, state: State, inp: ControlInput) -> float:
    check_torque(params, inp.u1)
    m_r, b_r = reflected_params(params, inp.u2)
    return (-b_r * state.v + params.gain(inp.u2) * inp.u1) / m_r


def rk4(rhs: Callable, x, v, h):
    """One classical Runge-Kutta step of (x, v)' = rhs(x, v).

    Works on floats and on numpy arrays alike.
    """
    k1x, k1v = rhs(x, v)
    k2x, k2v = rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = rhs(x + h * k3x, v + h * k3v)
    return (x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
            v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v))


def open_loop_rhs(m_r: float, b_r: float, force):
    """Right-hand side for a fixed mode and a constant applied force."""
    def rhs(x, v):
        return v, (force - b_r * v) / m_r
    return rhs


def step(params: ActuatorParams, state: State, inp: ControlInput, dt: float) -> State:
    """Advance the state by ``dt`` with the input held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    check_torque(params, inp.u1)
    m_r, b_r = reflected_params(params, inp.u2)
    rhs = open_loop_rhs(m_r, b_r, params.gain(inp.u2) * inp.u1)
    x, v = rk4(rhs, state.x, state.v, dt)
    return State(x, v)


def stage_cost(weights: CostWeights, state: State, inp: ControlInput) -> float:
    if weights.kind == CostKind.MIN_TIME:
        return 1.0
    if weights.kind == CostKind.MIN_ENERGY:
        return inp.u1 ** 2
    return weights.w1 * state.x ** 2 + weights.w2 * state.v ** 2 + weights.w3 * inp.u1 ** 2


# Illustrative defaults. Ratios, lead, mass, torque bound, gate and domain
# bounds are the prototype's stated values; the carriage damping and the
# rotor inertias and dampings are placeholders tuned so the reference
# experiments show their intended behaviour.
SCREW_LEAD = 0.020

DEFAULT_PARAMS = ActuatorParams(
    m_o=11.4,
    b_o=6.69,
    J_1=2.84e-8,
    J_2=4.3e-6,
    b_1=9.85e-8,
    b_2=2.05e-5,
    R_1=4.0,
    R_2=72.0,
    L_o=SCREW_LEAD / (2 * math.pi),
    u1_max=0.02,
    v_gate=0.020,
    x_min=-0.150,
    x_max=0.150,
    v_min=-0.500,
    v_max=0.500,
)

# Each term reaches 1 at the domain edge (|x| = 150 mm, |v| = 500 mm/s,
# |u1| = 0.02 N*m).
DEFAULT_QUADRATIC = CostWeights(CostKind.QUADRATIC, w1=1 / 0.150**2, w2=1 / 0.500**2,
                                w3=1 / 0.02**2)


def default_weights(kind: CostKind | str) -> CostWeights:
    kind = CostKind(kind)
    if kind == CostKind.QUADRATIC:
        return DEFAULT_QUADRATIC
    return CostWeights(kind)
