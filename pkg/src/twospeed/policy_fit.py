"""Distil a tabular policy into a switched PD law.

Samples are split by speed: at or above the threshold the law runs the
low-ratio mode, below it the high-ratio mode. In each zone the torque is
fitted by a plane through the origin in (x, v), by least squares over the
samples whose torque is not saturated.

Gains are stored so that the applied torque is ``u1 = -(k_p*x + k_d*v)``;
positive gains are stabilizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dp_solver import GridSpec, PolicyTable, ValueTable
from .model import ActuatorParams, ControlInput, Mode, State

SATURATION_RTOL = 1e-9


class RankDeficientError(ValueError):
    """The sampled states do not determine both plane coefficients."""


@dataclass(frozen=True)
class PolicySample:
    x: float
    v: float
    u1: float
    u2: Mode
    saturated: bool = False


@dataclass(frozen=True)
class PiecewiseLinearLaw:
    threshold: float
    gains_1: tuple[float, float]
    gains_2: tuple[float, float]
    u1_max: float

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not self.u1_max > 0:
            raise ValueError("u1_max must be positive")
        object.__setattr__(self, "gains_1", tuple(float(g) for g in self.gains_1))
        object.__setattr__(self, "gains_2", tuple(float(g) for g in self.gains_2))

    def mode(self, v: float) -> Mode:
        return Mode.LOW if abs(v) >= self.threshold else Mode.HIGH

    def gains(self, mode: Mode) -> tuple[float, float]:
        return self.gains_1 if mode == Mode.LOW else self.gains_2

    def torque(self, mode: Mode, x: float, v: float) -> float:
        kp, kd = self.gains(mode)
        return min(max(-(kp * x + kd * v), -self.u1_max), self.u1_max)

    def to_dict(self) -> dict:
        return {
            "convention": "u1 = -(k_p*x + k_d*v); mode 1 if |v| >= threshold else mode 2",
            "threshold": self.threshold,
            "gains_1": {"k_p": self.gains_1[0], "k_d": self.gains_1[1]},
            "gains_2": {"k_p": self.gains_2[0], "k_d": self.gains_2[1]},
            "u1_max": self.u1_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinearLaw":
        return cls(
            threshold=float(d["threshold"]),
            gains_1=(float(d["gains_1"]["k_p"]), float(d["gains_1"]["k_d"])),
            gains_2=(float(d["gains_2"]["k_p"]), float(d["gains_2"]["k_d"])),
            u1_max=float(d["u1_max"]),
        )


@dataclass
class FitReport:
    counts: tuple[int, int]
    fitted_counts: tuple[int, int]
    rms: tuple[float, float]
    saturated_fraction: tuple[float, float]
    mode_agreement: float

    def to_dict(self) -> dict:
        return {
            "zone_1": {"samples": self.counts[0], "fitted": self.fitted_counts[0],
                       "rms_residual": self.rms[0],
                       "saturated_excluded": self.saturated_fraction[0]},
            "zone_2": {"samples": self.counts[1], "fitted": self.fitted_counts[1],
                       "rms_residual": self.rms[1],
                       "saturated_excluded": self.saturated_fraction[1]},
            "mode_agreement": self.mode_agreement,
        }


def evaluate_law(law: PiecewiseLinearLaw, state: State) -> ControlInput:
    mode = law.mode(state.v)
    return ControlInput(law.torque(mode, state.x, state.v), mode)


def segment_samples(samples: Sequence[PolicySample], threshold: float):
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if len(samples) == 0:
        raise ValueError("no samples to segment")
    group_1 = [s for s in samples if abs(s.v) >= threshold]
    group_2 = [s for s in samples if abs(s.v) < threshold]
    return group_1, group_2


def fit_plane(samples: Iterable[PolicySample]) -> tuple[float, float]:
    """Least-squares ``(a, b)`` for ``u1 ~ a*x + b*v`` over unsaturated samples.

    No intercept. Raises :class:`RankDeficientError` when the states are
    collinear through the origin.
    """
    pts = [(s.x, s.v, s.u1) for s in samples if not s.saturated]
    if len(pts) < 3:
        raise RankDeficientError(f"need at least 3 unsaturated samples, got {len(pts)}")
    x, v, u = (np.array(c, dtype=float) for c in zip(*pts))
    sxx, sxv, svv = x @ x, x @ v, v @ v
    det = sxx * svv - sxv * sxv
    if not det > 1e-12 * sxx * svv or sxx == 0 or svv == 0:
        raise RankDeficientError("sample states are collinear; plane is not identifiable")
    sxu, svu = x @ u, v @ u
    a = (svv * sxu - sxv * svu) / det
    b = (sxx * svu - sxv * sxu) / det
    return float(a), float(b)


def policy_samples(policy: PolicyTable, spec: GridSpec, u1_max: float,
                   value: ValueTable | None = None) -> list[PolicySample]:
    """One sample per solvable cell; target cells are left out when ``value`` is given."""
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    mask = policy.u2_star != 0
    if value is not None:
        mask &= ~value.terminal
    sat = np.abs(policy.u1_star) >= u1_max * (1 - SATURATION_RTOL)
    return [PolicySample(float(X[c]), float(V[c]), float(policy.u1_star[c]),
                         Mode(int(policy.u2_star[c])), bool(sat[c]))
            for c in zip(*np.nonzero(mask))]


def _rms(law: PiecewiseLinearLaw, group: Sequence[PolicySample]) -> float:
    res = [evaluate_law(law, State(s.x, s.v)).u1 - s.u1 for s in group if not s.saturated]
    return math.sqrt(sum(r * r for r in res) / len(res)) if res else math.nan


def distill(policy: PolicyTable, spec: GridSpec, threshold: float, params: ActuatorParams,
            value: ValueTable | None = None) -> tuple[PiecewiseLinearLaw, FitReport]:
    """Fit the switched PD law to a solved policy table."""
    samples = policy_samples(policy, spec, params.u1_max, value)
    group_1, group_2 = segment_samples(samples, threshold)
    try:
        a1, b1 = fit_plane(group_1)
    except RankDeficientError as exc:
        raise RankDeficientError(f"zone 1: {exc}") from None
    try:
        a2, b2 = fit_plane(group_2)
    except RankDeficientError as exc:
        raise RankDeficientError(f"zone 2: {exc}") from None
    law = PiecewiseLinearLaw(threshold, (-a1, -b1), (-a2, -b2), params.u1_max)

    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    feas = policy.u2_star != 0
    law_mode = np.where(np.abs(V) >= threshold, 1, 2)
    agreement = float(np.mean(law_mode[feas] == policy.u2_star[feas])) if feas.any() else math.nan

    def sat_frac(g):
        return sum(s.saturated for s in g) / len(g)

    report = FitReport(
        counts=(len(group_1), len(group_2)),
        fitted_counts=(sum(not s.saturated for s in group_1),
                       sum(not s.saturated for s in group_2)),
        rms=(_rms(law, group_1), _rms(law, group_2)),
        saturated_fraction=(sat_frac(group_1), sat_frac(group_2)),
        mode_agreement=agreement,
    )
    return law, report


def tabulate_law(law: PiecewiseLinearLaw, spec: GridSpec) -> PolicyTable:
    """Policy table of ``law`` on the grid nodes (every node solvable)."""
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    modes = np.where(np.abs(V) >= law.threshold, 1, 2)
    kp = np.where(modes == 1, law.gains_1[0], law.gains_2[0])
    kd = np.where(modes == 1, law.gains_1[1], law.gains_2[1])
    u1 = np.clip(-(kp * X + kd * V), -law.u1_max, law.u1_max)
    return PolicyTable(u1, modes.astype(np.int8))
