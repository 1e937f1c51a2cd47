"""Switched energy analysis of the distilled PD law.

Each mode carries its own energy, kinetic plus the virtual spring of the
proportional gain::

    E_i = 1/2 m_r,i v**2 + 1/2 (R_i/L_o) k_p,i x**2

and under the unsaturated law it decays at ``-(b_r,i + (R_i/L_o) k_d,i) v**2``.
On the switching surface |v| = s both energies are functions of x alone, so
they are related by an affine map ``E_2 = h(E_1)``. When ``h`` is increasing,
the energy of a zone can only be lower on each return to it, even though it
may jump up at a crossing.

The argument assumes an inertial load with linear damping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ActuatorParams, Mode, State, reflected_params
from .policy_fit import PiecewiseLinearLaw

LOAD_ASSUMPTION = "inertial load with linear viscous damping"


@dataclass(frozen=True)
class EnergyParams:
    mass: tuple[float, float]          # m_r,1, m_r,2
    stiffness: tuple[float, float]     # (R_i/L_o) k_p,i
    dissipation: tuple[float, float]   # b_r,i + (R_i/L_o) k_d,i
    s: float                           # switching speed

    @classmethod
    def from_law(cls, params: ActuatorParams, law: PiecewiseLinearLaw) -> "EnergyParams":
        mass, stiff, diss = [], [], []
        for mode in Mode:
            m_r, b_r = reflected_params(params, mode)
            kp, kd = law.gains(mode)
            g = params.gain(mode)
            mass.append(m_r)
            stiff.append(g * kp)
            diss.append(b_r + g * kd)
        return cls(tuple(mass), tuple(stiff), tuple(diss), law.threshold)

    @property
    def rho(self) -> float:
        """Stiffness ratio (R_2 k_p,2) / (R_1 k_p,1)."""
        if self.stiffness[0] == 0:
            raise ValueError("crossing map undefined for k_p,1 = 0")
        return self.stiffness[1] / self.stiffness[0]


def energy(ep: EnergyParams, mode: Mode, state: State) -> float:
    i = int(mode) - 1
    # products rather than ** so vectorised callers round identically
    return 0.5 * ep.mass[i] * state.v * state.v + 0.5 * ep.stiffness[i] * state.x * state.x


def energy_rate(ep: EnergyParams, mode: Mode, v: float) -> float:
    """Closed-loop dE/dt under the unsaturated law."""
    return -ep.dissipation[int(mode) - 1] * v ** 2


def crossing_map(ep: EnergyParams, e1: float) -> float:
    """Mode-2 energy at the surface point where the mode-1 energy is ``e1``.

    Obtained by eliminating x between the two energies at |v| = s::

        h(E_1) = 1/2 (m_r,2 - rho m_r,1) s**2 + rho E_1
    """
    floor = 0.5 * ep.mass[0] * ep.s ** 2
    if e1 < floor * (1 - 1e-12):
        raise ValueError(f"E_1={e1:g} is below the kinetic floor {floor:g} at |v| = s")
    rho = ep.rho
    return 0.5 * (ep.mass[1] - rho * ep.mass[0]) * ep.s ** 2 + rho * e1


@dataclass
class StabilityVerdict:
    algebraic_ok: bool
    kp_positive: tuple[bool, bool]
    dissipation_positive: tuple[bool, bool]
    crossing_monotone: bool
    witness: dict = field(default_factory=dict)
    # informational, not part of algebraic_ok
    threshold_within_gate: bool = True
    saturation_safe: bool = True
    assumption: str = LOAD_ASSUMPTION

    def failed_conditions(self) -> list[str]:
        names = []
        for i in range(2):
            if not self.kp_positive[i]:
                names.append(f"kp_positive_{i + 1}")
            if not self.dissipation_positive[i]:
                names.append(f"dissipation_positive_{i + 1}")
        if not self.crossing_monotone:
            names.append("crossing_monotone")
        return names

    def to_dict(self) -> dict:
        return {
            "algebraic_ok": self.algebraic_ok,
            "kp_positive": list(self.kp_positive),
            "dissipation_positive": list(self.dissipation_positive),
            "crossing_monotone": self.crossing_monotone,
            "failed": self.failed_conditions(),
            "threshold_within_gate": self.threshold_within_gate,
            "saturation_safe": self.saturation_safe,
            "assumption": self.assumption,
            "witness": self.witness,
        }


def verify_algebraic(params: ActuatorParams, law: PiecewiseLinearLaw) -> StabilityVerdict:
    """Check the sign conditions behind the switched-energy argument.

    ``saturation_safe`` additionally reports whether ``k_p,i * max|x|`` stays
    within the torque bound; beyond it the clamp can let the energy grow.
    """
    ep = EnergyParams.from_law(params, law)
    kp = tuple(law.gains(m)[0] > 0 for m in Mode)
    diss = tuple(d > 0 for d in ep.dissipation)
    monotone = ep.stiffness[0] != 0 and ep.rho > 0
    x_reach = max(abs(params.x_min), abs(params.x_max))
    witness = {
        "k_p": [law.gains(m)[0] for m in Mode],
        "k_d": [law.gains(m)[1] for m in Mode],
        "mass": list(ep.mass),
        "stiffness": list(ep.stiffness),
        "dissipation": list(ep.dissipation),
        "rho": ep.rho if ep.stiffness[0] != 0 else None,
        "s": ep.s,
    }
    return StabilityVerdict(
        algebraic_ok=all(kp) and all(diss) and monotone,
        kp_positive=kp,
        dissipation_positive=diss,
        crossing_monotone=monotone,
        witness=witness,
        threshold_within_gate=law.threshold <= params.v_gate,
        saturation_safe=all(abs(law.gains(m)[0]) * x_reach <= law.u1_max for m in Mode),
    )


@dataclass
class Crossing:
    t: float
    x: float
    v: float
    into: Mode        # zone entered
    e1: float
    e2: float

    @property
    def jump(self) -> float:
        """Energy change of the active function at the crossing."""
        return self.e2 - self.e1 if self.into == Mode.HIGH else self.e1 - self.e2


@dataclass
class MonotoneReport:
    segments_ok: bool
    reentry_ok: bool
    worst_segment_increase: float
    crossings: list[Crossing]
    reentry_energies: dict
    upward_jumps: list[Crossing]
    mode_switches: int
    chattering: bool
    assumption: str = LOAD_ASSUMPTION

    @property
    def ok(self) -> bool:
        return self.segments_ok and self.reentry_ok

    def summary(self) -> dict:
        return {
            "ok": self.ok,
            "segments_ok": self.segments_ok,
            "reentry_ok": self.reentry_ok,
            "worst_segment_increase": self.worst_segment_increase,
            "crossings": len(self.crossings),
            "upward_jumps": len(self.upward_jumps),
            "mode_switches": self.mode_switches,
            "chattering": self.chattering,
            "zone_1_entries": self.reentry_energies[1],
            "zone_2_entries": self.reentry_energies[2],
        }


class MissingModeError(ValueError):
    pass


def _energies(ep: EnergyParams, mode: int, x, v):
    i = mode - 1
    return 0.5 * ep.mass[i] * v ** 2 + 0.5 * ep.stiffness[i] * x ** 2


def verify_monotone(traj, ep: EnergyParams, rel_tol: float = 1e-3,
                    chatter_window: float = 0.1, chatter_count: int = 10) -> MonotoneReport:
    """Check energy decrease along a simulated trajectory.

    (a) Between consecutive samples the energy of the mode applied over that
        interval must not grow by more than ``rel_tol`` of its value.
    (b) Energies at successive entries into the same zone, evaluated at the
        interpolated crossing point, must strictly decrease.
    Upward jumps at individual crossings are expected and only reported.
    """
    u2 = getattr(traj, "u2", None)
    if u2 is None or len(u2) != len(traj.t) or np.any((u2 != 1) & (u2 != 2)):
        raise MissingModeError("trajectory lacks per-sample mode annotations")
    x, v, t = np.asarray(traj.x), np.asarray(traj.v), np.asarray(traj.t)

    worst = 0.0
    if len(t) > 1:
        for mode in (1, 2):
            sel = u2[:-1] == mode
            e0 = _energies(ep, mode, x[:-1][sel], v[:-1][sel])
            e1 = _energies(ep, mode, x[1:][sel], v[1:][sel])
            if e0.size:
                floor = 1e-12 * max(float(e0.max()), 1e-300)
                rel = (e1 - e0) / np.maximum(e0, floor)
                worst = max(worst, float(rel.max()))
    segments_ok = worst <= rel_tol

    crossings = []
    g = np.abs(v) - ep.s
    for k in range(len(t) - 1):
        a, b = g[k], g[k + 1]
        if (a < 0) != (b < 0):
            lam = a / (a - b) if a != b else 0.0
            xc = x[k] + lam * (x[k + 1] - x[k])
            vc = v[k] + lam * (v[k + 1] - v[k])
            into = Mode.LOW if b >= 0 else Mode.HIGH
            crossings.append(Crossing(float(t[k] + lam * (t[k + 1] - t[k])), float(xc),
                                      float(vc), into,
                                      float(_energies(ep, 1, xc, vc)),
                                      float(_energies(ep, 2, xc, vc))))
    entries = {1: [c.e1 for c in crossings if c.into == Mode.LOW],
               2: [c.e2 for c in crossings if c.into == Mode.HIGH]}
    reentry_ok = all(all(b < a for a, b in zip(seq, seq[1:])) for seq in entries.values())

    switches = int(np.count_nonzero(np.diff(u2.astype(int)))) if len(u2) > 1 else 0
    chattering = False
    if crossings:
        ct = np.array([c.t for c in crossings])
        for k in range(len(ct)):
            if np.count_nonzero((ct >= ct[k]) & (ct < ct[k] + chatter_window)) >= chatter_count:
                chattering = True
                break

    return MonotoneReport(
        segments_ok=segments_ok,
        reentry_ok=reentry_ok,
        worst_segment_increase=worst,
        crossings=crossings,
        reentry_energies=entries,
        upward_jumps=[c for c in crossings if c.jump > 0],
        mode_switches=switches,
        chattering=chattering,
    )


def state_norm(params: ActuatorParams, x, v):
    """Euclidean norm of the state scaled by the domain half-widths."""
    sx = max(abs(params.x_min), abs(params.x_max))
    sv = max(abs(params.v_min), abs(params.v_max))
    return np.hypot(np.asarray(x) / sx, np.asarray(v) / sv)


_STENCILS = {
    3: (np.array([-1, 1]), np.array([-0.5, 0.5])),
    5: (np.array([-2, -1, 1, 2]), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0),
}


def finite_difference_rate(traj, ep: EnergyParams, points: int = 5):
    """Central-difference dE/dt against the closed-form rate on in-mode stretches.

    ``points`` selects the 3- or 5-point stencil; samples must be uniform in
    time. Returns ``(measured, predicted)`` arrays over samples whose whole
    stencil shares one mode and is unsaturated.
    """
    offsets, coef = _STENCILS[points]
    x, v, t, u2 = (np.asarray(a) for a in (traj.x, traj.v, traj.t, traj.u2))
    sat = getattr(traj, "saturated", None)
    sat = np.zeros(len(t), dtype=bool) if sat is None else np.asarray(sat, dtype=bool)
    r = int(offsets.max())
    if len(t) < 2 * r + 1:
        return np.array([]), np.array([])
    h = float(t[1] - t[0])
    n = len(t)
    k = np.arange(r, n - r)
    win = k[:, None] + np.arange(-r, r + 1)[None, :]
    same = np.all(u2[win] == u2[k][:, None], axis=1) & ~np.any(sat[win], axis=1)
    k = k[same]
    if k.size == 0:
        return np.array([]), np.array([])
    m = u2[k].astype(int) - 1
    mass, stiff = np.asarray(ep.mass)[m], np.asarray(ep.stiffness)[m]
    idx = k[:, None] + offsets[None, :]
    e = 0.5 * mass[:, None] * v[idx] ** 2 + 0.5 * stiff[:, None] * x[idx] ** 2
    meas = e @ coef / h
    pred = -np.asarray(ep.dissipation)[m] * v[k] ** 2
    return meas, pred


def check_rate_match(meas, pred, rel_tol: float = 1e-3) -> tuple[bool, float]:
    """Worst relative mismatch, scaled by the largest predicted rate on the run."""
    if len(pred) == 0:
        return True, 0.0
    scale = max(float(np.max(np.abs(pred))), 1e-300)
    worst = float(np.max(np.abs(meas - pred)) / scale)
    return worst <= rel_tol, worst


__all__ = [
    "EnergyParams", "StabilityVerdict", "MonotoneReport", "Crossing", "MissingModeError",
    "energy", "energy_rate", "crossing_map", "verify_algebraic", "verify_monotone",
    "state_norm", "finite_difference_rate", "check_rate_match", "LOAD_ASSUMPTION",
]
