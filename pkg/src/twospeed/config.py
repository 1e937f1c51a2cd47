"""Experiment configuration: one YAML file drives every command.

Unknown keys are rejected at every level. ``Config.to_dict`` writes the
same structure back, so a parsed file serializes and re-parses unchanged.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .dp_solver import GridSpec, TerminationSpec
from .model import ActuatorParams, CostKind, CostWeights


class ConfigError(ValueError):
    """The configuration is malformed or violates a type invariant."""


def _take(section: str, data, spec: dict) -> dict:
    """Check ``data`` against ``{key: (type, default)}`` and return filled values.

    A default of ``...`` marks a required key.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(data) - set(spec))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(map(str, unknown))}")
    out = {}
    for key, (typ, default) in spec.items():
        if key not in data:
            if default is ...:
                raise ConfigError(f"{section}: missing key {key!r}")
            out[key] = copy.deepcopy(default)
            continue
        val = data[key]
        if val is None and default is None:
            out[key] = None
            continue
        try:
            if typ is float:
                if isinstance(val, bool):
                    raise TypeError
                val = float(val)
            elif typ is int:
                if isinstance(val, bool) or (isinstance(val, float) and not val.is_integer()):
                    raise TypeError
                val = int(val)
            elif typ is str:
                if not isinstance(val, str):
                    raise TypeError
            elif typ is list:
                if not isinstance(val, list):
                    raise TypeError
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: expected {typ.__name__}, got {val!r}") from None
        out[key] = val
    return out


def _pair(section: str, val) -> tuple[float, float]:
    if not (isinstance(val, list) and len(val) == 2):
        raise ConfigError(f"{section}: expected a [low, high] pair")
    return float(val[0]), float(val[1])


@dataclass
class Scenario:
    name: str
    x: float
    v: float
    source: str = "law"          # "law" or "tabular"

    _SPEC = {"name": (str, ...), "x": (float, ...), "v": (float, ...), "source": (str, "law")}

    @classmethod
    def from_dict(cls, d, where: str) -> "Scenario":
        vals = _take(where, d, cls._SPEC)
        if vals["source"] not in ("law", "tabular"):
            raise ConfigError(f"{where}.source: must be 'law' or 'tabular'")
        return cls(**vals)

    def to_dict(self) -> dict:
        return {"name": self.name, "x": self.x, "v": self.v, "source": self.source}


@dataclass
class Config:
    params: ActuatorParams
    screw_lead: float
    weights: CostWeights
    grid: GridSpec
    term: TerminationSpec
    tol: float = 1e-6
    max_iter: int = 5000
    discount: float = 1.0
    workers: int | None = None
    threshold: float = 0.020
    t_final: float = 30.0
    dt_control: float = 0.02
    substeps: int = 10
    settle_steps: int = 5
    feedback: str = "zoh"
    phase_grid: tuple[int, int] = (41, 41)
    scenarios: list[Scenario] = field(default_factory=list)
    verify_grid: tuple[int, int] = (10, 10)
    verify_t_final: float = 60.0
    verify_rel_tol: float = 1e-3
    verify_substeps: int = 10
    output_dir: str = "out"
    name: str = "custom"
    notes: dict = field(default_factory=dict)

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_dict(cls, doc) -> "Config":
        top = _take("config", doc, {
            "name": (str, "custom"), "notes": (dict, {}), "actuator": (dict, ...),
            "cost": (dict, ...), "grid": (dict, {}), "termination": (dict, {}),
            "solver": (dict, {}), "fit": (dict, {}), "simulation": (dict, {}),
            "verify": (dict, {}), "output": (dict, {}),
        })
        if not isinstance(top["notes"], dict):
            raise ConfigError("notes: expected a mapping")
        a = _take("actuator", top["actuator"], {
            "m_o": (float, ...), "b_o": (float, ...), "J_1": (float, ...), "J_2": (float, ...),
            "b_1": (float, ...), "b_2": (float, ...), "R_1": (float, ...), "R_2": (float, ...),
            "screw_lead": (float, ...), "u1_max": (float, ...), "v_gate": (float, ...),
            "x_bounds": (list, ...), "v_bounds": (list, ...),
        })
        c = _take("cost", top["cost"], {"kind": (str, ...), "w1": (float, 0.0),
                                        "w2": (float, 0.0), "w3": (float, 0.0)})
        g = _take("grid", top["grid"], {"n_x": (int, 501), "n_v": (int, 501),
                                        "n_u1": (int, 51), "dt": (float, 0.02)})
        t = _take("termination", top["termination"], {
            "half_width_x": (float, 0.003), "half_width_v": (float, 0.010),
            "out_of_bound_cost": (float, 1e6), "target_cost": (float, 0.0)})
        s = _take("solver", top["solver"], {"tol": (float, 1e-6), "max_iter": (int, 5000),
                                            "discount": (float, 1.0), "workers": (int, None)})
        f = _take("fit", top["fit"], {"threshold": (float, None)})
        sim = _take("simulation", top["simulation"], {
            "t_final": (float, 30.0), "dt_control": (float, 0.02), "substeps": (int, 10),
            "settle_steps": (int, 5), "feedback": (str, "zoh"), "phase_grid": (list, [41, 41]),
            "scenarios": (list, [])})
        ver = _take("verify", top["verify"], {
            "grid": (list, [10, 10]), "t_final": (float, 60.0), "rel_tol": (float, 1e-3),
            "substeps": (int, 10)})
        out = _take("output", top["output"], {"dir": (str, "out")})

        x_min, x_max = _pair("actuator.x_bounds", a["x_bounds"])
        v_min, v_max = _pair("actuator.v_bounds", a["v_bounds"])
        try:
            if not a["screw_lead"] > 0:
                raise ValueError("screw_lead must be positive")
            params = ActuatorParams(
                m_o=a["m_o"], b_o=a["b_o"], J_1=a["J_1"], J_2=a["J_2"], b_1=a["b_1"],
                b_2=a["b_2"], R_1=a["R_1"], R_2=a["R_2"], L_o=a["screw_lead"] / (2 * math.pi),
                u1_max=a["u1_max"], v_gate=a["v_gate"], x_min=x_min, x_max=x_max,
                v_min=v_min, v_max=v_max)
            weights = CostWeights(CostKind(c["kind"]), c["w1"], c["w2"], c["w3"])
            grid = GridSpec(g["n_x"], g["n_v"], g["n_u1"], g["dt"], x_min, x_max, v_min, v_max)
            term = TerminationSpec(t["half_width_x"], t["half_width_v"],
                                   t["out_of_bound_cost"], t["target_cost"])
            term.check_grid(grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not s["tol"] > 0 or s["max_iter"] < 1:
            raise ConfigError("solver: tol must be positive and max_iter >= 1")
        if not 0 < s["discount"] <= 1:
            raise ConfigError("solver.discount must lie in (0, 1]")
        if s["workers"] is not None and s["workers"] < 1:
            raise ConfigError("solver.workers must be >= 1")
        threshold = params.v_gate if f["threshold"] is None else f["threshold"]
        if not 0 < threshold <= params.v_gate:
            raise ConfigError("fit.threshold must lie in (0, v_gate]")
        if sim["feedback"] not in ("zoh", "continuous"):
            raise ConfigError("simulation.feedback must be 'zoh' or 'continuous'")
        if not (sim["t_final"] > 0 and sim["dt_control"] > 0 and sim["substeps"] >= 1
                and sim["settle_steps"] >= 1):
            raise ConfigError("simulation: timing values must be positive")
        phase = _int_pair("simulation.phase_grid", sim["phase_grid"])
        vgrid = _int_pair("verify.grid", ver["grid"])
        if not (ver["t_final"] > 0 and ver["rel_tol"] > 0 and ver["substeps"] >= 1):
            raise ConfigError("verify: t_final, rel_tol and substeps must be positive")
        scenarios = [Scenario.from_dict(d, f"simulation.scenarios[{k}]")
                     for k, d in enumerate(sim["scenarios"])]
        return cls(
            params=params, screw_lead=a["screw_lead"], weights=weights, grid=grid, term=term,
            tol=s["tol"], max_iter=s["max_iter"], discount=s["discount"], workers=s["workers"],
            threshold=threshold, t_final=sim["t_final"], dt_control=sim["dt_control"],
            substeps=sim["substeps"], settle_steps=sim["settle_steps"],
            feedback=sim["feedback"], phase_grid=phase, scenarios=scenarios,
            verify_grid=vgrid, verify_t_final=ver["t_final"], verify_rel_tol=ver["rel_tol"],
            verify_substeps=ver["substeps"], output_dir=out["dir"], name=top["name"],
            notes=top["notes"],
        )

    def to_dict(self) -> dict:
        p = self.params
        return {
            "name": self.name,
            "notes": copy.deepcopy(self.notes),
            "actuator": {
                "m_o": p.m_o, "b_o": p.b_o, "J_1": p.J_1, "J_2": p.J_2, "b_1": p.b_1,
                "b_2": p.b_2, "R_1": p.R_1, "R_2": p.R_2, "screw_lead": self.screw_lead,
                "u1_max": p.u1_max, "v_gate": p.v_gate, "x_bounds": [p.x_min, p.x_max],
                "v_bounds": [p.v_min, p.v_max],
            },
            "cost": {"kind": self.weights.kind.value, "w1": self.weights.w1,
                     "w2": self.weights.w2, "w3": self.weights.w3},
            "grid": {"n_x": self.grid.n_x, "n_v": self.grid.n_v, "n_u1": self.grid.n_u1,
                     "dt": self.grid.dt},
            "termination": {"half_width_x": self.term.target_half_width_x,
                            "half_width_v": self.term.target_half_width_v,
                            "out_of_bound_cost": self.term.out_of_bound_cost,
                            "target_cost": self.term.target_cost},
            "solver": {"tol": self.tol, "max_iter": self.max_iter, "discount": self.discount,
                       "workers": self.workers},
            "fit": {"threshold": self.threshold},
            "simulation": {"t_final": self.t_final, "dt_control": self.dt_control,
                           "substeps": self.substeps, "settle_steps": self.settle_steps,
                           "feedback": self.feedback, "phase_grid": list(self.phase_grid),
                           "scenarios": [s.to_dict() for s in self.scenarios]},
            "verify": {"grid": list(self.verify_grid), "t_final": self.verify_t_final,
                       "rel_tol": self.verify_rel_tol, "substeps": self.verify_substeps},
            "output": {"dir": self.output_dir},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_cost(self, kind: CostKind | str) -> "Config":
        """Copy with another cost kind; the weights carry over (used by quadratic only)."""
        new = copy.copy(self)
        w = self.weights
        try:
            new.weights = CostWeights(CostKind(kind), w.w1, w.w2, w.w3)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return new


def _int_pair(where: str, val) -> tuple[int, int]:
    if not (isinstance(val, list) and len(val) == 2
            and all(isinstance(k, int) and not isinstance(k, bool) and k >= 2 for k in val)):
        raise ConfigError(f"{where}: expected two integers >= 2")
    return int(val[0]), int(val[1])


def parse_config(text: str) -> Config:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return Config.from_dict(doc)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def builtin_config_path(name: str) -> Path:
    return Path(str(resources.files("twospeed") / "configs" / f"{name}.yaml"))


def load_builtin(name: str = "paper-default") -> Config:
    path = builtin_config_path(name)
    if not path.exists():
        raise ConfigError(f"no built-in config named {name!r}")
    return load_config(path)
