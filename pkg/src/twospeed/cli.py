"""Command-line front end: ``twospeed {solve,fit,verify,simulate,export-figures}``.

Every command reads one YAML config. Outputs go to the config's output
directory unless ``--out`` is given. Files carry no timestamps or timings,
so rerunning a command on the same inputs reproduces them byte for byte;
wall-clock times are only logged.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import Config, ConfigError, builtin_config_path, load_config
from .dp_solver import value_iteration
from .model import CostKind, Mode, State
from .policy_fit import RankDeficientError, distill, tabulate_law
from .simulator import (LawSource, SimulationError, TabularSource, accumulated_cost,
                        phase_field, simulate, simulate_batch)
from .stability import (EnergyParams, check_rate_match, finite_difference_rate, state_norm,
                        verify_algebraic, verify_monotone)

log = logging.getLogger("twospeed")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_CONVERGENCE = 4
EXIT_VERIFICATION = 5
EXIT_IO = 6
EXIT_FIT = 7
EXIT_SIMULATION = 8


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(x: float):
    """JSON has no inf/nan; map them to strings."""
    return x if math.isfinite(x) else str(x)


def snapshot_path(out: Path, kind: CostKind) -> Path:
    return out / f"snapshot_{kind.value}.hcdp"


def _solve(cfg: Config, out: Path, snap_path: Path | None = None):
    kind = cfg.weights.kind
    log.info("solving %s on %dx%d, %d torque levels", kind.value, cfg.grid.n_x, cfg.grid.n_v,
             cfg.grid.n_u1)
    value, policy, report = value_iteration(cfg.params, cfg.weights, cfg.grid, cfg.term,
                                            tol=cfg.tol, max_iter=cfg.max_iter,
                                            discount=cfg.discount, workers=cfg.workers)
    log.info("%s: %d sweeps, residual %.3g, converged=%s, %.1f s", kind.value,
             report.iterations, report.final_residual, report.converged, report.wall_time)
    meta = {
        "cost_kind": kind.value,
        "config": cfg.to_dict(),
        "iterations": report.iterations,
        "final_residual": _clean(report.final_residual),
        "converged": report.converged,
        "tol": report.tol,
    }
    snap = formats.Snapshot(cfg.grid, value, policy, meta)
    formats.save_snapshot(snap_path or snapshot_path(out, kind), snap)
    formats.write_tables_csv(out / f"tables_{kind.value}.csv", cfg.grid, value, policy)
    _write_json(out / f"solve_report_{kind.value}.json", {
        "cost_kind": kind.value,
        "iterations": report.iterations,
        "final_residual": _clean(report.final_residual),
        "converged": report.converged,
        "tol": report.tol,
        "feasible_cells": int(value.feasible.sum()),
        "residuals": [_clean(r) for r in report.residuals],
    })
    if not report.converged:
        raise CommandError(f"{kind.value} solve did not converge in {report.iterations} sweeps "
                           f"(residual {report.final_residual:.3g})", EXIT_CONVERGENCE)
    return snap


def _load_snapshot(path: Path) -> formats.Snapshot:
    try:
        return formats.load_snapshot(path)
    except FileNotFoundError:
        raise CommandError(f"snapshot not found: {path}", EXIT_IO) from None
    except formats.FormatError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_IO) from None


def _load_law(path: Path):
    try:
        return formats.load_law(path)
    except FileNotFoundError:
        raise CommandError(f"law file not found: {path}", EXIT_IO) from None
    except formats.FormatError as exc:
        raise CommandError(str(exc), EXIT_IO) from None
    except ValueError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_IO) from None


def _fit(cfg: Config, snap: formats.Snapshot, out: Path, law_path: Path | None):
    kind = snap.metadata.get("cost_kind")
    if kind != CostKind.QUADRATIC.value:
        log.warning("snapshot comes from a %r solve; the switched PD fit is meant for the "
                    "quadratic cost", kind)
    try:
        law, report = distill(snap.policy, snap.spec, cfg.threshold, cfg.params, snap.value)
    except RankDeficientError as exc:
        raise CommandError(f"fit failed: {exc}", EXIT_FIT) from None
    formats.save_law(law_path or out / "law.yaml", law,
                     {"source": {"cost_kind": kind, "grid": [snap.spec.n_x, snap.spec.n_v]}})
    diag = report.to_dict()
    diag["gains_larger_in_mode_2"] = [abs(law.gains_2[k]) > abs(law.gains_1[k]) for k in (0, 1)]
    diag["cost_kind"] = kind
    _write_json(out / "fit_report.json", diag)
    log.info("law: gains_1=%s gains_2=%s", law.gains_1, law.gains_2)
    return law, report


def _energy_columns(traj, ep: EnergyParams) -> dict:
    x, v = traj.x, traj.v
    e1 = 0.5 * ep.mass[0] * v ** 2 + 0.5 * ep.stiffness[0] * x ** 2
    e2 = 0.5 * ep.mass[1] * v ** 2 + 0.5 * ep.stiffness[1] * x ** 2
    return {"t": traj.t, "x": x, "v": v, "u2": traj.u2, "E1": e1, "E2": e2,
            "E_active": traj.energy}


def verify_law(cfg: Config, law, starts=None):
    """Algebraic check plus a batch of energy-monotonicity runs.

    Returns ``(verdict, rows, trajectories)``; runs are unbounded in space
    since the energy argument does not involve the grid domain.
    """
    p = cfg.params
    verdict = verify_algebraic(p, law)
    if starts is None:
        nx, nv = cfg.verify_grid
        starts = [State(float(x), float(v)) for x in np.linspace(p.x_min, p.x_max, nx)
                  for v in np.linspace(p.v_min, p.v_max, nv)]
    source = LawSource(law)
    ep = source.energy_params(p)
    trajs = simulate_batch(p, cfg.weights, source, starts, cfg.verify_t_final,
                           cfg.dt_control, cfg.verify_substeps, feedback="continuous",
                           term=cfg.term, stop_on_settle=False, enforce_bounds=False)
    rows = []
    for k, (s, tr) in enumerate(zip(starts, trajs)):
        mono = verify_monotone(tr, ep, rel_tol=cfg.verify_rel_tol)
        n0 = float(state_norm(p, s.x, s.v))
        n1 = float(state_norm(p, tr.x[-1], tr.v[-1]))
        meas, pred = finite_difference_rate(tr, ep)
        rate_ok, rate_err = check_rate_match(meas, pred, cfg.verify_rel_tol)
        converged = n1 < 0.01 * n0 if n0 > 0 else n1 == 0
        rows.append({
            "run": k, "x0": s.x, "v0": s.v, "segments_ok": mono.segments_ok,
            "reentry_ok": mono.reentry_ok, "worst_segment_increase": mono.worst_segment_increase,
            "crossings": len(mono.crossings), "upward_jumps": len(mono.upward_jumps),
            "chattering": mono.chattering, "final_norm_ratio": n1 / n0 if n0 > 0 else 0.0,
            "converged": converged, "rate_ok": rate_ok, "rate_error": rate_err,
        })
    return verdict, rows, trajs


# --------------------------------------------------------------- commands

def cmd_solve(cfg: Config, out: Path, args) -> int:
    _solve(cfg, out, Path(args.snapshot) if args.snapshot else None)
    return EXIT_OK


def cmd_fit(cfg: Config, out: Path, args) -> int:
    path = Path(args.snapshot) if args.snapshot else snapshot_path(out, CostKind.QUADRATIC)
    _fit(cfg, _load_snapshot(path), out, Path(args.law) if args.law else None)
    return EXIT_OK


def cmd_verify(cfg: Config, out: Path, args) -> int:
    law = _load_law(Path(args.law) if args.law else out / "law.yaml")
    verdict, rows, trajs = verify_law(cfg, law)
    formats.write_columns_csv(out / "verify_runs.csv",
                              {k: np.array([r[k] for r in rows]) for k in rows[0]})
    ep = EnergyParams.from_law(cfg.params, law)
    for sc in (sc for sc in cfg.scenarios if sc.source == "law"):
        tr = simulate_batch(cfg.params, cfg.weights, LawSource(law), [State(sc.x, sc.v)],
                            cfg.verify_t_final, cfg.dt_control, cfg.verify_substeps,
                            feedback="continuous", term=cfg.term, stop_on_settle=False,
                            enforce_bounds=False)[0]
        formats.write_columns_csv(out / f"energy_{sc.name}.csv", _energy_columns(tr, ep))
    failures = [r["run"] for r in rows
                if not (r["segments_ok"] and r["reentry_ok"] and r["converged"])]
    summary = verdict.to_dict()
    summary["runs"] = len(rows)
    summary["failed_runs"] = failures
    summary["rate_check_ok"] = all(r["rate_ok"] for r in rows)
    summary["worst_rate_error"] = max(r["rate_error"] for r in rows)
    summary["upward_jumps_total"] = sum(r["upward_jumps"] for r in rows)
    summary["ok"] = bool(verdict.algebraic_ok and not failures)
    _write_json(out / "verdict.json", summary)
    if not summary["ok"]:
        log.error("verification failed: %s; runs failing: %s", verdict.failed_conditions(),
                  failures)
        return EXIT_VERIFICATION
    log.info("verification passed on %d runs", len(rows))
    return EXIT_OK


def _source_for(kind: str, cfg: Config, out: Path, args, cache: dict):
    if kind not in cache:
        if kind == "law":
            cache[kind] = LawSource(_load_law(Path(args.law) if args.law else out / "law.yaml"))
        else:
            path = Path(args.snapshot) if args.snapshot else snapshot_path(out, cfg.weights.kind)
            snap = _load_snapshot(path)
            cache[kind] = TabularSource(snap.policy, snap.spec)
    return cache[kind]


def cmd_simulate(cfg: Config, out: Path, args) -> int:
    if not cfg.scenarios:
        raise CommandError("config has no simulation scenarios", EXIT_CONFIG)
    p = cfg.params
    for sc in cfg.scenarios:
        if not (p.x_min <= sc.x <= p.x_max and p.v_min <= sc.v <= p.v_max):
            raise CommandError(f"scenario {sc.name!r} starts outside the state bounds",
                               EXIT_CONFIG)
    cache: dict = {}
    summary = {}
    status = EXIT_OK
    for sc in cfg.scenarios:
        source = _source_for(sc.source, cfg, out, args, cache)
        try:
            traj = simulate(p, cfg.weights, source, State(sc.x, sc.v), cfg.t_final,
                            cfg.dt_control, cfg.substeps, cfg.feedback, cfg.term,
                            cfg.settle_steps)
            error = None
        except SimulationError as exc:
            traj, error = exc.trajectory, str(exc)
            status = EXIT_SIMULATION
            log.error("scenario %s: %s", sc.name, exc)
        if traj is not None:
            formats.write_trajectory_csv(out / f"trajectory_{sc.name}.csv", traj)
        summary[sc.name] = {
            "source": sc.source, "start": [sc.x, sc.v], "error": error,
            "settled": None if traj is None else traj.settled,
            "settle_time": None if traj is None else _clean(traj.settle_time),
            "accumulated_cost": None if traj is None else accumulated_cost(traj),
        }
    for kind, source in sorted(cache.items()):
        _write_phase(out / f"phase_{kind}.csv", cfg, source)
    _write_json(out / "simulate_summary.json", summary)
    return status


def _write_phase(path: Path, cfg: Config, source) -> None:
    p = cfg.params
    nx, nv = cfg.phase_grid
    field = phase_field(p, source, np.linspace(p.x_min, p.x_max, nx),
                        np.linspace(p.v_min, p.v_max, nv))
    formats.write_columns_csv(path, field)


def _policy_columns(snap: formats.Snapshot, which: str) -> dict:
    X, V = np.meshgrid(snap.spec.x_nodes, snap.spec.v_nodes, indexing="ij")
    I, J = np.meshgrid(np.arange(snap.spec.n_x), np.arange(snap.spec.n_v), indexing="ij")
    cols = {"i": I.ravel(), "j": J.ravel(), "x": X.ravel(), "v": V.ravel(),
            "feasible": snap.value.feasible.ravel()}
    if which == "J":
        cols["J"] = np.where(snap.value.feasible, snap.value.values, np.nan).ravel()
    elif which == "u1":
        cols["u1"] = snap.policy.u1_star.ravel()
    else:
        cols["u2"] = snap.policy.u2_star.astype(np.int64).ravel()
    return cols


def cmd_export_figures(cfg: Config, out: Path, args) -> int:
    snaps = {}
    for kind in CostKind:
        path = snapshot_path(out, kind)
        kcfg = cfg.with_cost(kind)
        snap = None
        if path.exists():
            snap = _load_snapshot(path)
            if snap.metadata.get("config") != kcfg.to_dict():
                log.info("%s does not match the config; re-solving", path.name)
                snap = None
        if snap is None:
            snap = _solve(kcfg, out)
        snaps[kind] = snap
        formats.write_columns_csv(out / f"fig5_cost_to_go_{kind.value}.csv",
                                  _policy_columns(snap, "J"))
        formats.write_columns_csv(out / f"fig6_torque_policy_{kind.value}.csv",
                                  _policy_columns(snap, "u1"))
        formats.write_columns_csv(out / f"fig7_mode_policy_{kind.value}.csv",
                                  _policy_columns(snap, "u2"))
        _write_phase(out / f"fig8_phase_plane_{kind.value}.csv", kcfg,
                     TabularSource(snap.policy, snap.spec))

    qcfg = cfg.with_cost(CostKind.QUADRATIC)
    law, _ = _fit(qcfg, snaps[CostKind.QUADRATIC], out, Path(args.law) if args.law else None)
    table = tabulate_law(law, qcfg.grid)
    X, V = np.meshgrid(qcfg.grid.x_nodes, qcfg.grid.v_nodes, indexing="ij")
    formats.write_columns_csv(out / "fig9_law_policy.csv", {
        "x": X.ravel(), "v": V.ravel(), "u1": table.u1_star.ravel(),
        "u2": table.u2_star.astype(np.int64).ravel()})
    _write_phase(out / "fig9_phase_plane_law.csv", qcfg, LawSource(law))
    starts = [sc for sc in cfg.scenarios if sc.source == "law"]
    start = State(starts[0].x, starts[0].v) if starts else State(-0.120, 0.0)
    try:
        traj = simulate(qcfg.params, qcfg.weights, LawSource(law), start, cfg.t_final,
                        cfg.dt_control, cfg.substeps, cfg.feedback, cfg.term, cfg.settle_steps)
    except SimulationError as exc:
        log.error("figure trajectory: %s", exc)
        if exc.trajectory is None:
            return EXIT_SIMULATION
        traj = exc.trajectory
    formats.write_trajectory_csv(out / "fig9_trajectory.csv", traj)
    ep = EnergyParams.from_law(qcfg.params, law)
    formats.write_columns_csv(out / "fig9_energy.csv", _energy_columns(traj, ep))
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "fit": cmd_fit,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "export-figures": cmd_export_figures,
}


def _resolve_config(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    builtin = builtin_config_path(arg)
    if builtin.exists():
        return builtin
    raise CommandError(f"config not found: {arg}", EXIT_IO)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twospeed", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True,
                    help="YAML config path, or the name of a built-in config (paper-default)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--snapshot", help="policy snapshot to write (solve) or read")
    ap.add_argument("--law", help="law file to write (fit) or read")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(_resolve_config(args.config))
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CommandError as exc:
        log.error("%s", exc)
        return exc.code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
