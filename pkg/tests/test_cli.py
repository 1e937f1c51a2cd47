import hashlib
import json
import logging
import time

import numpy as np
import yaml

from twospeed import cli, formats
from twospeed.config import Config, load_builtin
from twospeed.dp_solver import GridSpec, ValueTable
from twospeed.policy_fit import PiecewiseLinearLaw, tabulate_law


def _config(tmp_path, n=21, n_u1=5, name="cfg.yaml", n_v=None, **sections):
    n_v = n_v or n
    doc = load_builtin().to_dict()
    doc["grid"].update(n_x=n, n_v=n_v, n_u1=n_u1)
    # the target box must cover at least one cell of the coarse grid
    doc["termination"].update(half_width_x=0.3 / (n - 1), half_width_v=1.0 / (n_v - 1))
    doc["verify"].update(grid=[3, 3], t_final=20.0)
    doc["simulation"].update(t_final=10.0)
    for key, val in sections.items():
        doc[key].update(val)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def _run(cfg, out, *extra):
    return cli.main([*extra[:1], "--config", str(cfg), "--out", str(out), *extra[1:]])


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.iterdir()) if p.is_file()}


def test_smoke_solve_is_fast(tmp_path):
    cfg = _config(tmp_path, n=11, n_u1=3)
    assert _run(cfg, tmp_path / "warm", "solve") == 0      # compile once
    t0 = time.perf_counter()
    assert _run(cfg, tmp_path / "out", "solve") == 0
    assert time.perf_counter() - t0 < 1.0
    out = tmp_path / "out"
    assert {"snapshot_quadratic.hcdp", "tables_quadratic.csv",
            "solve_report_quadratic.json"} <= set(_digest(out))
    report = json.loads((out / "solve_report_quadratic.json").read_text())
    assert report["converged"] and report["feasible_cells"] > 0


def test_min_time_table_marks_infeasible_cells(tmp_path):
    cfg = _config(tmp_path, cost={"kind": "min_time"})
    assert _run(cfg, tmp_path, "solve") == 0
    rows = (tmp_path / "tables_min_time.csv").read_text().splitlines()[1:]
    blank = [r for r in rows if r.split(",")[4] == "0"]
    assert blank and all(r.split(",")[5] == "" for r in blank)


def test_exit_codes_are_distinct(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("actuator: {m_o: 1}\n")
    assert _run(bad, tmp_path / "a", "solve") == cli.EXIT_CONFIG
    assert _run(_config(tmp_path, grid={"n_u1": 4}, name="even.yaml"), tmp_path / "b",
                "solve") == cli.EXIT_CONFIG
    assert _run(_config(tmp_path), tmp_path / "c", "fit") == cli.EXIT_IO
    slow = _config(tmp_path, solver={"max_iter": 2}, name="slow.yaml")
    assert _run(slow, tmp_path / "d", "solve") == cli.EXIT_CONVERGENCE
    codes = {cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_CONVERGENCE, cli.EXIT_VERIFICATION,
             cli.EXIT_IO, cli.EXIT_FIT, cli.EXIT_SIMULATION}
    assert len(codes) == 7


def test_verification_failure_exit_code(tmp_path):
    cfg = _config(tmp_path)
    # gentle in the fast zone so the edge starts do not saturate there
    good = PiecewiseLinearLaw(0.02, (0.06, 0.02), (0.4, 0.1), 0.02)
    formats.save_law(tmp_path / "good.yaml", good)
    assert _run(cfg, tmp_path / "g", "verify", "--law", str(tmp_path / "good.yaml")) == 0
    verdict = json.loads((tmp_path / "g" / "verdict.json").read_text())
    assert verdict["ok"] and verdict["runs"] == 9 and not verdict["failed_runs"]
    assert (tmp_path / "g" / "energy_step_from_minus_120mm.csv").exists()
    bad = PiecewiseLinearLaw(0.02, (0.06, -0.02), (0.4, 0.1), 0.02)
    formats.save_law(tmp_path / "bad.yaml", bad)
    code = _run(cfg, tmp_path / "b", "verify", "--law", str(tmp_path / "bad.yaml"))
    assert code == cli.EXIT_VERIFICATION
    verdict = json.loads((tmp_path / "b" / "verdict.json").read_text())
    assert not verdict["ok"] and "dissipation_positive_1" in verdict["failed"]


def test_pipeline_is_idempotent(tmp_path):
    cfg = _config(tmp_path, n_v=101)     # fitting needs several speed rows below the gate
    digests = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for cmd in ("solve", "fit", "simulate"):
            assert _run(cfg, out, cmd) == 0, cmd
        digests.append(_digest(out))
    assert digests[0] == digests[1]
    assert {"law.yaml", "fit_report.json", "trajectory_step_from_minus_120mm.csv",
            "phase_law.csv", "simulate_summary.json"} <= set(digests[0])


def test_fit_warns_on_non_quadratic_snapshot(tmp_path, caplog):
    cfg = _config(tmp_path, cost={"kind": "min_time"})
    assert _run(cfg, tmp_path, "solve") == 0
    with caplog.at_level(logging.WARNING):
        code = _run(cfg, tmp_path, "fit", "--snapshot", str(tmp_path / "snapshot_min_time.hcdp"))
    assert code in (cli.EXIT_OK, cli.EXIT_FIT)
    assert any("min_time" in r.getMessage() for r in caplog.records
               if r.levelno == logging.WARNING)


def test_fit_recovers_synthetic_law(tmp_path):
    cfg_path = _config(tmp_path, n=101)
    cfg = Config.from_dict(yaml.safe_load(cfg_path.read_text()))
    spec = GridSpec.from_params(cfg.params, 101, 101, 5)
    law = PiecewiseLinearLaw(0.02, (0.03, 0.01), (0.05, 0.02), 0.02)
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    ones = np.ones((101, 101), bool)
    value = ValueTable(np.zeros((101, 101)), ones, cfg.term.contains(X, V))
    snap = formats.Snapshot(spec, value, tabulate_law(law, spec), {"cost_kind": "quadratic"})
    formats.save_snapshot(tmp_path / "syn.hcdp", snap)
    assert _run(cfg_path, tmp_path, "fit", "--snapshot", str(tmp_path / "syn.hcdp")) == 0
    got = formats.load_law(tmp_path / "law.yaml")
    assert np.allclose(got.gains_1, law.gains_1, rtol=0, atol=1e-10)
    assert np.allclose(got.gains_2, law.gains_2, rtol=0, atol=1e-10)
    report = json.loads((tmp_path / "fit_report.json").read_text())
    assert report["gains_larger_in_mode_2"] == [True, True]


def _scenarios(*items):
    return {"scenarios": [dict(name=n, x=x, v=v, source=s) for n, x, v, s in items]}


def test_simulate_origin_and_bad_start(tmp_path):
    cfg = _config(tmp_path, simulation=_scenarios(("rest", 0.0, 0.0, "law")))
    formats.save_law(tmp_path / "law.yaml", PiecewiseLinearLaw(0.02, (0.08, 0.05),
                                                              (0.1, 0.08), 0.02))
    assert _run(cfg, tmp_path, "simulate") == 0
    summary = json.loads((tmp_path / "simulate_summary.json").read_text())["rest"]
    assert summary["settled"] and summary["settle_time"] == 0.0
    assert summary["accumulated_cost"] == 0.0
    rows = (tmp_path / "trajectory_rest.csv").read_text().splitlines()
    assert len(rows) <= 2 + 5 * 10
    far = _config(tmp_path, simulation=_scenarios(("far", 0.3, 0.0, "law")), name="far.yaml")
    assert _run(far, tmp_path / "far", "simulate") == cli.EXIT_CONFIG


def test_export_figures_bundle(tmp_path):
    cfg = _config(tmp_path, n_v=101)
    assert _run(cfg, tmp_path, "export-figures") == 0
    names = set(_digest(tmp_path))
    for kind in ("min_time", "quadratic", "min_energy"):
        for stem in ("fig5_cost_to_go", "fig6_torque_policy", "fig7_mode_policy",
                     "fig8_phase_plane"):
            assert f"{stem}_{kind}.csv" in names
    assert {"fig9_law_policy.csv", "fig9_phase_plane_law.csv", "fig9_trajectory.csv",
            "fig9_energy.csv"} <= names
    before = _digest(tmp_path)
    assert _run(cfg, tmp_path, "export-figures") == 0       # reuses the snapshots
    assert _digest(tmp_path) == before
