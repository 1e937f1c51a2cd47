import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twospeed.config import load_builtin  # noqa: E402
from twospeed.dp_solver import GridSpec, TerminationSpec, value_iteration  # noqa: E402
from twospeed.model import CostKind  # noqa: E402
from twospeed.policy_fit import distill  # noqa: E402

# acceptance lines collected by tests and echoed in the terminal summary
ACCEPTANCE = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, "PASS" if ok else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture(scope="session")
def default_config():
    return load_builtin("paper-default")


class Solves:
    """Lazily solved tables, one per (cost kind, resolution), shared by a session."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._cache = {}

    def get(self, kind, n=None, n_u1=None):
        cfg = self.cfg
        n = n or cfg.grid.n_x
        n_u1 = n_u1 or cfg.grid.n_u1
        key = (CostKind(kind), n, n_u1)
        if key not in self._cache:
            spec = GridSpec.from_params(cfg.params, n, n, n_u1, cfg.grid.dt)
            term = cfg.term
            if n < cfg.grid.n_x:
                term = TerminationSpec(max(term.target_half_width_x, spec.hx),
                                       max(term.target_half_width_v, spec.hv),
                                       term.out_of_bound_cost, term.target_cost)
            weights = cfg.with_cost(kind).weights
            value, policy, report = value_iteration(cfg.params, weights, spec, term,
                                                    tol=cfg.tol, max_iter=cfg.max_iter)
            self._cache[key] = (spec, term, weights, value, policy, report)
        return self._cache[key]

    def law(self, n=None):
        spec, _, _, value, policy, _ = self.get(CostKind.QUADRATIC, n)
        return distill(policy, spec, self.cfg.threshold, self.cfg.params, value)


@pytest.fixture(scope="session")
def solves(default_config):
    return Solves(default_config)
