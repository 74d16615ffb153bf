import numpy as np
import pytest

from targeted_bayes.data import SamplingDesign, estimate_rho, make_folds
from targeted_bayes.nuisance import fit_cross_fitted
from targeted_bayes.sim import DgpSpec, ScenarioSpec, generate
from targeted_bayes.tmle import run_tmle

_CRITERIA: dict[int, tuple[bool, str]] = {}


def simulated_fit(n: int, seed: int, scenario: str = "a", folds: int = 10):
    """Scenario dataset plus its cross-fitted targeted fit."""
    data = generate(DgpSpec(n, seed=seed))
    rng = np.random.default_rng(seed + 1)
    nuisance = fit_cross_fitted(
        data, make_folds(n, folds, rng, strata=data.label), ScenarioSpec(scenario).nuisance_spec()
    )
    fit = run_tmle(data, nuisance, estimate_rho(data, SamplingDesign.random()))
    return data, fit


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
