import numpy as np
import pytest

from panel_dml.panel import PanelDataset
from panel_dml.weather import get_schema

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


def linear_panel(n_units=60, n_years=4, beta=(0.02, -0.05, 0.001), noise=1.0, seed=0):
    """Yearly-linear panel with unit effects, year effects and a known linear response."""
    rng = np.random.default_rng(seed)
    schema = get_schema("yearly_linear")
    n = n_units * n_years
    X = np.column_stack([rng.normal(1500, 150, n), rng.gamma(4, 10, n), rng.gamma(20, 25, n)])
    unit = np.repeat(np.arange(n_units), n_years)
    year = np.tile(np.arange(2000, 2000 + n_years), n_units)
    y = rng.normal(1, 1, n_units)[unit] + 0.1 * (year - 2000) + X @ np.asarray(beta) + noise * rng.normal(size=n)
    ids = np.array([f"u{u:03d}" for u in unit])
    return PanelDataset.build(ids, year, y, X, schema.covariate_names, schema)


@pytest.fixture
def small_linear_panel():
    return linear_panel()
