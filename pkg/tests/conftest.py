import numpy as np
import pytest

from gformula_mi.data import LongitudinalTable, Regime
from gformula_mi.rng import make_rng
from gformula_mi.simstudy import DGM_SCHEMA, generate_dgm


@pytest.fixture
def schema():
    return DGM_SCHEMA


@pytest.fixture
def dgm_table():
    def make(n=500, seed=1):
        return generate_dgm(n, make_rng(seed))
    return make


@pytest.fixture
def regimes(schema):
    return [Regime.from_values(schema, [1, 1, 1], name="1,1,1"),
            Regime.from_values(schema, [0, 0, 0], name="0,0,0")]


def table_from_rows(schema, rows):
    """Build a table from a list of rows; None marks a missing cell."""
    vals = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=float)
    return LongitudinalTable(schema, vals, np.isnan(vals), np.ones(len(rows), dtype=np.int8))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
