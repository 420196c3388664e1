import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mfgflow.measure import dirac, gaussian  # noqa: E402
from mfgflow.model import lq_model, nonlq_model  # noqa: E402
from mfgflow.solver import solve_global  # noqa: E402
from mfgflow.verify import compute_cascade  # noqa: E402

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def lq():
    model = lq_model()
    cascade = compute_cascade(model)
    # first call compiles the sweeps for this model family
    solve_global(model, cascade, dirac(1.0), 0.0, 0.01, 1e-3)
    return model, cascade


@pytest.fixture(scope="session")
def nonlq():
    model = nonlq_model()
    cascade = compute_cascade(model)
    solve_global(model, cascade, gaussian(0.0, 1.0, 4, 0), 0.0, 0.01, 1e-3)
    return model, cascade


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


@pytest.fixture
def record():
    def _record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
