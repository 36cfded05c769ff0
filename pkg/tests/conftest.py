"""Shared test fixtures.

The simplex kernels are jit-compiled on first use. A session fixture runs
one tiny solve up front so tests with wall-clock budgets measure the
solver, not the compiler.
"""

import numpy as np
import pytest

from longreg.simplex import lad_solve_batch, lad_solve_single


@pytest.fixture(scope="session", autouse=True)
def warm_solver_kernels():
    w = np.array([[-1.0, 1.0]])
    lad_solve_single(w, 1.0, np.array([1.0]))
    lad_solve_batch(w, 1.0, np.array([[1.0], [0.5]]))
    yield
