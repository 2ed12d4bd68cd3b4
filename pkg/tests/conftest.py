import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from odemix.basis import SplineBasis
from odemix.dynamics import GradientFunction


@pytest.fixture(scope="session")
def sim_basis():
    """The simulation's true basis: 4 functions, knots (0.35, 0.6, 0.85, 1.1)."""
    return SplineBasis.uniform([0.35, 0.6, 0.85, 1.1])


@pytest.fixture(scope="session")
def sim_gradient(sim_basis):
    return GradientFunction(sim_basis, np.array([0.1, 1.2, 1.6, 0.4]))


@pytest.fixture(scope="session")
def wide_clamped_basis():
    """Clamped cubic on [0, 3]; constants/linears are reproducible on it."""
    return SplineBasis.clamped([0.5, 1.0, 1.5, 2.0, 2.5], 0.0, 3.0)


def greville(basis):
    """Greville abscissae: coefficients reproducing g(x) = x on a clamped basis."""
    t = basis.knot_vector
    p = basis.degree
    return np.array([t[k + 1 : k + p + 1].mean() for k in range(basis.n_full)])[
        basis.drop_leading :
    ]
