import numpy as np
import pytest

from tumorbranch import build_gompertz_bd, build_sparse_rates
from tumorbranch.branching import BranchingModel

# 3-state workhorse chain used across the suite.
M3_ENTRIES = [(1, 2, 2.0), (2, 3, 2.0), (2, 1, 1.0), (3, 2, 3.0), (1, 0, 1.0), (3, 0, 1.0)]


@pytest.fixture
def m3():
    return build_sparse_rates(M3_ENTRIES, 3)


def single_state(death):
    return build_sparse_rates([(1, 0, float(death))], 1)


def single_model(birth, death):
    return BranchingModel(single_state(death), np.array([float(birth)]))


def gompertz_model(a, n, k, kappa, r=1.0, x_cap=None, tail_policy="kill"):
    """Gompertz chain with the capped power creation family."""
    rates = build_gompertz_bd(a, n, k, tail_policy)
    cap = n if x_cap is None else x_cap
    beta = kappa * np.minimum(np.arange(1, k + 1), cap).astype(float) ** r
    info = {"family": "power_cap", "kappa": kappa, "r": r, "x_cap": cap}
    return BranchingModel(rates, beta, info)


@pytest.fixture
def m3_model(m3):
    return BranchingModel(m3, np.ones(3))
