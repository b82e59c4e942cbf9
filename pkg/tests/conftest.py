import numpy as np
import pytest


def central_diff(f, arr, eps=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
