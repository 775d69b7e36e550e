import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, x, eps=1e-3):
    """Central finite differences of scalar-valued f at x, computed in float64.

    f takes a float64 array and returns a python float; the oracle never
    touches the autodiff engine.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2.0 * eps)
        it.iternext()
    return grad


def assert_close_rel(actual, expected, rtol, atol=1e-6):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = np.maximum(np.abs(expected), atol / rtol if rtol else atol)
    rel = np.abs(actual - expected) / denom
    worst = rel.max() if rel.size else 0.0
    assert worst <= rtol, f"max relative error {worst:.3e} > {rtol:.1e}"
