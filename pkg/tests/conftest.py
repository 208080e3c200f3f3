import numpy as np
import pytest

from prokcat import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    T.set_debug(True)
    yield
    T.set_debug(False)


def numeric_grad(fn, p, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of tensor ``p``."""
    base = p.data.copy()
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        hi, lo = base.copy(), base.copy()
        hi[idx] += h
        lo[idx] -= h
        p.data = hi
        f_hi = float(fn().data)
        p.data = lo
        f_lo = float(fn().data)
        out[idx] = (f_hi - f_lo) / (2 * h)
    p.data = base
    return out


def assert_gradcheck(fn, params, rtol=1e-4, atol=1e-6, h=1e-6):
    """Compare backward() against central finite differences for each tensor in ``params``."""
    T.zero_grads(params)
    T.backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numeric_grad(fn, p, h)
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        bad = (err > atol) & (err > rtol * scale)
        assert not bad.any(), (
            f"{p.name or p.shape}: max abs err {err.max():.3g} at {np.unravel_index(err.argmax(), err.shape)}"
        )
        worst = max(worst, float(np.max(np.where(scale > atol, err / np.maximum(scale, 1e-300), 0.0))))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
