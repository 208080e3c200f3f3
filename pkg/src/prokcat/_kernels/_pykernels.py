"""Reference implementations of the hot kernels (numpy / pure Python)."""
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def bspline_basis(x, knots, order):
    """Cox-de Boor values and derivatives at every point of the 1-d array ``x``.

    ``order`` is the polynomial degree; returns two (n, len(knots)-order-1) arrays.
    """
    x = np.asarray(x, dtype=np.float64)[:, None]
    t = np.asarray(knots, dtype=np.float64)
    b = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    prev = b
    for k in range(1, order + 1):
        prev = b
        left_den = t[k:-1] - t[:-k - 1]
        right_den = t[k + 1:] - t[1:-k]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x - t[:-k - 1]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[k + 1:] - x) / right_den, 0.0)
        b = left * prev[:, :-1] + right * prev[:, 1:]
    if order == 0:
        return b, np.zeros_like(b)
    k = order
    left_den = t[k:-1] - t[:-k - 1]
    right_den = t[k + 1:] - t[1:-k]
    with np.errstate(divide="ignore"):
        lw = np.where(left_den > 0, k / left_den, 0.0)
        rw = np.where(right_den > 0, k / right_den, 0.0)
    db = lw * prev[:, :-1] - rw * prev[:, 1:]
    return b, db
