"""Hot kernels: the compiled extension when built, else the numpy fallback.

Set ``PROKCAT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from prokcat._kernels import _pykernels

BACKEND = "python"
if os.environ.get("PROKCAT_PURE_PYTHON", "") in ("", "0"):
    try:
        from prokcat._kernels import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels


def fnv1a64(data: bytes) -> int:
    return _impl.fnv1a64(data)


def bspline_basis(x, knots, order: int):
    return _impl.bspline_basis(x, knots, order)
