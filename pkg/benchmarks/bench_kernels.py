"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the numbers do not depend on
PROKCAT_PURE_PYTHON.  Outputs are compared before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from prokcat._kernels import _pykernels

try:
    from prokcat._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    keys = [rng.integers(0, 256, size=24, dtype=np.uint8).tobytes() for _ in range(2000)]
    knots = np.linspace(-1.6, 1.6, 12)  # G=5, k=3 on [-1, 1]
    x = rng.uniform(-1.0, 1.0, 20000)
    return {
        "fnv1a64 x2000 (24-byte keys)": lambda mod: [mod.fnv1a64(k) for k in keys],
        "bspline_basis 20000 pts, G=5 k=3": lambda mod: mod.bspline_basis(x, knots, 3),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        a, b = fn(_pykernels), fn(_ckernels)
        if not np.array_equal(np.asarray(a), np.asarray(b)) and not np.allclose(a, b, atol=1e-12):
            print(f"{name}: backends disagree")
            return 1
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
