"""Kolmogorov-Arnold network layers with B-spline + SiLU edge functions.

Each edge computes ``phi(x) = w_b * silu(x) + w_s * sum_m c_m B_m(x)`` on a
fixed uniform grid; a layer's output node sums its incoming edges plus a bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prokcat import _kernels
from prokcat import tensor as T

DEFAULT_INTERVALS = 5
DEFAULT_ORDER = 3
# Grid-refinement steps of the reference KAN recipe.  Grids are fixed here, so
# the value is carried in configs and checkpoints but has no effect.
DEFAULT_STEPS = 5


@dataclass(frozen=True)
class BSplineGrid:
    lower: float = -1.0
    upper: float = 1.0
    intervals: int = DEFAULT_INTERVALS
    order: int = DEFAULT_ORDER

    def __post_init__(self):
        if self.intervals < 1 or self.order < 1:
            raise ValueError("B-spline grid needs intervals >= 1 and order >= 1")
        if not self.upper > self.lower:
            raise ValueError("B-spline grid needs upper > lower")

    @property
    def knots(self) -> np.ndarray:
        h = (self.upper - self.lower) / self.intervals
        return self.lower + h * np.arange(-self.order, self.intervals + self.order + 1, dtype=np.float64)

    @property
    def n_basis(self) -> int:
        return self.intervals + self.order


def bspline_basis(x, grid: BSplineGrid) -> np.ndarray:
    """Basis values at scalar ``x`` (vector of G+k) or at each entry of an array (..., G+k)."""
    arr = np.asarray(x, dtype=np.float64)
    vals, _ = _kernels.bspline_basis(arr.reshape(-1), grid.knots, grid.order)
    return vals.reshape(arr.shape + (grid.n_basis,))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


@dataclass
class KanEdge:
    w_b: float
    w_s: float
    coeffs: np.ndarray
    grid: BSplineGrid


def edge_eval(edge: KanEdge, x):
    x = np.asarray(x, dtype=np.float64)
    return edge.w_b * silu(x) + edge.w_s * (bspline_basis(x, edge.grid) @ np.asarray(edge.coeffs))


def lstsq_coefficients(grid: BSplineGrid, x, y, ridge: float = 0.0) -> np.ndarray:
    """Spline coefficients minimising ||B(x) c - y||^2 (+ ridge ||c||^2)."""
    B = bspline_basis(np.asarray(x, dtype=np.float64).reshape(-1), grid)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if ridge > 0:
        return np.linalg.solve(B.T @ B + ridge * np.eye(B.shape[1]), B.T @ y)
    return np.linalg.lstsq(B, y, rcond=None)[0]


class KanNetwork:
    """Layer widths ``[n_0, ..., n_L]``; parameters are tensors so the net trains on a tape.

    Per layer ``l``: ``w_b[l]`` and ``w_s[l]`` are ``(n_out, n_in)``,
    ``coeffs[l]`` is ``(n_out, n_in, G+k)`` and ``bias[l]`` is ``(n_out,)``.
    """

    def __init__(self, widths, grid: BSplineGrid | None = None, rng: np.random.Generator | None = None,
                 coeff_scale: float = 0.1, zero: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"KAN widths must list at least two positive sizes, got {widths}")
        self.widths = widths
        self.grid = grid or BSplineGrid()
        rng = rng or np.random.default_rng(0)
        nb = self.grid.n_basis
        self.w_b, self.w_s, self.coeffs, self.bias = [], [], [], []
        for l, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero:
                wb, ws, c = np.zeros((n_out, n_in)), np.zeros((n_out, n_in)), np.zeros((n_out, n_in, nb))
            else:
                wb = T.glorot(rng, (n_out, n_in), fan_in=n_in, fan_out=n_out)
                ws = np.ones((n_out, n_in))
                c = rng.normal(0.0, coeff_scale / np.sqrt(n_in), (n_out, n_in, nb))
            self.w_b.append(T.parameter(wb, f"kan{l}.w_b"))
            self.w_s.append(T.parameter(ws, f"kan{l}.w_s"))
            self.coeffs.append(T.parameter(c, f"kan{l}.coeffs"))
            self.bias.append(T.parameter(np.zeros(n_out), f"kan{l}.bias"))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for l in range(self.n_layers):
            out[f"kan{l}.w_b"] = self.w_b[l]
            out[f"kan{l}.w_s"] = self.w_s[l]
            out[f"kan{l}.coeffs"] = self.coeffs[l]
            out[f"kan{l}.bias"] = self.bias[l]
        return out

    def load_parameters(self, params: dict[str, T.Tensor]) -> None:
        for l in range(self.n_layers):
            self.w_b[l] = params[f"kan{l}.w_b"]
            self.w_s[l] = params[f"kan{l}.w_s"]
            self.coeffs[l] = params[f"kan{l}.coeffs"]
            self.bias[l] = params[f"kan{l}.bias"]

    def edge(self, layer: int, out_index: int, in_index: int) -> KanEdge:
        return KanEdge(float(self.w_b[layer].data[out_index, in_index]),
                       float(self.w_s[layer].data[out_index, in_index]),
                       self.coeffs[layer].data[out_index, in_index].copy(), self.grid)

    def layer_forward(self, layer: int, x: T.Tensor) -> T.Tensor:
        n_out, n_in = self.widths[layer + 1], self.widths[layer]
        nb = self.grid.n_basis
        basis = T.bspline(x, self.grid.knots, self.grid.order)  # (..., n_in, nb)
        basis = T.reshape(basis, x.shape[:-1] + (n_in * nb,))
        eff = T.mul(T.reshape(self.w_s[layer], (n_out, n_in, 1)), self.coeffs[layer])
        spline = T.matmul(basis, T.transpose(T.reshape(eff, (n_out, n_in * nb))))
        base = T.matmul(T.silu(x), T.transpose(self.w_b[layer]))
        return T.add(T.add(spline, base), self.bias[layer])

    def layer_numpy(self, layer: int, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.layer_forward(layer, T.as_tensor(np.atleast_2d(x))).data


def kan_forward(net: KanNetwork, x) -> T.Tensor:
    """Compose the layers; ``x`` is ``(n_0,)`` or ``(B, n_0)``."""
    x = T.as_tensor(x)
    single = x.ndim == 1
    if x.shape[-1] != net.widths[0]:
        raise T.ShapeError(f"KAN expects input width {net.widths[0]}, got {x.shape[-1]}")
    h = T.reshape(x, (1, x.shape[0])) if single else x
    for layer in range(net.n_layers):
        h = net.layer_forward(layer, h)
    return T.reshape(h, (net.widths[-1],)) if single else h


def param_count(net: KanNetwork) -> int:
    per_edge = net.grid.n_basis + 2
    return sum(n_in * n_out * per_edge + n_out for n_in, n_out in zip(net.widths[:-1], net.widths[1:]))
