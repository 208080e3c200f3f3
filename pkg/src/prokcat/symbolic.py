"""Symbolic extraction: replace every KAN edge with a fitted closed-form primitive.

Each edge is fitted as ``c * g(a*x + b) + e`` for ``g`` in a small library.
``(a, b)`` come from a coarse grid plus local refinement, ``(c, e)`` from a
linear solve.  Fits are then put in a canonical form so that equivalent
parameterisations print identically (``|c| = 1`` for abs and square, ``b = 0``
for exp, ``|a| = 1`` for log, ``a = 1`` for reciprocal and affine).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from prokcat.kan import KanEdge, KanNetwork, edge_eval

# ordered simplest first; ties within PARSIMONY_TOL of the best R^2 go to the earlier entry
PRIMITIVES = ("affine", "square", "abs", "exp", "log", "reciprocal", "silu")
PARSIMONY_TOL = 1e-9
N_SAMPLES = 256
N_SCALES = 64
N_OFFSETS = 33
SCALE_RANGE = (0.1, 20.0)
OFFSET_RANGE = 4.0  # offsets searched over |a| * [-4, 4]
REFINE_ROUNDS = 4


def _g(name: str, u: np.ndarray) -> np.ndarray:
    if name == "affine":
        return u
    if name == "square":
        return u * u
    if name == "abs":
        return np.abs(u)
    if name == "exp":
        return np.exp(np.minimum(u, 50.0))
    if name == "log":
        return np.log(np.maximum(u, 1e-300))
    if name == "reciprocal":
        return 1.0 / np.where(u == 0, 1e-300, u)
    if name == "silu":
        return u / (1.0 + np.exp(-np.clip(u, -500, 500)))
    raise KeyError(name)


def _valid(name: str, u: np.ndarray) -> np.ndarray:
    """Candidate rows whose inner argument keeps the primitive finite and well conditioned."""
    if name == "exp":
        return u.max(axis=-1) <= 30.0
    if name == "log":
        return u.min(axis=-1) >= 1e-2
    if name == "reciprocal":
        return (u.min(axis=-1) >= 1e-2) | (u.max(axis=-1) <= -1e-2)
    return np.ones(u.shape[:-1], dtype=bool)


@dataclass
class EdgeFit:
    primitive: str
    a: float
    b: float
    c: float
    e: float
    r2: float
    rmse: float = 0.0
    max_err: float = 0.0
    domain: tuple[float, float] = (-1.0, 1.0)

    def evaluate(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.c * _g(self.primitive, self.a * x + self.b) + self.e


def _scores(G: np.ndarray, y: np.ndarray):
    """R^2 and (c, e) of the best linear map of each row of ``G`` onto ``y``."""
    yc = y - y.mean()
    ss_y = float(yc @ yc)
    gm = G.mean(axis=-1, keepdims=True)
    gc = G - gm
    var = np.einsum("ij,ij->i", gc, gc)
    cov = gc @ yc
    ok = var > 1e-14 * G.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r2 = np.where(ok, cov * cov / (var * ss_y), -np.inf)
        c = np.where(ok, cov / var, 0.0)
    e = y.mean() - c * gm[:, 0]
    return r2, c, e


def _search(name: str, z: np.ndarray, y: np.ndarray):
    """Best (a, b) in standardized coordinates for one nonlinear primitive."""
    mags = np.geomspace(*SCALE_RANGE, N_SCALES)
    a = np.concatenate([-mags[::-1], mags])
    s = np.linspace(-OFFSET_RANGE, OFFSET_RANGE, N_OFFSETS)
    A = np.repeat(a, len(s))
    B = (np.abs(a)[:, None] * s[None, :]).reshape(-1)

    def evaluate(A, B):
        U = A[:, None] * z[None, :] + B[:, None]
        r2, _, _ = _scores(_g(name, U), y)
        r2 = np.where(_valid(name, U) & np.isfinite(r2), r2, -np.inf)
        return r2

    r2 = evaluate(A, B)
    k = int(np.argmax(r2))
    best_a, best_b, best_r2 = A[k], B[k], r2[k]
    if not np.isfinite(best_r2):
        return None
    da = math.log(mags[1] / mags[0])
    ds = s[1] - s[0]
    local = np.linspace(-1.0, 1.0, 15)
    for _ in range(REFINE_ROUNDS):
        cand_a = np.repeat(best_a * np.exp(da * local), len(local))
        cand_b = np.tile(local, len(local)) * ds * abs(best_a) + best_b
        r2 = evaluate(cand_a, cand_b)
        k = int(np.argmax(r2))
        if r2[k] > best_r2:
            best_a, best_b, best_r2 = cand_a[k], cand_b[k], r2[k]
        da /= 4.0
        ds /= 4.0
    return best_a, best_b


def _canonical(name: str, a: float, b: float, c: float, e: float):
    if name == "affine":
        return 1.0, 0.0, c * a, e + c * b
    if name in ("abs", "square") and c != 0.0:
        k = abs(c) if name == "abs" else math.sqrt(abs(c))
        k = math.copysign(k, a)  # even primitives: keep the inner slope positive
        return a * k, b * k, math.copysign(1.0, c), e
    if name == "exp":
        return a, 0.0, c * math.exp(b), e
    if name == "log" and a != 0.0:
        return math.copysign(1.0, a), b / abs(a), c, e + c * math.log(abs(a))
    if name == "reciprocal" and a != 0.0:
        return 1.0, b / a, c / a, e
    return a, b, c, e


def fit_primitive(name: str, x: np.ndarray, y: np.ndarray) -> EdgeFit:
    """Least-squares ``c*g(a*x+b)+e`` for one primitive on samples ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    mid, half = 0.5 * (lo + hi), max(0.5 * (hi - lo), 1e-12)
    z = (x - mid) / half
    ss_y = float(((y - y.mean()) ** 2).sum())
    if ss_y <= 1e-24 * max(1.0, float((y * y).sum())):
        # constant edge: every primitive fits with c = 0
        return _finish(name, 1.0, 0.0, 0.0, float(y.mean()), 1.0, x, y, (lo, hi))
    if name == "affine":
        az, bz = 1.0, 0.0
    else:
        found = _search(name, z, y)
        if found is None:
            return EdgeFit(name, 0.0, 0.0, 0.0, float(y.mean()), -math.inf, math.inf, math.inf, (lo, hi))
        az, bz = found
    g = _g(name, az * z + bz)
    r2, c, e = _scores(g[None, :], y)
    a = az / half
    b = bz - az * mid / half
    return _finish(name, a, b, float(c[0]), float(e[0]), float(r2[0]), x, y, (lo, hi))


def _finish(name, a, b, c, e, r2, x, y, domain) -> EdgeFit:
    a, b, c, e = _canonical(name, a, b, c, e)
    fit = EdgeFit(name, float(a), float(b), float(c), float(e), float(min(r2, 1.0)), domain=domain)
    resid = fit.evaluate(x) - y
    fit.rmse = float(np.sqrt(np.mean(resid * resid)))
    fit.max_err = float(np.max(np.abs(resid)))
    return fit


def fit_samples(x, y, primitives=PRIMITIVES, tol: float = PARSIMONY_TOL) -> EdgeFit:
    fits = [fit_primitive(p, x, y) for p in primitives]
    best = max(f.r2 for f in fits)
    for f in fits:  # library order is simplest first
        if f.r2 >= best - tol:
            return f
    return fits[0]


def fit_edge_symbolic(edge: KanEdge, domain: tuple[float, float] = (-1.0, 1.0),
                      n_samples: int = N_SAMPLES, tol: float = PARSIMONY_TOL) -> EdgeFit:
    x = np.linspace(domain[0], domain[1], n_samples)
    return fit_samples(x, edge_eval(edge, x), tol=tol)


# ---------------------------------------------------------------- expression tree

@dataclass
class Var:
    name: str

    def evaluate(self, env):
        return np.asarray(env[self.name], dtype=np.float64)

    def render(self, digits=2) -> str:
        return self.name

    def to_dict(self):
        return {"type": "var", "name": self.name}


@dataclass
class Term:
    primitive: str
    a: float
    b: float
    c: float
    child: "Var | Sum"

    def evaluate(self, env):
        return self.c * _g(self.primitive, self.a * self.child.evaluate(env) + self.b)

    def inner(self, digits: int) -> str:
        arg = self.child.render(digits)
        if isinstance(self.child, Sum):
            arg = f"({arg})"
        text = arg if self.a == 1.0 else f"{self.a:.{digits}f}*{arg}"
        if round(self.b, digits) != 0:
            text += f" {'-' if self.b < 0 else '+'} {abs(self.b):.{digits}f}"
        return text

    def render_abs(self, digits=2) -> str:
        """Rendering with the magnitude of ``c``; the caller places the sign."""
        mag = f"{abs(self.c):.{digits}f}"
        inner = self.inner(digits)
        if self.primitive == "affine":
            return f"{mag}*{inner}" if " " not in inner else f"{mag}*({inner})"
        if self.primitive == "abs":
            return f"{mag}*|{inner}|"
        if self.primitive == "square":
            return f"{mag}*({inner})^2"
        if self.primitive == "exp":
            return f"{mag}*e^({inner})"
        if self.primitive == "log":
            return f"{mag}*log({inner})"
        if self.primitive == "reciprocal":
            return f"{mag}/({inner})"
        return f"{mag}*silu({inner})"

    def to_dict(self):
        return {"type": "term", "primitive": self.primitive, "a": self.a, "b": self.b, "c": self.c,
                "child": self.child.to_dict()}


@dataclass
class Sum:
    terms: list[Term]
    const: float = 0.0

    def evaluate(self, env):
        out = None
        for t in self.terms:
            v = t.evaluate(env)
            out = v if out is None else out + v
        return self.const if out is None else out + self.const

    def render(self, digits=2) -> str:
        parts = []
        for t in self.terms:
            if t.c == 0.0:
                continue
            body = t.render_abs(digits)
            if not parts:
                parts.append(("-" if t.c < 0 else "") + body)
            else:
                parts.append(("- " if t.c < 0 else "+ ") + body)
        const = round(self.const, digits)
        if not parts:
            return f"{const:.{digits}f}"
        if const != 0:
            parts.append(("- " if const < 0 else "+ ") + f"{abs(const):.{digits}f}")
        return " ".join(parts)

    def to_dict(self):
        return {"type": "sum", "const": self.const, "terms": [t.to_dict() for t in self.terms]}


def expr_from_dict(d):
    kind = d["type"]
    if kind == "var":
        return Var(d["name"])
    if kind == "term":
        return Term(d["primitive"], d["a"], d["b"], d["c"], expr_from_dict(d["child"]))
    if kind == "sum":
        return Sum([expr_from_dict(t) for t in d["terms"]], d["const"])
    raise ValueError(f"unknown expression node {kind!r}")


@dataclass
class SymbolicFormula:
    input_names: list[str]
    outputs: list[Sum]
    edge_fits: dict[tuple[int, int, int], EdgeFit] = field(default_factory=dict)

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        env = {n: X[:, i] for i, n in enumerate(self.input_names)}
        cols = [np.broadcast_to(np.asarray(o.evaluate(env), dtype=np.float64), (X.shape[0],)) for o in self.outputs]
        return np.stack(cols, axis=1)

    def render(self, digits: int = 2) -> str:
        return "\n".join(o.render(digits) for o in self.outputs)

    def edge_r2(self) -> dict[tuple[int, int, int], float]:
        return {k: f.r2 for k, f in self.edge_fits.items()}

    def fit_error_bound(self) -> float:
        """Sum of per-edge RMSEs (exact composition bound for a single layer)."""
        return float(sum(f.rmse for f in self.edge_fits.values()))

    def to_dict(self):
        return {
            "input_names": list(self.input_names),
            "outputs": [o.to_dict() for o in self.outputs],
            "edges": [{"layer": l, "out": j, "in": i, **{k: v for k, v in asdict(f).items()}}
                      for (l, j, i), f in sorted(self.edge_fits.items())],
        }

    @classmethod
    def from_dict(cls, d) -> "SymbolicFormula":
        fits = {}
        for rec in d.get("edges", []):
            rec = dict(rec)
            key = (rec.pop("layer"), rec.pop("out"), rec.pop("in"))
            rec["domain"] = tuple(rec["domain"])
            fits[key] = EdgeFit(**rec)
        return cls(list(d["input_names"]), [expr_from_dict(o) for o in d["outputs"]], fits)


def _layer_domains(net: KanNetwork, domains, rng_seed: int = 0, n: int = 4096):
    rng = np.random.default_rng(rng_seed)
    lo = np.array([d[0] for d in domains])
    hi = np.array([d[1] for d in domains])
    h = rng.uniform(lo, hi, size=(n, len(domains)))
    h = np.vstack([h, lo, hi])
    out = [list(domains)]
    for layer in range(net.n_layers - 1):
        h = net.layer_numpy(layer, h)
        out.append([(float(h[:, j].min()), float(h[:, j].max())) for j in range(h.shape[1])])
    return out


def extract_formula(net: KanNetwork, input_names, domains=None, n_samples: int = N_SAMPLES,
                    tol: float = PARSIMONY_TOL) -> SymbolicFormula:
    names = list(input_names)
    if len(names) != net.widths[0]:
        raise ValueError(f"need {net.widths[0]} input names, got {len(names)}")
    domains = [tuple(map(float, d)) for d in (domains or [(-1.0, 1.0)] * net.widths[0])]
    per_layer = _layer_domains(net, domains)
    fits: dict[tuple[int, int, int], EdgeFit] = {}
    nodes: list = [Var(n) for n in names]
    for layer in range(net.n_layers):
        n_in, n_out = net.widths[layer], net.widths[layer + 1]
        new_nodes = []
        for j in range(n_out):
            terms, const = [], float(net.bias[layer].data[j])
            for i in range(n_in):
                lo, hi = per_layer[layer][i]
                if hi - lo < 1e-12:
                    lo, hi = lo - 1e-6, hi + 1e-6
                fit = fit_edge_symbolic(net.edge(layer, j, i), (lo, hi), n_samples, tol)
                fits[(layer, j, i)] = fit
                terms.append(Term(fit.primitive, fit.a, fit.b, fit.c, nodes[i]))
                const += fit.e
            new_nodes.append(Sum(terms, const))
        nodes = new_nodes
    return SymbolicFormula(names, nodes, fits)
