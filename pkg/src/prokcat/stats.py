"""Pearson correlation with two-sided Student-t p-values."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import stdtr


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(2.0 * stdtr(df, -abs(t)))


def pearson(x, y) -> float:
    """Pearson r; NaN when either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return math.nan
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def pearson_test(x, y) -> tuple[float, float]:
    """Pearson r and two-sided p-value from t = r*sqrt((n-2)/(1-r^2))."""
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    r = pearson(x, y)
    if math.isnan(r):
        return r, math.nan
    if abs(r) >= 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, t_two_sided_p(t, n - 2)
