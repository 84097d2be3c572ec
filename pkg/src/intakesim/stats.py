"""Series statistics: trailing rolling mean, first/last window deltas, LastN means and spreads."""

from __future__ import annotations

import numpy as np


def rolling_mean(series, window: int = 35) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average the available prefix."""
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot smooth an empty series")
    if window < 1:
        raise ValueError("window must be >= 1")
    out = np.empty(x.size)
    for i in range(x.size):  # direct sums rather than cumsum differences: no drift on long series
        lo = max(0, i + 1 - window)
        out[i] = x[lo:i + 1].mean()
    return out


def delta_first_last(series, window: int = 35) -> float:
    x = np.asarray(series, dtype=float)
    if x.size < 2 * window:
        raise ValueError(f"series of length {x.size} is shorter than two windows of {window}")
    return float(x[-window:].mean() - x[:window].mean())


def lastn_mean(series, n: int = 120) -> float:
    x = np.asarray(series, dtype=float)
    if x.size < n:
        raise ValueError(f"series of length {x.size} is shorter than N={n}")
    return float(x[-n:].mean())


def safe_stat(fn, series, k):
    """``fn(series, k)``, or NaN when the series is too short."""
    try:
        return fn(series, k)
    except ValueError:
        return float("nan")


def spread(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max()),
            "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}
