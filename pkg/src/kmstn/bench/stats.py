"""Summary statistics used by the benchmark harness.

Conventions, fixed so that results can be recomputed by hand:

* median: the usual midpoint median (mean of the two middle values for even n);
* percentiles: nearest-rank, ``sorted(x)[ceil(p/100 * n) - 1]``;
* jitter: absolute differences of consecutive latencies;
* rolling statistics: full windows only; standard deviations use ddof=1.
"""
from __future__ import annotations

import math
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ..errors import InsufficientData

DEFAULT_WINDOW = 4
CORRELATION_METRICS = ("error_rate", "keyrate_bps", "p95_keyrate_bps", "n_requests", "concurrency")


def median(xs: Sequence[float]) -> Optional[float]:
    if len(xs) == 0:
        return None
    return float(np.median(np.asarray(xs, dtype=float)))


def percentile(xs: Sequence[float], p: float) -> Optional[float]:
    """Nearest-rank percentile."""
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    if len(xs) == 0:
        return None
    ordered = sorted(float(x) for x in xs)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def jitter(xs: Sequence[float]) -> List[float]:
    return [abs(float(b) - float(a)) for a, b in zip(xs, xs[1:])]


def rolling_mean(xs: Sequence[float], window: int = DEFAULT_WINDOW) -> List[float]:
    if window < 1:
        raise ValueError("window must be positive")
    arr = np.asarray(xs, dtype=float)
    if len(arr) < window:
        return []
    return [float(v) for v in np.lib.stride_tricks.sliding_window_view(arr, window).mean(axis=1)]


def rolling_std(xs: Sequence[float], window: int = DEFAULT_WINDOW) -> List[float]:
    if window < 2:
        raise ValueError("window must be at least 2")
    arr = np.asarray(xs, dtype=float)
    if len(arr) < window:
        return []
    return [float(v) for v in np.lib.stride_tricks.sliding_window_view(arr, window).std(axis=1, ddof=1)]


def mean_std(xs: Sequence[float]):
    if len(xs) == 0:
        return None, None
    arr = np.asarray(xs, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def latency_summary(latencies_ms: Sequence[float], window: int = DEFAULT_WINDOW) -> Dict[str, Optional[float]]:
    jit = jitter(latencies_ms)
    return {
        "latency_median_ms": median(latencies_ms),
        "jitter_median_ms": median(jit),
        "jitter_p95_ms": percentile(jit, 95),
        "rolling_std_p95_ms": percentile(rolling_std(latencies_ms, window), 95),
    }


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Pearson correlation; ``None`` when either column is constant."""
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if len(a) != len(b):
        raise ValueError("columns differ in length")
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    da, db = a - a.mean(), b - b.mean()
    r = float(np.dot(da, db) / math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db))))
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    return pearson(rankdata(x), rankdata(y))


def correlate(rows: Sequence[Mapping[str, float]],
              metrics: Sequence[str] = CORRELATION_METRICS) -> dict:
    """Pearson and Spearman matrices over ``metrics`` across experiments."""
    if len(rows) < 3:
        raise InsufficientData(f"need at least 3 experiments, got {len(rows)}")
    cols = {}
    for m in metrics:
        vals = [r.get(m) for r in rows]
        cols[m] = [math.nan if v is None else float(v) for v in vals]
    out = {"metrics": list(metrics), "n": len(rows), "pearson": [], "spearman": []}
    for a in metrics:
        prow, srow = [], []
        for b in metrics:
            xa, xb = np.asarray(cols[a]), np.asarray(cols[b])
            ok = ~(np.isnan(xa) | np.isnan(xb))
            prow.append(pearson(xa[ok], xb[ok]))
            srow.append(spearman(xa[ok], xb[ok]))
        out["pearson"].append(prow)
        out["spearman"].append(srow)
    return out
