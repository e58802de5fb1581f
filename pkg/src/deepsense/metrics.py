"""Scalar metrics derived from ROC curves and example-count sweeps."""

import numpy as np

from .detectors import RocCurve
from .errors import DimensionError


def pd_at_pfa(roc: RocCurve, pfa_star: float) -> float:
    """Detection probability at a target false-alarm rate.

    Linear interpolation between the bracketing sweep points; at a repeated
    pfa the best (largest) pd achieved there is used.  pfa_star outside the
    curve clamps to the endpoints.
    """
    if len(roc.pfa) == 0:
        raise DimensionError("empty ROC curve")
    if not 0.0 <= pfa_star <= 1.0:
        raise DimensionError(f"pfa_star must be in [0, 1], got {pfa_star}")
    # pd is nondecreasing along the sweep, so the last point of a pfa run
    # carries its best pd
    uniq, last_idx = np.unique(roc.pfa[::-1], return_index=True)
    best_pd = roc.pd[::-1][last_idx]
    return float(np.interp(pfa_star, uniq, best_pd))


def auc_over_examples(curve, span=(0.0, 1000.0)) -> float:
    """Trapezoidal area under a (n_examples, pd) curve over the given span.

    The curve must be sorted by n_examples; if it stops short of an endpoint
    the boundary value extends flat (clamped), matching np.interp.
    """
    pts = list(curve)
    if not pts:
        raise DimensionError("empty curve")
    ns = np.asarray([p[0] for p in pts], dtype=np.float64)
    pds = np.asarray([p[1] for p in pts], dtype=np.float64)
    if np.any(np.diff(ns) < 0):
        raise DimensionError("curve must be sorted by n_examples")
    lo, hi = float(span[0]), float(span[1])
    if hi <= lo:
        raise DimensionError(f"invalid span {span}")
    grid = np.unique(np.concatenate([[lo, hi], ns[(ns > lo) & (ns < hi)]]))
    vals = np.interp(grid, ns, pds)
    return float(np.trapezoid(vals, grid))


def covers_span(curve, span=(0.0, 1000.0)) -> bool:
    """Whether the curve's schedule reaches both span endpoints."""
    ns = [p[0] for p in curve]
    return bool(ns) and min(ns) <= span[0] and max(ns) >= span[1]
