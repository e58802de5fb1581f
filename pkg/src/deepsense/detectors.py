"""Classical sensing baselines and ROC construction.

Provides the total-energy detector, the optimal quadratic log-likelihood-ratio
detector for a Gaussian signal in Gaussian noise, and the empirical ROC sweep
shared by every detector (including the CNN, whose output probabilities are
just another score).
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics
from .errors import DimensionError


@dataclass(frozen=True)
class CovariancePair:
    """Composite-real covariances of one sensing interval under H1 and H0.

    c_x is the covariance of the received vector when the PU is present,
    c_z the covariance of the filtered noise alone, both 2N x 2N over the
    stacked (I; Q) sample vector.
    """

    c_x: np.ndarray
    c_z: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        c_x = np.asarray(self.c_x, dtype=np.float64)
        c_z = np.asarray(self.c_z, dtype=np.float64)
        for name, c in (("c_x", c_x), ("c_z", c_z)):
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise DimensionError(f"{name} must be square, got shape {c.shape}")
            scale = max(1.0, float(np.max(np.abs(c))))
            if np.max(np.abs(c - c.T)) > 1e-8 * scale:
                raise DimensionError(f"{name} is not symmetric")
        if c_x.shape != c_z.shape:
            raise DimensionError(f"c_x and c_z shapes differ: {c_x.shape} vs {c_z.shape}")
        object.__setattr__(self, "c_x", c_x)
        object.__setattr__(self, "c_z", c_z)

    @property
    def dim(self) -> int:
        return self.c_x.shape[0]

    @cached_property
    def precision_gap(self) -> np.ndarray:
        """C_z^-1 - C_x^-1, computed once and reused by every score call."""
        inv_z = numerics.invert_spd(self.c_z, self.jitter)
        inv_x = numerics.invert_spd(self.c_x, self.jitter)
        return inv_z - inv_x


def estimated_covariance_pair(pos_vectors, neg_vectors, jitter: float | None = None) -> CovariancePair:
    """CovariancePair estimated from labeled flattened intervals.

    Demonstrates the degradation of the optimal detector when the required
    covariances are only estimates.  Vectors are (n, 2N) arrays, occupied and
    noise-only respectively.
    """
    c_x = numerics.estimate_covariance(pos_vectors)
    c_z = numerics.estimate_covariance(neg_vectors)
    if jitter is None:
        jitter = max(numerics.default_jitter(c_x), numerics.default_jitter(c_z))
    return CovariancePair(c_x=c_x, c_z=c_z, jitter=jitter)


def _iq_of(x) -> np.ndarray:
    iq = getattr(x, "iq", x)
    iq = np.asarray(iq, dtype=np.float64)
    if iq.ndim != 2 or iq.shape[0] != 2:
        raise DimensionError(f"expected a 2 x N IQ matrix, got shape {iq.shape}")
    return iq


def energy_score(x) -> float:
    """Total received energy sum(I^2 + Q^2) over the sensing interval."""
    iq = _iq_of(x)
    return float(np.sum(iq * iq))


def energy_scores(iq_batch) -> np.ndarray:
    """Energy scores for a (count, 2, N) batch."""
    iq = np.asarray(iq_batch, dtype=np.float64)
    return np.einsum("ijk,ijk->i", iq, iq)


def llr_score(x, cov: CovariancePair) -> float:
    """Optimal Gaussian log-likelihood ratio 0.5 * v^T (C_z^-1 - C_x^-1) v.

    v is the interval flattened I-row-then-Q-row (an already-flat vector is
    accepted as-is).  Equal covariances give 0 for every input.
    """
    arr = np.asarray(getattr(x, "iq", x), dtype=np.float64)
    v = arr if arr.ndim == 1 else _iq_of(arr).reshape(-1)
    if v.size != cov.dim:
        raise DimensionError(f"interval of length {v.size} does not match covariances of dim {cov.dim}")
    return 0.5 * float(v @ cov.precision_gap @ v)


def llr_scores(iq_batch, cov: CovariancePair) -> np.ndarray:
    """LLR scores for a (count, 2, N) batch."""
    iq = np.asarray(iq_batch, dtype=np.float64)
    v = iq.reshape(iq.shape[0], -1)
    if v.shape[1] != cov.dim:
        raise DimensionError(f"intervals of length {v.shape[1]} do not match covariances of dim {cov.dim}")
    return 0.5 * np.einsum("ij,jk,ik->i", v, cov.precision_gap, v)


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC: pfa/pd per threshold, pfa ascending along the sweep."""

    thresholds: np.ndarray
    pfa: np.ndarray
    pd: np.ndarray

    def __post_init__(self):
        if not (len(self.thresholds) == len(self.pfa) == len(self.pd)):
            raise DimensionError("thresholds, pfa and pd must have equal length")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.pfa.tolist(), self.pd.tolist()))


def roc_from_scores(scores_h0, scores_h1) -> RocCurve:
    """Exact empirical ROC over all distinct score thresholds.

    A sample is declared occupied when its score is strictly above the
    threshold.  The sweep runs from the largest score (pfa 0) down to -inf
    (pfa 1, pd 1).
    """
    h0 = np.asarray(scores_h0, dtype=np.float64).ravel()
    h1 = np.asarray(scores_h1, dtype=np.float64).ravel()
    if h0.size == 0 or h1.size == 0:
        raise DimensionError("both score lists must be nonempty")
    if not (np.all(np.isfinite(h0)) and np.all(np.isfinite(h1))):
        raise DimensionError("scores must be finite")
    thresholds = np.unique(np.concatenate([h0, h1]))[::-1]
    thresholds = np.concatenate([thresholds, [-np.inf]])
    h0_sorted = np.sort(h0)
    h1_sorted = np.sort(h1)
    # fraction strictly above t
    pfa = 1.0 - np.searchsorted(h0_sorted, thresholds, side="right") / h0.size
    pd = 1.0 - np.searchsorted(h1_sorted, thresholds, side="right") / h1.size
    return RocCurve(thresholds=thresholds, pfa=pfa, pd=pd)


def roc_auc(curve: RocCurve) -> float:
    """Area under the empirical ROC (trapezoidal)."""
    return float(np.trapezoid(curve.pd, curve.pfa))
