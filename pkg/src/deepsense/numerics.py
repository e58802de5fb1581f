"""Dense real linear algebra shared by the detectors and the domain-adaptation solver.

Everything here works on plain float64 numpy arrays.  Covariances follow the
maximum-likelihood 1/n convention, SPD inversion goes through a Cholesky
factorization, and the generalized eigenproblem is solved by whitening with
the Cholesky factor of the right-hand matrix instead of forming B^-1 A.
"""

from typing import NamedTuple

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import DimensionError, SingularMatrixError


class EigenPairs(NamedTuple):
    """Eigenvalues in descending order; vectors[:, i] pairs with values[i]."""

    values: np.ndarray
    vectors: np.ndarray


def _as_square(m, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def default_jitter(m: np.ndarray) -> float:
    """Diagonal jitter that keeps near-singular kernel matrices factorizable."""
    m = _as_square(m, "m")
    return 1e-8 * float(np.trace(m)) / m.shape[0]


def estimate_covariance(samples) -> np.ndarray:
    """Maximum-likelihood covariance (1/n) of a set of length-d vectors.

    Accepts any (n, d) array-like.  The result is explicitly symmetrized.
    """
    try:
        x = np.asarray(samples, dtype=np.float64)
    except ValueError as exc:
        raise DimensionError(f"samples have inconsistent lengths: {exc}") from exc
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D sample array, got ndim={x.ndim}")
    n = x.shape[0]
    if n < 2:
        raise DimensionError(f"need at least 2 samples, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    return 0.5 * (cov + cov.T)


def _cholesky_lower(a: np.ndarray, name: str) -> np.ndarray:
    c, info = lapack.dpotrf(a, lower=1)
    if info > 0:
        raise SingularMatrixError(
            f"{name} is not positive definite: Cholesky failed at pivot {info}",
            pivot=int(info),
        )
    if info < 0:
        raise SingularMatrixError(f"illegal value in argument {-info} of dpotrf")
    return c


def invert_spd(m, jitter: float = 0.0) -> np.ndarray:
    """Inverse of (M + jitter*I) via Cholesky; raises if not PD after jitter."""
    a = _as_square(m, "M")
    if jitter < 0:
        raise DimensionError("jitter must be >= 0")
    if jitter > 0:
        a = a + jitter * np.eye(a.shape[0])
    c = _cholesky_lower(a, "M + jitter*I")
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise SingularMatrixError(f"dpotri failed with info={info}")
    # dpotri fills only the lower triangle
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv


def leading_eigenvectors_of_pencil(a, b, m: int) -> EigenPairs:
    """Top-m eigenpairs of B^-1 A for symmetric PSD A and symmetric PD B.

    Solved as a symmetric eigenproblem of L^-1 A L^-T where B = L L^T, so
    B^-1 A is never formed.  Returned eigenvectors v satisfy
    A v = lambda B v and are B-orthonormal.
    """
    a = _as_square(a, "A")
    b = _as_square(b, "B")
    if a.shape != b.shape:
        raise DimensionError(f"A and B shapes differ: {a.shape} vs {b.shape}")
    dim = a.shape[0]
    if not 1 <= m <= dim:
        raise DimensionError(f"m must be in [1, {dim}], got {m}")
    ell = _cholesky_lower(b, "B")
    # whiten: W = L^-1 A, M = L^-1 A L^-T
    w = solve_triangular(ell, a, lower=True)
    white = solve_triangular(ell, w.T, lower=True)
    white = 0.5 * (white + white.T)
    vals, vecs = np.linalg.eigh(white)
    order = np.argsort(vals)[::-1][:m]
    top_vals = vals[order]
    back = solve_triangular(ell, vecs[:, order], trans="T", lower=True)
    return EigenPairs(values=top_vals, vectors=back)


def complex_to_real_composite(c) -> np.ndarray:
    """Covariance of the stacked (I; Q) real vector for a circular complex vector.

    For x ~ CN(0, C) the real composite [Re x; Im x] has covariance
    0.5 * [[Re C, -Im C], [Im C, Re C]].
    """
    cc = np.asarray(c, dtype=np.complex128)
    if cc.ndim != 2 or cc.shape[0] != cc.shape[1]:
        raise DimensionError(f"C must be a square matrix, got shape {cc.shape}")
    gap = float(np.max(np.abs(cc - cc.conj().T))) if cc.size else 0.0
    if gap > 1e-10:
        raise DimensionError(f"C is not Hermitian (max deviation {gap:.3e})")
    cc = 0.5 * (cc + cc.conj().T)
    re, im = cc.real, cc.imag
    out = 0.5 * np.block([[re, -im], [im, re]])
    return 0.5 * (out + out.T)
