"""Dense linear-algebra kernels used by the merge engine.

Everything is computed in float64 regardless of the storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AllZeroSpectrum,
    ConvergenceFailure,
    NonFiniteInput,
    RankDeficient,
    RankOutOfRange,
    ShapeMismatch,
    TooManyColumns,
)

__all__ = [
    "SvdFactors",
    "svd",
    "truncate",
    "orthogonalize",
    "reconstruct",
    "effective_rank",
    "numerical_rank",
    "RANK_DEFICIENT_RTOL",
]

RANK_DEFICIENT_RTOL = 1e-10


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ v.T``; ``v`` is stored as cols x r."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]


def _as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _canonicalize_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # each column of u gets a non-negative entry of largest magnitude
    if u.size == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd(m) -> SvdFactors:
    """Thin SVD with deterministic signs.

    Args:
        m: 2-D array of finite values.

    Returns:
        SvdFactors with ``r = min(rows, cols)`` components and singular values
        in non-increasing order.
    """
    a = _as_matrix(m)
    if not np.isfinite(a).all():
        raise NonFiniteInput("svd input contains NaN or Inf")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc
    u, v = _canonicalize_signs(u, vt.T)
    return SvdFactors(u, s, v)


def truncate(f: SvdFactors, k: int) -> SvdFactors:
    """Keep the leading ``k`` singular triplets."""
    if not 1 <= k <= f.rank:
        raise RankOutOfRange(f"k={k} outside [1, {f.rank}]")
    return SvdFactors(f.u[:, :k], f.s[:k], f.v[:, :k])


def reconstruct(f: SvdFactors) -> np.ndarray:
    if f.u.shape[1] != f.s.shape[0] or f.v.shape[1] != f.s.shape[0]:
        raise ShapeMismatch(
            f"inconsistent factor shapes u{f.u.shape} s{f.s.shape} v{f.v.shape}"
        )
    return (f.u * f.s) @ f.v.T


def orthogonalize(u_concat) -> np.ndarray:
    """Nearest matrix with orthonormal columns (orthogonal Procrustes).

    For ``u_concat = A @ diag(sigma) @ B.T`` this returns ``A @ B.T``, the
    minimizer of ``||X - u_concat||_F`` subject to ``X.T @ X = I``.

    Raises:
        TooManyColumns: more columns than rows.
        RankDeficient: smallest singular value below 1e-10 of the largest.
    """
    x = _as_matrix(u_concat)
    rows, m = x.shape
    if m > rows:
        raise TooManyColumns(f"{m} columns cannot be orthonormal in dimension {rows}")
    if not np.isfinite(x).all():
        raise NonFiniteInput("orthogonalize input contains NaN or Inf")
    if m == 0:
        return x.copy()
    try:
        a, sigma, bt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc
    if sigma[0] == 0 or sigma[-1] < RANK_DEFICIENT_RTOL * sigma[0]:
        raise RankDeficient(
            f"stacked singular vectors are rank deficient "
            f"(sigma_min/sigma_max = {sigma[-1] / sigma[0] if sigma[0] else 0.0:.3e})"
        )
    return a @ bt


def numerical_rank(s: np.ndarray, shape: tuple[int, int]) -> int:
    """Number of singular values above the usual ``max(shape) * eps * s[0]`` cutoff."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(shape) * np.finfo(np.float64).eps * s[0]
    return int(np.count_nonzero(s > tol))


def effective_rank(s, energy: float = 0.95) -> int:
    """Smallest ``k`` whose leading singular values hold ``energy`` of sum(s**2).

    The comparison is inclusive: ``k`` qualifies when its cumulative energy
    equals the target exactly.
    """
    if not 0 < energy <= 1:
        raise ValueError(f"energy must lie in (0, 1], got {energy}")
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0 or np.any(s < 0):
        raise ValueError("singular values must be a non-empty, non-negative 1-D array")
    top = s.max()
    if top == 0:
        raise AllZeroSpectrum("all singular values are zero")
    # normalize first so that tiny spectra do not underflow when squared
    s = s / top
    cum = np.cumsum(s * s)
    total = cum[-1]
    # relative slack absorbs summation round-off at the inclusive boundary
    target = energy * total - 1e-12 * total
    return int(np.searchsorted(cum, target, side="left")) + 1
