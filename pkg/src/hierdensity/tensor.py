"""Dense matrix and three-way tensor kernels.

Matrices and three-way tensors are plain float64 ``numpy`` arrays. The
reshape convention between a tensor of shape ``(d1, d2, d3)`` and its
unfolding of shape ``(d1 * d2, d3)`` is C (row-major) order: the row index
of entry ``(i, j, g)`` is ``i * d2 + j``. With ``i`` indexing the left
child cluster and ``j`` the right one, this is the same grouping as
enumerating the parent cluster with its first site varying slowest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SVDConvergenceError

DEFAULT_PINV_TOL = 1e-12


class RankClampWarning(UserWarning):
    """Requested truncation rank exceeded the matrix dimensions."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = U @ diag(S) @ V.T`` with descending ``S``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def truncated(self, r: int) -> "SvdResult":
        return SvdResult(self.U[:, :r], self.S[:r], self.V[:, :r])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {a.shape}")
    return a


def svd(m) -> SvdResult:
    """Thin SVD of a finite matrix."""
    a = as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"svd input of shape {a.shape} has non-finite entries")
    if a.size == 0:
        k = min(a.shape)
        return SvdResult(np.zeros((a.shape[0], k)), np.zeros(k), np.zeros((a.shape[1], k)))
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDConvergenceError(
            f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix"
        ) from exc
    return SvdResult(u, s, vt.T)


def _clamp_rank(shape: tuple[int, int], r: int) -> int:
    if r < 1:
        raise ValueError(f"truncation rank must be >= 1, got {r}")
    limit = min(shape)
    if r > limit:
        warnings.warn(
            f"rank {r} exceeds min dimension of {shape[0]}x{shape[1]} matrix; "
            f"clamped to {limit}",
            RankClampWarning,
            stacklevel=3,
        )
        return limit
    return r


def truncated_svd(m, r: int) -> SvdResult:
    """Leading ``r`` singular triplets of ``m`` (``r`` clamped to the shape)."""
    a = as_matrix(m)
    r = _clamp_rank(a.shape, r)
    return svd(a).truncated(r)


def truncate_rank(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation ``P_r(m)`` in the spectral norm."""
    return truncated_svd(m, r).reconstruct()


def inverse_singular_values(s: np.ndarray, rel_tol: float = DEFAULT_PINV_TOL,
                            smax: float | None = None) -> np.ndarray:
    """Reciprocals of ``s`` with entries below ``rel_tol * smax`` set to zero."""
    if smax is None:
        smax = float(s[0]) if s.size else 0.0
    inv = np.zeros_like(s)
    if smax <= 0.0:
        return inv
    keep = s > rel_tol * smax
    inv[keep] = 1.0 / s[keep]
    return inv


def pinv(m, rel_tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with relative singular-value cutoff."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    a = as_matrix(m)
    f = svd(a)
    inv = inverse_singular_values(f.S, rel_tol)
    return (f.V * inv) @ f.U.T


def unfold(t: np.ndarray) -> np.ndarray:
    """View a ``(d1, d2, d3)`` tensor as a ``(d1*d2, d3)`` matrix."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeError(f"expected a 3-tensor, got shape {t.shape}")
    return t.reshape(t.shape[0] * t.shape[1], t.shape[2])


def fold(m: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != d1 * d2:
        raise ShapeError(f"cannot fold matrix of shape {m.shape} into ({d1}, {d2}, .)")
    return m.reshape(d1, d2, m.shape[1])


def sandwich(a, g, b) -> np.ndarray:
    """Slice-wise ``a @ g[:, :, k] @ b.T`` for every trailing index ``k``."""
    a = as_matrix(a)
    b = as_matrix(b)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 3:
        raise ShapeError(f"expected a 3-tensor, got shape {g.shape}")
    if a.shape[1] != g.shape[0]:
        raise ShapeError(f"mode 1 mismatch: a has {a.shape[1]} columns, g has {g.shape[0]} rows")
    if b.shape[1] != g.shape[1]:
        raise ShapeError(f"mode 2 mismatch: b has {b.shape[1]} columns, g mode 2 is {g.shape[1]}")
    return np.einsum("ia,abk,jb->ijk", a, g, b, optimize=True)


def spectral_norm(m) -> float:
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))
