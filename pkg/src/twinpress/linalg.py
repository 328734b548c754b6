"""Dense float64 linear algebra: products, thin SVD, spectral truncation, norms.

Matrices are plain 2-D numpy arrays (row-major, float64). Public operations
validate their inputs and never return non-finite values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, RankError, ShapeError

Matrix = np.ndarray

# Singular values below RANK_EPS * sigma_max are clamped to zero before the
# square root so noise-level directions are not amplified.
RANK_EPS = 1e-12


def check_matrix(m: Matrix, name: str = "matrix") -> Matrix:
    """Coerce to a contiguous 2-D float64 array, rejecting empty or non-finite input."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise ShapeError(f"{name} must be nonempty, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NumericalError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def fro_norm(m: Matrix) -> float:
    """Frobenius norm, sqrt of the sum of squared entries."""
    m = check_matrix(m, "m")
    return float(np.sqrt(np.sum(np.square(m))))


@dataclass
class SvdResult:
    """Thin SVD: u (m x k), sigma (k, descending, >= 0), v (n x k), k = min(m, n)."""

    u: Matrix
    sigma: np.ndarray
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.v.T


def svd(m: Matrix) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped so its largest-magnitude entry is
    positive, which makes repeated factorizations of the same matrix
    bit-identical.
    """
    m = check_matrix(m, "m")
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge within the backend iteration cap: {exc}"
        ) from exc
    v = vt.T
    k = sigma.shape[0]
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs
    return SvdResult(u=np.ascontiguousarray(u), sigma=sigma, v=np.ascontiguousarray(v))


def truncate(s: SvdResult, r: int) -> tuple[Matrix, Matrix]:
    """Rank-r spectral pair (U_r sqrt(S_r), sqrt(S_r) V_r^T).

    The product of the pair is the Frobenius-optimal rank-r approximation of
    the decomposed matrix.
    """
    k = s.sigma.shape[0]
    if not 1 <= r <= k:
        raise RankError(f"rank {r} outside valid range [1, {k}]")
    sigma = s.sigma[:r].copy()
    if s.sigma[0] > 0:
        sigma[sigma < RANK_EPS * s.sigma[0]] = 0.0
    root = np.sqrt(sigma)
    left = s.u[:, :r] * root
    right = root[:, None] * s.v[:, :r].T
    return np.ascontiguousarray(left), np.ascontiguousarray(right)
