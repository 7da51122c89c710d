"""Dense real linear algebra for the masked-gradient machinery.

Everything here works on float64 numpy arrays and is a pure function of
its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from spinet.errors import (
    DimensionMismatch,
    NonConvergence,
    NotPositiveDefinite,
    SingularDiagonal,
)

SYMMETRY_RTOL = 1e-12
_TINY_PIVOT = 1e-300


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter escalation used when a Cholesky factorization fails.

    Attempt ``i`` adds ``scales[i] * trace(A) / dim`` to the diagonal.
    """

    scales: tuple[float, ...] = (1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)
    enabled: bool = True


NO_JITTER = JitterPolicy(scales=(), enabled=False)


def as_square(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    return a


def check_symmetric(a, name="matrix") -> np.ndarray:
    a = as_square(a, name)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * scale:
        raise DimensionMismatch(f"{name} is not symmetric within tolerance")
    return a


def symmetrize(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + a.T)


def _try_cholesky(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def cholesky_jittered(a, policy: JitterPolicy = JitterPolicy()):
    """Cholesky factor of a symmetric matrix, escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the multiple of the identity
    that was added (0.0 when the plain factorization succeeded).
    """
    a = check_symmetric(a, "cholesky input")
    # numpy reads only the lower triangle; make sure both halves agree exactly
    a = symmetrize(a)
    chol = _try_cholesky(a)
    if chol is not None and np.all(np.diag(chol) > 0):
        return chol, 0.0
    if policy.enabled and a.shape[0]:
        base = np.trace(a) / a.shape[0]
        if base > 0:
            eye = np.eye(a.shape[0])
            for scale in policy.scales:
                jitter = scale * base
                chol = _try_cholesky(a + jitter * eye)
                if chol is not None and np.all(np.diag(chol) > 0):
                    return chol, float(jitter)
    raise NotPositiveDefinite("matrix is not positive definite after jitter escalation")


def cholesky(a, policy: JitterPolicy = JitterPolicy()) -> np.ndarray:
    return cholesky_jittered(a, policy)[0]


def lower_inverse(chol) -> np.ndarray:
    """Inverse of a lower-triangular matrix by forward substitution."""
    chol = as_square(chol, "lower-triangular factor")
    diag = np.diag(chol)
    if np.any(np.abs(diag) < _TINY_PIVOT):
        raise SingularDiagonal("zero pivot on the diagonal of a triangular factor")
    inv = scipy.linalg.solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    return np.tril(inv)


def triu_inc_diag(a) -> np.ndarray:
    return np.triu(as_square(a))


def diag_inv(a) -> np.ndarray:
    d = np.diag(as_square(a))
    if np.any(d == 0):
        raise SingularDiagonal("diagonal entry is zero")
    return np.diag(1.0 / d)


def phi(a) -> np.ndarray:
    """Replace the strict upper triangle with the transposed strict lower triangle."""
    a = as_square(a)
    low = np.tril(a, -1)
    return low + low.T + np.diag(np.diag(a))


def _round_robin(n):
    """Disjoint index pairings covering every (p, q) once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(a, max_sweeps: int = 100, tol: float = 1e-15):
    """Eigendecomposition of a symmetric matrix by cyclic (parallel-order) Jacobi.

    Each round of a sweep applies a set of disjoint plane rotations at once,
    so one sweep costs ``n - 1`` vectorized row/column updates.

    Returns eigenvalues sorted in descending order and the matching
    orthonormal eigenvectors as columns.
    """
    a = check_symmetric(a, "sym_eig input").copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 0:
        return np.zeros(0), v
    norm = np.linalg.norm(a)
    if n > 1 and norm > 0:
        rounds = _round_robin(n)
        target = max(tol, n * np.finfo(float).eps) * norm
        for sweep in range(max_sweeps + 1):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= target:
                break
            if sweep == max_sweeps:
                raise NonConvergence(
                    "Jacobi eigensolver did not converge", iterations=sweep, residual=off
                )
            for p, q in rounds:
                apq = a[p, q]
                app = a[p, p]
                aqq = a[q, q]
                live = np.abs(apq) > _TINY_PIVOT
                theta = np.where(live, (aqq - app) / np.where(live, 2.0 * apq, 1.0), 0.0)
                sign = np.where(theta >= 0.0, 1.0, -1.0)
                t = np.where(live, sign / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def condition_number(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        return float("inf")
    # monitoring only, so LAPACK is used rather than the Jacobi solver
    values = np.linalg.eigvalsh(symmetrize(a))
    lo = values[0]
    if lo <= 0:
        return float("inf")
    return float(values[-1] / lo)
