"""Grid discretization of -laplacian + V and sparse symmetric eigensolvers.

This is the exact reference against which learned hydrogen eigenvalues
are compared: a 5-point stencil on a box with a zero (Dirichlet) boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from spinet.errors import DimensionMismatch, NonConvergence
from spinet.operators import CoulombPotential

DENSE_LIMIT = 1024


@dataclass(frozen=True, eq=False)
class SparseSymmetric:
    """Symmetric matrix stored as its upper triangle (row <= col)."""

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.int64)
        c = np.asarray(self.cols, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if not (r.shape == c.shape == v.shape and r.ndim == 1):
            raise DimensionMismatch("rows, cols and values must be equal-length vectors")
        if np.any(r > c):
            raise ValueError("entries must lie in the upper triangle (row <= col)")
        if r.size and (r.min() < 0 or c.max() >= self.dim):
            raise DimensionMismatch("entry index outside the matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("matrix entries must be finite")
        key = r * self.dim + c
        if np.unique(key).size != key.size:
            raise ValueError("duplicate (row, col) entries")
        object.__setattr__(self, "rows", r)
        object.__setattr__(self, "cols", c)
        object.__setattr__(self, "values", v)
        off = r != c
        full = scipy.sparse.coo_matrix(
            (np.concatenate([v, v[off]]), (np.concatenate([r, c[off]]), np.concatenate([c, r[off]]))),
            shape=(self.dim, self.dim),
        )
        object.__setattr__(self, "_csr", full.tocsr())

    @classmethod
    def from_dense(cls, a, tol: float = 0.0):
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(np.triu(np.abs(a) > tol))
        return cls(a.shape[0], r, c, a[r, c])

    @property
    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def matvec(self, x):
        return self._csr @ x

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def norm_bound(self) -> float:
        """Upper bound on the spectral norm (maximum absolute row sum)."""
        if self.dim == 0:
            return 0.0
        return float(np.max(np.asarray(abs(self._csr).sum(axis=1)).ravel()))


def grid_nodes(n_per_side: int, halfwidth: float) -> np.ndarray:
    """Interior node coordinates along one axis.

    With an odd node count the centre node would sit on the origin; the
    axis is then shifted by half a cell.
    """
    h = 2.0 * halfwidth / (n_per_side + 1)
    nodes = -halfwidth + h * np.arange(1, n_per_side + 1)
    if n_per_side % 2 == 1:
        nodes = nodes + 0.5 * h
    return nodes


def grid_hamiltonian_build(n_per_side: int, halfwidth: float, potential=None, dim: int = 2):
    """Finite-difference -laplacian + diag(V) on a ``dim``-dimensional box.

    Spacing is h = 2 * halfwidth / (n_per_side + 1); points beyond the
    outermost nodes are treated as zero. Node ordering is C order over
    (x_0, x_1, ...), i.e. the last axis varies fastest.
    """
    if n_per_side < 1:
        raise ValueError("n_per_side must be positive")
    if potential is None:
        potential = CoulombPotential()
    n = int(n_per_side)
    h = 2.0 * halfwidth / (n + 1)
    axis = grid_nodes(n, halfwidth)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    size = n**dim
    v = np.asarray(potential(points), dtype=np.float64).reshape(size)
    rows = [np.arange(size)]
    cols = [np.arange(size)]
    vals = [2.0 * dim / h**2 + v]
    index = np.arange(size).reshape((n,) * dim)
    for ax in range(dim):
        lo = np.take(index, np.arange(n - 1), axis=ax).ravel()
        hi = np.take(index, np.arange(1, n), axis=ax).ravel()
        rows.append(np.minimum(lo, hi))
        cols.append(np.maximum(lo, hi))
        vals.append(np.full(lo.size, -1.0 / h**2))
    return SparseSymmetric(size, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def _orthonormalize(block, basis, drop_tol):
    """Orthogonalize ``block`` against ``basis`` twice, then QR, discarding dependent columns."""
    for _ in range(2):
        if basis is not None and basis.shape[1]:
            block = block - basis @ (basis.T @ block)
    q, r = np.linalg.qr(block)
    keep = np.abs(np.diag(r)) > drop_tol
    q = q[:, keep]
    if basis is not None and basis.shape[1] and q.shape[1]:
        q = q - basis @ (basis.T @ q)
        q, _ = np.linalg.qr(q)
    return q


def _lanczos(matrix: SparseSymmetric, k, block, max_basis, max_restarts, tol, seed):
    """Thick-restart block Lanczos.

    After each Rayleigh-Ritz step the lowest ``max_basis // 2`` Ritz vectors
    are kept and the Krylov expansion continues from the last block, whose
    span contains their residuals.
    """
    n = matrix.dim
    scale = max(matrix.norm_bound(), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    basis = _orthonormalize(rng.standard_normal((n, block)), None, 0.0)
    images = matrix.matvec(basis)
    frontier = images
    keep = max(k + block, max_basis // 2)
    worst = np.inf
    for restart in range(max_restarts):
        nxt = None
        while True:
            nxt = _orthonormalize(frontier, basis, 1e-10 * scale)
            if nxt.shape[1] == 0 or basis.shape[1] >= max_basis:
                break
            frontier = matrix.matvec(nxt)
            basis = np.hstack([basis, nxt])
            images = np.hstack([images, frontier])
        proj = basis.T @ images
        theta, s = np.linalg.eigh(0.5 * (proj + proj.T))
        ritz = basis @ s[:, :k]
        resid = images @ s[:, :k] - ritz * theta[:k]
        worst = float(np.linalg.norm(resid, axis=0).max())
        if worst <= tol * scale or nxt.shape[1] == 0:
            return theta[:k], ritz
        frontier = matrix.matvec(nxt)
        basis = np.hstack([basis @ s[:, :keep], nxt])
        images = np.hstack([images @ s[:, :keep], frontier])
    raise NonConvergence(
        f"block Lanczos did not converge after {max_restarts} restarts "
        f"(worst residual {worst:.3g}, target {tol * scale:.3g})",
        iterations=max_restarts,
        residual=worst,
    )


def smallest_eigs(
    matrix: SparseSymmetric,
    k: int,
    tol: float = 1e-8,
    seed: int = 0,
    dense_limit: int = DENSE_LIMIT,
    block: int | None = None,
    max_basis: int | None = None,
    max_restarts: int = 200,
):
    """The ``k`` smallest eigenpairs, values ascending, vectors as columns.

    Small problems are solved densely; larger ones by restarted block
    Lanczos with full reorthogonalization, accepted once every residual
    ||A v - lambda v|| is at most ``tol`` times a bound on ||A||.
    """
    n = matrix.dim
    if not 0 < k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    if n <= dense_limit:
        values, vectors = np.linalg.eigh(matrix.to_dense())
        return values[:k], vectors[:, :k]
    if block is None:
        block = min(k, 8)
    if max_basis is None:
        max_basis = min(n, max(16 * (k + block), 400))
    values, vectors = _lanczos(matrix, k, block, max_basis, max_restarts, tol, seed)
    # sign convention: largest-magnitude component positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(k)])
    return values, vectors * np.where(signs == 0, 1.0, signs)


def shell_grouping_report(values, sizes=(1, 3, 5)):
    """Spread within each prescribed shell against the gap to the next shell.

    Returns a list of (spread, gap) pairs, one per shell boundary, plus the
    spread of the last shell with gap ``nan``.
    """
    values = np.asarray(values, dtype=np.float64)
    if sum(sizes) > values.size:
        raise DimensionMismatch("not enough eigenvalues for the requested shells")
    out = []
    start = 0
    for i, size in enumerate(sizes):
        group = values[start : start + size]
        spread = float(group.max() - group.min())
        end = start + size
        gap = float(values[end] - group.max()) if i + 1 < len(sizes) else float("nan")
        out.append((spread, gap))
        start = end
    return out
