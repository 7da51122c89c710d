"""Symmetric operators whose eigenfunctions are learned.

Three kernel variants are supported:

``TabularMatrix``
    k(s, s') = M[s, s'] on a finite state space with uniform measure.
``SlownessPairs``
    the graph-Laplacian kernel on neighbouring samples, whose kernel-weighted
    covariance reduces to E[(u(x) - u(x'))(u(x) - u(x'))^T].
``LocalHamiltonian``
    -laplacian + V(x), applied pointwise with a central finite difference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spinet.errors import DimensionMismatch, SpinIOError
from spinet.linalg import check_symmetric, symmetrize


class Direction(enum.Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


# -- potentials -------------------------------------------------------------


def coulomb_potential(x, r_min: float = 1e-3):
    """Attractive Coulomb potential -1 / max(|x|, r_min).

    Accepts a single point of shape (d,) or a batch of shape (B, d).
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)
    return -1.0 / np.maximum(r, r_min)


@dataclass(frozen=True)
class ZeroPotential:
    def __call__(self, x):
        return np.zeros(np.asarray(x).shape[0])


@dataclass(frozen=True)
class ConstantPotential:
    value: float

    def __call__(self, x):
        return np.full(np.asarray(x).shape[0], float(self.value))


@dataclass(frozen=True)
class CoulombPotential:
    r_min: float = 1e-3

    def __post_init__(self):
        if not self.r_min > 0:
            raise ValueError("r_min must be positive")

    def __call__(self, x):
        return coulomb_potential(x, self.r_min)


@dataclass(frozen=True, eq=False)
class GridPotential:
    """2-D potential tabulated on a regular grid, bilinearly interpolated.

    Row index runs along y, column index along x. Points outside the
    tabulated rectangle take the value of the nearest edge.
    """

    values: np.ndarray
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SpinIOError(str(exc)) from exc
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if len(head) != 6:
            raise ValueError("grid header must read 'rows cols xmin xmax ymin ymax'")
        rows, cols = int(head[0]), int(head[1])
        xmin, xmax, ymin, ymax = (float(v) for v in head[2:])
        data = np.array(" ".join(lines[1:]).split(), dtype=np.float64)
        if data.size != rows * cols:
            raise DimensionMismatch(f"grid file has {data.size} values, header says {rows * cols}")
        return cls(data.reshape(rows, cols), xmin, xmax, ymin, ymax)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        rows, cols = self.values.shape
        fx = (x[:, 0] - self.xmin) / (self.xmax - self.xmin) * (cols - 1)
        fy = (x[:, 1] - self.ymin) / (self.ymax - self.ymin) * (rows - 1)
        fx = np.clip(fx, 0.0, cols - 1)
        fy = np.clip(fy, 0.0, rows - 1)
        c0 = np.minimum(np.floor(fx).astype(int), max(cols - 2, 0))
        r0 = np.minimum(np.floor(fy).astype(int), max(rows - 2, 0))
        c1 = np.minimum(c0 + 1, cols - 1)
        r1 = np.minimum(r0 + 1, rows - 1)
        tx, ty = fx - c0, fy - r0
        v = self.values
        top = v[r0, c0] * (1 - tx) + v[r0, c1] * tx
        bot = v[r1, c0] * (1 - tx) + v[r1, c1] * tx
        return top * (1 - ty) + bot * ty


# -- kernels ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMatrix:
    """Explicit symmetric kernel matrix over states 0..M-1.

    With ``negate`` the trainer sees -M, so minimization finds the top of
    M's spectrum; reported eigenvalues should be multiplied by ``sign``.
    """

    matrix: np.ndarray
    negate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "matrix", check_symmetric(self.matrix, "kernel matrix").copy())

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @property
    def sign(self) -> float:
        return -1.0 if self.negate else 1.0

    @property
    def effective_matrix(self) -> np.ndarray:
        return self.sign * self.matrix

    def weights(self, s, s_prime):
        return self.sign * self.matrix[np.asarray(s), np.asarray(s_prime)]


@dataclass(frozen=True)
class SlownessPairs:
    pass


@dataclass(frozen=True, eq=False)
class LocalHamiltonian:
    fd_step: float = 0.1
    potential: object = field(default_factory=CoulombPotential)

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


def kernel_direction(kernel) -> Direction:
    """End of the original operator's spectrum that training converges to.

    The trainer always minimizes; a negated tabular kernel therefore
    recovers the largest eigenvalues of the stored matrix.
    """
    if isinstance(kernel, TabularMatrix) and kernel.negate:
        return Direction.MAXIMIZE
    return Direction.MINIMIZE


# -- estimators ---------------------------------------------------------------


def fd_stencil(x, eps: float) -> np.ndarray:
    """Shifted copies x + eps e_i and x - eps e_i, shape (2d, B, d)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    shifts = np.concatenate([np.eye(d), -np.eye(d)]) * eps
    return x[None, :, :] + shifts[:, None, :]


def fd_combine(center, shifted, eps: float):
    """(1/eps^2) * sum_i [f(x+eps e_i) + f(x-eps e_i) - 2 f(x)]."""
    n_shift = shifted.shape[0]
    return (shifted.sum(axis=0) - n_shift * center) / (eps * eps)


def fd_laplacian_apply(f, x, eps: float):
    """Central-difference Laplacian of ``f`` at each row of ``x``.

    ``f`` maps an (N, d) array to (N,) or (N, K). All 2d + 1 evaluations per
    point are made in a single call.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("points must have shape (B, d)")
    b, d = x.shape
    pts = np.concatenate([x[None], fd_stencil(x, eps)]).reshape(-1, d)
    vals = np.asarray(f(pts), dtype=np.float64)
    vals = vals.reshape((2 * d + 1, b) + vals.shape[1:])
    return fd_combine(vals[0], vals[1:], eps)


def apply_hamiltonian(center, shifted, eps, v):
    """(H u)(x) = -fd_laplacian(u)(x) + V(x) u(x) from precomputed evaluations."""
    return -fd_combine(center, shifted, eps) + v[:, None] * center


def hamiltonian_pi_hat(net, params, batch, eps, potential) -> np.ndarray:
    """Symmetrized (1/B) sum_b u(x_b) (H u)(x_b)^T."""
    x = np.asarray(batch, dtype=np.float64)
    b, d = x.shape
    u = net(params, x)
    shifted = net(params, fd_stencil(x, eps).reshape(-1, d)).reshape(2 * d, b, -1)
    hu = apply_hamiltonian(u, shifted, eps, potential(x))
    return symmetrize(u.T @ hu / b)


def pair_kernel_pi_hat(kernel, features_x, features_xp, kernel_values=None) -> np.ndarray:
    """Kernel-weighted covariance from paired feature batches."""
    a = np.asarray(features_x, dtype=np.float64)
    b = np.asarray(features_xp, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatch(f"paired feature batches differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if isinstance(kernel, SlownessPairs):
        diff = a - b
        return diff.T @ diff / n
    if isinstance(kernel, TabularMatrix):
        if kernel_values is None:
            raise ValueError("tabular kernel needs per-pair kernel values")
        w = np.asarray(kernel_values, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionMismatch("one kernel value per pair is required")
        return symmetrize(a.T @ (w[:, None] * b) / n)
    raise TypeError(f"not a pair kernel: {kernel!r}")


def tabular_exact_pi(kernel: TabularMatrix, table) -> np.ndarray:
    """Exact expectation over uniformly distributed state pairs: U^T M U / M^2."""
    u = np.asarray(table, dtype=np.float64)
    m = kernel.n_states
    return u.T @ kernel.effective_matrix @ u / (m * m)


def tabular_exact_sigma(table) -> np.ndarray:
    u = np.asarray(table, dtype=np.float64)
    return u.T @ u / u.shape[0]
