"""Spectral inference network training.

The learner minimizes sum_k Lambda_kk with Lambda = L^-1 Pi L^-T, where L
is the Cholesky factor of a moving average of the feature covariance. The
gradient is masked so that Lambda_kk only moves feature k, which orders
the learned functions by eigenvalue.

Masked routing
--------------
Both covariance-like statistics are bilinear in the features. When the
objective's sensitivity matrix D (for Pi or Sigma) is contracted with the
feature Jacobian, feature ``j`` only receives the column ``D[:, j]``:
for C(a, b) = a^T b / B the cotangents are ``b D / B`` and ``a D / B``.
For symmetric D this coincides with the ordinary vector-Jacobian product;
for the triangular matrices produced by :func:`masked_gradient_matrices`
it is what keeps higher eigenvalues from pulling on lower features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from spinet.errors import ConfigError, DimensionMismatch, NotPositiveDefinite
from spinet.linalg import (
    JitterPolicy,
    cholesky_jittered,
    condition_number,
    lower_inverse,
    sym_eig,
    symmetrize,
)
from spinet.operators import (
    LocalHamiltonian,
    SlownessPairs,
    TabularMatrix,
    apply_hamiltonian,
    fd_stencil,
)

# -- small estimators ---------------------------------------------------------


def sigma_hat(features_a, features_b=None) -> np.ndarray:
    """Half the sum of the two batches' second-moment matrices."""
    a = np.asarray(features_a, dtype=np.float64)
    b = a if features_b is None else np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature batches disagree: {a.shape} vs {b.shape}")
    return 0.5 * (a.T @ a / a.shape[0] + b.T @ b / b.shape[0])


@dataclass
class EigenReport:
    lambdas: np.ndarray
    chol: np.ndarray
    lam: np.ndarray
    jitter: float = 0.0
    full_eigs: tuple | None = None


def masked_gradient_matrices(pi_hat, sigma_bar, jitter: JitterPolicy = JitterPolicy()):
    """Sensitivities of sum_k Lambda_kk, masked so Lambda_kk only reaches column k.

    Returns ``(D_pi, D_sigma, report)`` with
    D_pi = L^-T diag(L)^-1 and D_sigma = -L^-T triu(Lambda diag(L)^-1).
    """
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    chol, applied = cholesky_jittered(sigma_bar, jitter)
    if pi_hat.shape != chol.shape:
        raise DimensionMismatch(f"Pi {pi_hat.shape} and Sigma {chol.shape} differ in size")
    chol_inv = lower_inverse(chol)
    lam = chol_inv @ pi_hat @ chol_inv.T
    dl = np.diag(np.diag(chol_inv))
    d_pi = chol_inv.T @ dl
    d_sigma = -chol_inv.T @ np.triu(lam @ dl)
    report = EigenReport(lambdas=np.diag(lam).copy(), chol=chol, lam=lam, jitter=applied)
    return d_pi, d_sigma, report


def eigenvalue_matrix(pi, sigma, jitter: JitterPolicy = JitterPolicy()) -> np.ndarray:
    chol, _ = cholesky_jittered(sigma, jitter)
    chol_inv = lower_inverse(chol)
    return chol_inv @ np.asarray(pi, dtype=np.float64) @ chol_inv.T


# -- per-batch statistics -------------------------------------------------------


class BatchStatistics:
    """Sigma-hat, Pi-hat and their parameter sensitivities for one minibatch."""

    def __init__(self, net, params, kernel, batch):
        self.net = net
        self.params = params
        self.kernel = kernel
        if isinstance(kernel, LocalHamiltonian):
            self._init_local(batch)
        elif isinstance(kernel, (TabularMatrix, SlownessPairs)):
            self._init_pairs(batch)
        else:
            raise TypeError(f"unsupported kernel {kernel!r}")

    def _init_pairs(self, batch):
        xa, xb = batch
        net, params = self.net, self.params
        self.ua, self.cache_a = net.forward(params, xa)
        self.ub, self.cache_b = net.forward(params, xb)
        if self.ua.shape != self.ub.shape:
            raise DimensionMismatch("paired batches must have equal size")
        n = self.ua.shape[0]
        self.batch_size = n
        self.sigma = sigma_hat(self.ua, self.ub)
        if isinstance(self.kernel, SlownessPairs):
            diff = self.ua - self.ub
            self._diff = diff
            self.pi = diff.T @ diff / n
        else:
            self._w = self.kernel.weights(xa, xb)
            self.pi = symmetrize(self.ua.T @ (self._w[:, None] * self.ub) / n)

    def _init_local(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        n, d = x.shape
        net, params, eps = self.net, self.params, self.kernel.fd_step
        self.batch_size = n
        self.ua, self.cache_a = net.forward(params, x)
        shifted, self.cache_s = net.forward(params, fd_stencil(x, eps).reshape(-1, d))
        self._n_shift = 2 * d
        self._v = self.kernel.potential(x)
        self._hu = apply_hamiltonian(self.ua, shifted.reshape(2 * d, n, -1), eps, self._v)
        self.sigma = sigma_hat(self.ua)
        self.pi = symmetrize(self.ua.T @ self._hu / n)

    @property
    def features(self):
        return self.ua

    def pi_vjp(self, d_pi) -> np.ndarray:
        """Masked contraction of ``d_pi`` with the Jacobian of Pi-hat."""
        d = np.asarray(d_pi, dtype=np.float64)
        n = self.batch_size
        net, params = self.net, self.params
        if isinstance(self.kernel, LocalHamiltonian):
            eps = self.kernel.fd_step
            c_h = self.ua @ d / n
            c_center = self._hu @ d / n + c_h * (self._n_shift / eps**2 + self._v[:, None])
            c_shift = np.broadcast_to(-c_h / eps**2, (self._n_shift,) + c_h.shape)
            g = net.backward(params, self.cache_a, c_center)
            return g + net.backward(params, self.cache_s, c_shift.reshape(-1, c_h.shape[1]))
        if isinstance(self.kernel, SlownessPairs):
            c = 2.0 * self._diff @ d / n
            return net.backward(params, self.cache_a, c) - net.backward(params, self.cache_b, c)
        w = self._w[:, None]
        g = net.backward(params, self.cache_a, (w * self.ub) @ d / n)
        return g + net.backward(params, self.cache_b, (w * self.ua) @ d / n)

    def sigma_jacobian(self, routed: bool = True) -> np.ndarray:
        """Parameter Jacobian of Sigma-hat, shape (K, K, P).

        ``routed=True`` gives the column-routed tensor used in training:
        entry (i, j) differentiates only through feature j, with the
        product-rule factor of two kept, so its symmetric part equals the
        exact Jacobian. ``routed=False`` gives the exact (symmetric)
        Jacobian from K(K+1)/2 backward passes.
        """
        k = self.ua.shape[1]
        if routed:
            return self._routed_jacobian(k)
        return self._exact_jacobian(k)

    def _halves(self):
        if isinstance(self.kernel, LocalHamiltonian):
            return [(self.ua, self.cache_a, 1.0)]
        return [(self.ua, self.cache_a, 0.5), (self.ub, self.cache_b, 0.5)]

    def _routed_jacobian(self, k):
        n = self.batch_size
        out = None
        for u, cache, weight in self._halves():
            scaled = 2.0 * weight * u / n
            if hasattr(self.net, "weighted_jacobian"):
                g = self.net.weighted_jacobian(self.params, cache, scaled)
            else:
                cot = np.zeros((k, k, n, k))
                for j in range(k):
                    cot[:, j, :, j] = scaled.T
                g = self.net.backward_many(self.params, cache, cot.reshape(k * k, n, k))
            out = g if out is None else out + g
        return out.reshape(k, k, -1)

    def _exact_jacobian(self, k):
        n = self.batch_size
        iu, ju = np.triu_indices(k)
        out = None
        for u, cache, weight in self._halves():
            cot = np.zeros((iu.size, n, k))
            for r, (i, j) in enumerate(zip(iu, ju)):
                cot[r, :, i] += weight * u[:, j] / n
                cot[r, :, j] += weight * u[:, i] / n
            g = self.net.backward_many(self.params, cache, cot)
            out = g if out is None else out + g
        jac = np.zeros((k, k, out.shape[1]))
        jac[iu, ju] = out
        jac[ju, iu] = out
        return jac


def jacobian_of_sigma(net, params, batches, kernel=None, routed: bool = False) -> np.ndarray:
    if kernel is None:
        kernel = LocalHamiltonian() if not isinstance(batches, tuple) else SlownessPairs()
    if isinstance(kernel, LocalHamiltonian):
        # Sigma only needs the features themselves; skip the stencil evaluations
        stats = BatchStatistics(net, params, SlownessPairs(), (batches, batches))
    else:
        stats = BatchStatistics(net, params, kernel, batches)
    return stats.sigma_jacobian(routed=routed)


def contract_sigma(d_sigma, jac_sigma) -> np.ndarray:
    return np.tensordot(np.asarray(d_sigma), jac_sigma, axes=([0, 1], [0, 1]))


def assemble_param_gradient(net, params, batches, kernel, d_pi, d_sigma, jac_sigma_bar):
    """Masked gradient of sum_k Lambda_kk with Sigma-bar and its Jacobian held fixed."""
    stats = BatchStatistics(net, params, kernel, batches)
    return stats.pi_vjp(d_pi) + contract_sigma(d_sigma, jac_sigma_bar)


# -- bilevel state and optimizer ----------------------------------------------------


@dataclass
class AveragedState:
    sigma_bar: np.ndarray
    jac_sigma_bar: np.ndarray
    beta: float

    @classmethod
    def initial(cls, k: int, n_params: int, beta: float):
        return cls(np.eye(k), np.zeros((k, k, n_params)), beta)


def moving_average_update(state: AveragedState, sigma_hat, jac_sigma_hat, beta_t) -> AveragedState:
    if not 0.0 < beta_t <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    return AveragedState(
        sigma_bar=(1.0 - beta_t) * state.sigma_bar + beta_t * np.asarray(sigma_hat),
        jac_sigma_bar=(1.0 - beta_t) * state.jac_sigma_bar + beta_t * np.asarray(jac_sigma_hat),
        beta=state.beta,
    )


@dataclass
class RmsState:
    mean_square: np.ndarray
    decay: float = 0.999
    epsilon: float = 1e-10
    learning_rate: float = 1e-5


def rmsprop_step(opt: RmsState, params, gradient, learning_rate=None):
    g = np.asarray(gradient, dtype=np.float64)
    lr = opt.learning_rate if learning_rate is None else learning_rate
    ms = opt.decay * opt.mean_square + (1.0 - opt.decay) * g * g
    new_params = np.asarray(params) - lr * g / (np.sqrt(ms) + opt.epsilon)
    return new_params, replace(opt, mean_square=ms)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainConfig:
    n_iters: int = 1000
    learning_rate: float = 1e-5
    rmsprop_decay: float = 0.999
    rmsprop_epsilon: float = 1e-10
    beta: float = 0.01
    seed: int = 0
    optimizer: str = "rmsprop"
    schedule: str = "constant"
    anneal_steps: float = 1e4
    routed_jacobian: bool = True
    jitter: JitterPolicy = field(default_factory=JitterPolicy)

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("beta must lie in (0, 1]")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "annealed"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer == "rmsprop":
            if not 0.0 <= self.rmsprop_decay < 1.0:
                raise ConfigError("rmsprop_decay must lie in [0, 1)")
            if not self.beta > 1.0 - self.rmsprop_decay:
                raise ConfigError(
                    "timescale rule violated: covariance decay beta must exceed "
                    f"1 - rmsprop_decay ({self.beta} <= {1.0 - self.rmsprop_decay:g}), "
                    "i.e. the optimizer's accumulator must decay more slowly than the "
                    "covariance moving average"
                )
        return self

    def rates(self, step: int):
        """(alpha_t, beta_t); the annealed schedule keeps alpha_t / beta_t -> 0."""
        if self.schedule == "constant":
            return self.learning_rate, self.beta
        s = 1.0 + step / self.anneal_steps
        return self.learning_rate / s, min(1.0, self.beta / s**0.6)


@dataclass
class TrainState:
    step: int
    params: np.ndarray
    averages: AveragedState
    opt: RmsState
    seed: int


@dataclass(frozen=True)
class LogRecord:
    step: int
    lambdas: tuple
    grad_norm: float
    sigma_cond: float

    def csv_line(self) -> str:
        vals = [repr(float(v)) for v in self.lambdas]
        return ",".join([str(self.step)] + vals + [repr(self.grad_norm), repr(self.sigma_cond)])


def log_header(k: int) -> str:
    return ",".join(["step"] + [f"lambda_{i}" for i in range(k)] + ["grad_norm", "sigma_cond"])


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1, int(step)])


def init_state(config: TrainConfig, net) -> TrainState:
    params = net.init_params(np.random.default_rng([int(config.seed), 0]))
    return TrainState(
        step=0,
        params=params,
        averages=AveragedState.initial(net.n_outputs, net.n_params, config.beta),
        opt=RmsState(
            mean_square=np.zeros(net.n_params),
            decay=config.rmsprop_decay,
            epsilon=config.rmsprop_epsilon,
            learning_rate=config.learning_rate,
        ),
        seed=int(config.seed),
    )


def train_step(config: TrainConfig, kernel, net, data_source, state: TrainState):
    """One iteration of the two-timescale update; returns (state, record)."""
    t = state.step
    alpha, beta = config.rates(t)
    batch = data_source(step_rng(state.seed, t))
    stats = BatchStatistics(net, state.params, kernel, batch)
    averages = moving_average_update(
        state.averages, stats.sigma, stats.sigma_jacobian(routed=config.routed_jacobian), beta
    )
    try:
        d_pi, d_sigma, report = masked_gradient_matrices(stats.pi, averages.sigma_bar, config.jitter)
    except NotPositiveDefinite as exc:
        cond = condition_number(averages.sigma_bar)
        raise NotPositiveDefinite(
            f"moving-average covariance lost positive definiteness at step {t} "
            f"(condition number {cond:.3g})",
            step=t,
            condition=cond,
        ) from exc
    grad = stats.pi_vjp(d_pi) + contract_sigma(d_sigma, averages.jac_sigma_bar)
    if config.optimizer == "sgd":
        params, opt = state.params - alpha * grad, state.opt
    else:
        params, opt = rmsprop_step(state.opt, state.params, grad, learning_rate=alpha)
    record = LogRecord(
        step=t,
        lambdas=tuple(float(v) for v in report.lambdas),
        grad_norm=float(np.linalg.norm(grad)),
        sigma_cond=condition_number(averages.sigma_bar),
    )
    return TrainState(t + 1, params, averages, opt, state.seed), record


def train_loop(
    config: TrainConfig,
    kernel,
    net,
    data_source: Callable,
    state: TrainState | None = None,
    on_record: Callable | None = None,
    n_iters: int | None = None,
    keep_records: bool = True,
):
    """Run the trainer from ``state`` (or a fresh one) up to ``n_iters`` total steps.

    ``data_source(rng)`` must return ``(x, x')`` for pair kernels and ``x``
    for local operators; ``rng`` is derived from the seed and step index, so
    a resumed run draws exactly the batches an uninterrupted one would.
    """
    config.validate()
    if state is None:
        state = init_state(config, net)
    total = config.n_iters if n_iters is None else n_iters
    records = []
    while state.step < total:
        state, record = train_step(config, kernel, net, data_source, state)
        if on_record is not None:
            on_record(record)
        if keep_records:
            records.append(record)
    return state, records


# -- extraction ------------------------------------------------------------------------


@dataclass
class EigenFunctions:
    """Evaluable map x -> w(x) = T u(x) with associated eigenvalue estimates."""

    net: object
    params: np.ndarray
    transform: np.ndarray
    eigenvalues: np.ndarray
    report: EigenReport

    def __call__(self, x):
        return self.net(self.params, x) @ self.transform.T


def ordered_eigenfunctions(
    net, params, sigma_bar, pi, mode: str = "cholesky_only", jitter: JitterPolicy = JitterPolicy()
) -> EigenFunctions:
    """Orthonormalize learned features, optionally rotating within their span.

    ``cholesky_only`` returns v(x) = L^-1 u(x) with eigenvalues diag(Lambda).
    ``full_diagonalize`` additionally rotates by the eigenvectors of Lambda
    and returns its eigenvalues in ascending order.
    """
    chol, applied = cholesky_jittered(sigma_bar, jitter)
    chol_inv = lower_inverse(chol)
    lam = symmetrize(chol_inv @ np.asarray(pi, dtype=np.float64) @ chol_inv.T)
    report = EigenReport(lambdas=np.diag(lam).copy(), chol=chol, lam=lam, jitter=applied)
    if mode == "cholesky_only":
        return EigenFunctions(net, params, chol_inv, report.lambdas, report)
    if mode == "full_diagonalize":
        values, vecs = sym_eig(lam)
        values, vecs = values[::-1], vecs[:, ::-1]
        report.full_eigs = (values, vecs)
        return EigenFunctions(net, params, vecs.T @ chol_inv, values.copy(), report)
    raise ValueError(f"unknown mode {mode!r}")


def subspace_angles(a, b) -> np.ndarray:
    """Principal angles (radians) between the column spans of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(np.asarray(a, dtype=np.float64))
    qb, _ = np.linalg.qr(np.asarray(b, dtype=np.float64))
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


def gradient_norm_ok(g) -> bool:
    return bool(np.all(np.isfinite(g))) and math.isfinite(float(np.linalg.norm(g)))
