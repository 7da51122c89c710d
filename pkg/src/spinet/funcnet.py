"""Parametric feature maps u(x) with exact reverse-mode parameter gradients.

Every network here exposes the same small surface:

* ``n_params`` and ``n_outputs``
* ``init_params(rng)`` returning a flat float64 parameter vector
* ``forward(params, x)`` returning ``(u, cache)`` with ``u`` of shape (B, K)
* ``backward_many(params, cache, cotangents)`` mapping an (R, B, K) stack of
  output cotangents to an (R, P) stack of parameter gradients

Batching several cotangents through one backward sweep is what makes the
per-step covariance Jacobian affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from spinet.errors import DimensionMismatch, DomainViolation, IndexOutOfRange


class ParamLayout:
    """Ordered (name, shape) segments of a flat parameter vector."""

    def __init__(self, segments):
        self._segments = tuple((name, tuple(shape)) for name, shape in segments)
        offsets, total = [], 0
        for _, shape in self._segments:
            offsets.append(total)
            total += math.prod(shape)
        self._offsets = tuple(offsets)
        self.size = total

    @property
    def segments(self):
        return self._segments

    def views(self, vec):
        """Reshaped views into ``vec`` keyed by segment name (no copies)."""
        vec = np.asarray(vec)
        if vec.shape[-1] != self.size:
            raise DimensionMismatch(f"expected {self.size} parameters, got {vec.shape[-1]}")
        lead = vec.shape[:-1]
        out = {}
        for (name, shape), off in zip(self._segments, self._offsets):
            n = math.prod(shape)
            out[name] = vec[..., off:off + n].reshape(lead + shape)
        return out

    def flatten(self, parts, lead=()):
        vec = np.empty(tuple(lead) + (self.size,))
        for (name, shape), off in zip(self._segments, self._offsets):
            n = math.prod(shape)
            vec[..., off:off + n] = np.reshape(parts[name], tuple(lead) + (n,))
        return vec


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def block_mask(layer: int, m: int, n: int, n_groups: int, n_layers: int) -> np.ndarray:
    """Connectivity mask of one block-sparse layer (``layer`` counts from 1).

    Group k occupies the half-open ranges [s_k(m), s_k(m) + w(m)) of inputs
    and [s_k(n), s_k(n) + w(n)) of outputs, with offsets growing and widths
    shrinking the deeper the layer sits.
    """
    mask = np.zeros((m, n), dtype=bool)
    if n_groups < 2:
        mask[:] = True
        return mask
    depth = (layer - 1) / n_layers
    frac = (n_layers - layer + 1) / n_layers
    wm, wn = math.ceil(frac * m), math.ceil(frac * n)
    for k in range(n_groups):
        pos = k / (n_groups - 1) * depth
        sm, sn = math.floor(pos * m), math.floor(pos * n)
        mask[sm:sm + wm, sn:sn + wn] = True
    return mask


def envelope(x, halfwidth):
    """Boundary factor prod_i (sqrt(2 D^2 - x_i^2) - D); zero on the box surface."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > halfwidth):
        raise DomainViolation(f"input outside the box [-{halfwidth}, {halfwidth}]")
    d2 = 2.0 * halfwidth * halfwidth
    return np.prod(np.sqrt(d2 - x * x) - halfwidth, axis=1)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    n_outputs: int
    block_sparse: bool = False
    n_groups: int | None = None
    envelope_halfwidth: float | None = None
    input_scale: float = 1.0
    activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.block_sparse and any(h < self.groups for h in self.hidden):
            raise ValueError("block-sparse hidden widths must be >= n_groups")

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def groups(self) -> int:
        return self.n_groups if self.n_groups is not None else self.n_outputs

    @property
    def widths(self):
        return (self.input_dim,) + self.hidden + (self.n_outputs,)


@dataclass
class _MlpCache:
    x: np.ndarray
    acts: list
    slopes: list
    env: np.ndarray | None = field(default=None)


class Mlp:
    """Softplus MLP, optionally block-sparse and multiplied by a box envelope."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        w = spec.widths
        segs = []
        for i in range(spec.n_layers):
            segs.append((f"w{i}", (w[i], w[i + 1])))
            segs.append((f"b{i}", (w[i + 1],)))
        self.layout = ParamLayout(segs)
        self.masks = []
        for i in range(spec.n_layers):
            if spec.block_sparse:
                mask = block_mask(i + 1, w[i], w[i + 1], spec.groups, spec.n_layers)
            else:
                mask = np.ones((w[i], w[i + 1]), dtype=bool)
            self.masks.append(mask)
        parts = {}
        for i, mask in enumerate(self.masks):
            parts[f"w{i}"] = mask.astype(np.float64)
            parts[f"b{i}"] = np.ones(w[i + 1])
        self.grad_mask = self.layout.flatten(parts)

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def n_outputs(self) -> int:
        return self.spec.n_outputs

    def init_params(self, rng) -> np.ndarray:
        w = self.spec.widths
        parts = {}
        for i, mask in enumerate(self.masks):
            fan_in = max(int(mask.sum(axis=0).max()), 1)
            parts[f"w{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(w[i], w[i + 1])) * mask
            parts[f"b{i}"] = np.zeros(w[i + 1])
        return self.layout.flatten(parts)

    def forward(self, params, x):
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise DimensionMismatch(f"expected inputs of shape (B, {spec.input_dim}), got {x.shape}")
        env = None
        if spec.envelope_halfwidth is not None:
            env = envelope(x, spec.envelope_halfwidth)
        p = self.layout.views(params)
        h = x * spec.input_scale if spec.input_scale != 1.0 else x
        acts, slopes = [h], []
        for i in range(spec.n_layers - 1):
            z = h @ p[f"w{i}"] + p[f"b{i}"]
            h = softplus(z)
            slopes.append(expit(z))
            acts.append(h)
        last = spec.n_layers - 1
        out = h @ p[f"w{last}"] + p[f"b{last}"]
        if env is not None:
            out = out * env[:, None]
        return out, _MlpCache(x=x, acts=acts, slopes=slopes, env=env)

    def backward_many(self, params, cache: _MlpCache, cotangents) -> np.ndarray:
        spec = self.spec
        cot = np.asarray(cotangents, dtype=np.float64)
        batch = cache.x.shape[0]
        if cot.ndim != 3 or cot.shape[1:] != (batch, spec.n_outputs):
            raise DimensionMismatch(
                f"cotangents must have shape (R, {batch}, {spec.n_outputs}), got {cot.shape}"
            )
        p = self.layout.views(params)
        n_rep = cot.shape[0]
        grads = {}
        # (B, R, n) layout: every layer is then a single contiguous gemm over all R
        delta = cot.transpose(1, 0, 2)
        if cache.env is not None:
            delta = delta * cache.env[:, None, None]
        for i in range(spec.n_layers - 1, -1, -1):
            a = cache.acts[i]
            n_out = delta.shape[2]
            gw = (a.T @ delta.reshape(batch, -1)).reshape(a.shape[1], n_rep, n_out)
            grads[f"w{i}"] = gw.transpose(1, 0, 2) * self.masks[i]
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ p[f"w{i}"].T) * cache.slopes[i - 1][:, None, :]
        return self.layout.flatten(grads, lead=(n_rep,))

    def weighted_jacobian(self, params, cache: _MlpCache, weights) -> np.ndarray:
        """(R, K, P) tensor with entry [r, j] = sum_b weights[b, r] * d u_j(x_b) / d params.

        Equals ``backward_many`` on the R*K cotangents ``weights[:, r] e_j^T``
        but backpropagates only K per-sample deltas.
        """
        spec = self.spec
        w = np.asarray(weights, dtype=np.float64)
        batch, k = cache.x.shape[0], spec.n_outputs
        if w.ndim != 2 or w.shape[0] != batch:
            raise DimensionMismatch(f"weights must have shape ({batch}, R), got {w.shape}")
        n_rep = w.shape[1]
        p = self.layout.views(params)
        grads = {}
        delta = np.broadcast_to(np.eye(k), (batch, k, k))
        if cache.env is not None:
            delta = delta * cache.env[:, None, None]
        for i in range(spec.n_layers - 1, -1, -1):
            a = cache.acts[i]
            m, n_out = a.shape[1], delta.shape[2]
            flat = delta.reshape(batch, k * n_out)
            aw = (w[:, :, None] * a[:, None, :]).reshape(batch, n_rep * m)
            gw = (aw.T @ flat).reshape(n_rep, m, k, n_out).transpose(0, 2, 1, 3)
            grads[f"w{i}"] = gw * self.masks[i]
            grads[f"b{i}"] = (w.T @ flat).reshape(n_rep, k, n_out)
            if i > 0:
                delta = (delta @ p[f"w{i}"].T) * cache.slopes[i - 1][:, None, :]
        return self.layout.flatten(grads, lead=(n_rep, k))

    def backward(self, params, cache, cotangent) -> np.ndarray:
        return self.backward_many(params, cache, np.asarray(cotangent)[None])[0]

    def __call__(self, params, x):
        return self.forward(params, x)[0]


def mlp_forward(spec: MlpSpec, params, inputs) -> np.ndarray:
    return Mlp(spec).forward(params, inputs)[0]


def param_backward(spec: MlpSpec, params, inputs, cotangent) -> np.ndarray:
    """Sum over batch and outputs of cotangent[b, k] * d u_k(x_b) / d params."""
    net = Mlp(spec)
    _, cache = net.forward(params, inputs)
    return net.backward(params, cache, cotangent)


class TabularNet:
    """Free table of feature values for a discrete state space of size M."""

    def __init__(self, n_states: int, n_outputs: int, init_scale: float = 1.0):
        self.n_states = int(n_states)
        self._k = int(n_outputs)
        self.init_scale = init_scale
        self.layout = ParamLayout([("table", (self.n_states, self._k))])
        self.grad_mask = None

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def n_outputs(self) -> int:
        return self._k

    def init_params(self, rng) -> np.ndarray:
        return rng.normal(0.0, self.init_scale, size=self.n_params)

    def table(self, params) -> np.ndarray:
        return self.layout.views(params)["table"]

    def forward(self, params, states):
        idx = np.asarray(states)
        if idx.ndim != 1:
            raise DimensionMismatch("state indices must be a 1-D array")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_states):
            raise IndexOutOfRange(f"state index outside [0, {self.n_states})")
        return tabular_forward(self.table(params), idx), idx

    def backward_many(self, params, idx, cotangents) -> np.ndarray:
        cot = np.asarray(cotangents, dtype=np.float64)
        if cot.ndim != 3 or cot.shape[1:] != (idx.shape[0], self._k):
            raise DimensionMismatch(f"cotangents must have shape (R, {idx.shape[0]}, {self._k})")
        onehot = np.zeros((idx.shape[0], self.n_states))
        onehot[np.arange(idx.shape[0]), idx] = 1.0
        grads = np.matmul(onehot.T[None], cot)
        return grads.reshape(cot.shape[0], -1)

    def backward(self, params, idx, cotangent) -> np.ndarray:
        return self.backward_many(params, idx, np.asarray(cotangent)[None])[0]

    def __call__(self, params, states):
        return self.forward(params, states)[0]


def tabular_forward(table, state_indices) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    idx = np.asarray(state_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfRange(f"state index outside [0, {table.shape[0]})")
    return table[idx]


class ConstantFirst:
    """Prepends a parameter-free output that is identically 1."""

    def __init__(self, net):
        self.net = net
        self.layout = getattr(net, "layout", None)
        self.grad_mask = getattr(net, "grad_mask", None)
        if hasattr(net, "weighted_jacobian"):
            self.weighted_jacobian = self._weighted_jacobian

    def _weighted_jacobian(self, params, cache, weights) -> np.ndarray:
        inner = self.net.weighted_jacobian(params, cache, weights)
        out = np.zeros((inner.shape[0], inner.shape[1] + 1, inner.shape[2]))
        out[:, 1:] = inner
        return out

    @property
    def n_params(self) -> int:
        return self.net.n_params

    @property
    def n_outputs(self) -> int:
        return self.net.n_outputs + 1

    def init_params(self, rng) -> np.ndarray:
        return self.net.init_params(rng)

    def forward(self, params, x):
        u, cache = self.net.forward(params, x)
        return np.hstack([np.ones((u.shape[0], 1)), u]), cache

    def backward_many(self, params, cache, cotangents) -> np.ndarray:
        return self.net.backward_many(params, cache, np.asarray(cotangents)[:, :, 1:])

    def backward(self, params, cache, cotangent) -> np.ndarray:
        return self.backward_many(params, cache, np.asarray(cotangent)[None])[0]

    def __call__(self, params, x):
        return self.forward(params, x)[0]


def constant_first_eigenfunction_wrapper(net) -> ConstantFirst:
    return ConstantFirst(net)
