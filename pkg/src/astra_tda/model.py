"""Multi-layer perceptron engine.

Parameters live in one flat float64 vector. Layer ``l`` owns a row-major block
``W̄_l = [W_l  b_l]`` of shape ``(O_l, I_l + 1)`` so that the layer computes
``s_l = W̄_l @ [a_{l-1}; 1]``. Hidden layers use ReLU; the last layer is linear.

All batched entry points accept an ``(n, d)`` feature array and return one row
per example.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .linalg import DimensionError, NumericError

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    task: str = REGRESSION
    shapes: tuple[tuple[int, int], ...] = field(init=False, repr=False)
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer dims {self.layer_dims}")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == REGRESSION and dims[-1] != 1:
            raise ValueError("regression networks have a single output")
        object.__setattr__(self, "layer_dims", dims)
        shapes = tuple((dims[i + 1], dims[i] + 1) for i in range(len(dims) - 1))
        object.__setattr__(self, "shapes", shapes)
        offsets = np.cumsum([0] + [o * c for o, c in shapes])
        object.__setattr__(self, "offsets", tuple(int(x) for x in offsets))

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    @property
    def n_layers(self) -> int:
        return len(self.shapes)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def layers(self, params: np.ndarray) -> list[np.ndarray]:
        """Views of the per-layer ``W̄_l`` blocks inside ``params``."""
        params = np.asarray(params)
        if params.shape[-1] != self.n_params:
            raise DimensionError(
                f"parameter vector has length {params.shape[-1]}, expected {self.n_params}"
            )
        lead = params.shape[:-1]
        return [
            params[..., a:b].reshape(lead + shape)
            for a, b, shape in zip(self.offsets[:-1], self.offsets[1:], self.shapes)
        ]

    def flatten(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        """Inverse of :meth:`layers` for (optionally batched) blocks."""
        lead = blocks[0].shape[:-2]
        return np.concatenate([b.reshape(lead + (-1,)) for b in blocks], axis=-1)


class Example(NamedTuple):
    x: np.ndarray
    t: float | int


@dataclass
class ForwardCache:
    """Per-layer inputs ``a_{l-1}`` (without the bias 1) and outputs ``s_l``."""

    activations: list[np.ndarray]
    preactivations: list[np.ndarray]


def _homog(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a, np.ones(a.shape[:-1] + (1,))], axis=-1)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise DimensionError(f"features of shape {x.shape} do not match input width {spec.n_inputs}")
    return x, single


def forward(spec: MlpSpec, params, x) -> tuple[np.ndarray, ForwardCache]:
    """Return network outputs (logits or regression output) and the cache."""
    xb, single = _batch(spec, x)
    acts = [xb]
    pres = []
    a = xb
    blocks = spec.layers(params)
    for l, w in enumerate(blocks):
        s = _homog(a) @ w.T
        pres.append(s)
        if l < len(blocks) - 1:
            a = np.maximum(s, 0.0)
            acts.append(a)
    out = pres[-1]
    _check_finite(out, "forward pass")
    if single:
        return out[0], ForwardCache([a[0] for a in acts], [s[0] for s in pres])
    return out, ForwardCache(acts, pres)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def loss(spec: MlpSpec, outputs, target) -> np.ndarray | float:
    """Per-example loss: ``½(y - t)²`` or softmax cross-entropy."""
    out = np.asarray(outputs, dtype=np.float64)
    single = out.ndim == 1
    out2 = out[None, :] if single else out
    tgt = np.atleast_1d(np.asarray(target))
    if spec.task == REGRESSION:
        vals = 0.5 * (out2[:, 0] - tgt.astype(np.float64)) ** 2
    else:
        idx = tgt.astype(np.int64)
        vals = -_log_softmax(out2)[np.arange(out2.shape[0]), idx]
    return float(vals[0]) if single else vals


def _loss_output_grad(spec: MlpSpec, out: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if spec.task == REGRESSION:
        return out - targets.astype(np.float64)[:, None]
    e = softmax(out)
    e[np.arange(out.shape[0]), targets.astype(np.int64)] -= 1.0
    return e


def _backward(spec: MlpSpec, params, cache: ForwardCache, out_grad: np.ndarray) -> list[np.ndarray]:
    """Backpropagate output-space vectors; returns per-layer ``ds_l`` rows."""
    blocks = spec.layers(params)
    deltas = [None] * len(blocks)
    d = out_grad
    for l in range(len(blocks) - 1, -1, -1):
        deltas[l] = d
        if l > 0:
            d = (d @ blocks[l][:, :-1]) * (cache.preactivations[l - 1] > 0.0)
    return deltas


def _per_example(spec: MlpSpec, cache: ForwardCache, deltas: list[np.ndarray]) -> np.ndarray:
    blocks = [
        np.einsum("bo,bi->boi", d, _homog(a))
        for d, a in zip(deltas, cache.activations)
    ]
    return spec.flatten(blocks)


def _batch_sum(spec: MlpSpec, cache: ForwardCache, deltas: list[np.ndarray]) -> np.ndarray:
    return spec.flatten([d.T @ _homog(a) for d, a in zip(deltas, cache.activations)])


def per_example_grads(spec: MlpSpec, params, x, targets) -> np.ndarray:
    """Loss gradients, one row per example, shape ``(n, D)``."""
    xb, _ = _batch(spec, x)
    out, cache = forward(spec, params, xb)
    deltas = _backward(spec, params, cache, _loss_output_grad(spec, out, np.atleast_1d(targets)))
    g = _per_example(spec, cache, deltas)
    _check_finite(g, "gradient")
    return g


def mean_grad(spec: MlpSpec, params, x, targets) -> np.ndarray:
    """Gradient of the mean loss over a batch."""
    xb, _ = _batch(spec, x)
    out, cache = forward(spec, params, xb)
    deltas = _backward(spec, params, cache, _loss_output_grad(spec, out, np.atleast_1d(targets)))
    g = _batch_sum(spec, cache, deltas) / xb.shape[0]
    _check_finite(g, "gradient")
    return g


def grad(spec: MlpSpec, params, example: Example) -> np.ndarray:
    """Loss gradient for a single example."""
    return per_example_grads(spec, params, example.x, [example.t])[0]


def _output_hessian_apply(spec: MlpSpec, out: np.ndarray, u: np.ndarray) -> np.ndarray:
    if spec.task == REGRESSION:
        return u
    p = softmax(out)
    return p * u - p * np.sum(p * u, axis=1, keepdims=True)


def jvp(spec: MlpSpec, params, cache: ForwardCache, v) -> np.ndarray:
    """Forward-mode directional derivative of the outputs along ``v``."""
    blocks = spec.layers(params)
    vblocks = spec.layers(v)
    da = np.zeros_like(cache.activations[0])
    ds = None
    for l, (w, dw) in enumerate(zip(blocks, vblocks)):
        ds = _homog(cache.activations[l]) @ dw.T + da @ w[:, :-1].T
        if l < len(blocks) - 1:
            da = ds * (cache.preactivations[l] > 0.0)
    return ds


def ggn_vec(spec: MlpSpec, params, x, v) -> np.ndarray:
    """Gauss-Newton-vector product averaged over a batch of inputs.

    Computes ``(1/n) Σ J_iᵀ H_i J_i v``: a forward-mode pass for ``J v``, the
    loss Hessian in output space (identity for squared error,
    ``diag(p) - p pᵀ`` for softmax), then a reverse pass. Targets do not enter.
    """
    xb, _ = _batch(spec, x)
    if xb.shape[0] == 0:
        raise ValueError("ggn_vec needs a non-empty batch")
    v = np.asarray(v, dtype=np.float64)
    out, cache = forward(spec, params, xb)
    jv = jvp(spec, params, cache, v)
    hjv = _output_hessian_apply(spec, out, jv)
    deltas = _backward(spec, params, cache, hjv)
    return _batch_sum(spec, cache, deltas) / xb.shape[0]


def dense_ggn(spec: MlpSpec, params, x) -> np.ndarray:
    """Assemble the GGN column by column from :func:`ggn_vec` on unit vectors."""
    d = spec.n_params
    cols = np.empty((d, d))
    e = np.zeros(d)
    for i in range(d):
        e[i] = 1.0
        cols[:, i] = ggn_vec(spec, params, x, e)
        e[i] = 0.0
    return cols


def sample_label(spec: MlpSpec, params, x, rng: np.random.Generator):
    """Draw targets from the model's own predictive distribution.

    Classification samples a class from the softmax; regression samples
    ``Normal(output, 1)``. Accepts one feature vector or a batch.
    """
    out, _ = forward(spec, params, x)
    single = out.ndim == 1
    out2 = out[None, :] if single else out
    if spec.task == REGRESSION:
        y = out2[:, 0] + rng.standard_normal(out2.shape[0])
    else:
        p = softmax(out2)
        u = rng.random(out2.shape[0])
        y = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), out2.shape[1] - 1)
    return y[0] if single else y


def pseudo_grads(spec: MlpSpec, params, x, rng: np.random.Generator) -> tuple[ForwardCache, list[np.ndarray]]:
    """Backprop ``-log p(ŷ|x)`` for labels ``ŷ`` sampled once per input.

    Returns the forward cache and the per-layer pre-activation pseudo-gradients.
    """
    xb, _ = _batch(spec, x)
    out, cache = forward(spec, params, xb)
    y = sample_label(spec, params, xb, rng)
    deltas = _backward(spec, params, cache, _loss_output_grad(spec, out, np.asarray(y)))
    return cache, deltas


def pseudo_grad_rows(spec: MlpSpec, params, x, rng: np.random.Generator) -> np.ndarray:
    """Flattened per-example pseudo-gradients, shape ``(n, D)``."""
    cache, deltas = pseudo_grads(spec, params, x, rng)
    return _per_example(spec, cache, deltas)


def measurement(spec: MlpSpec, params, x, t) -> np.ndarray | float:
    """Query measurement: ``|g - t|`` or the negative correct-class margin.

    The margin is ``-g_t + log(Σ_{i≠t} exp g_i)``.
    """
    out, _ = forward(spec, params, x)
    single = out.ndim == 1
    out2 = out[None, :] if single else out
    tt = np.atleast_1d(np.asarray(t))
    if spec.task == REGRESSION:
        vals = np.abs(out2[:, 0] - tt.astype(np.float64))
    else:
        vals = _neg_margin(out2, tt.astype(np.int64))
    return float(vals[0]) if single else vals


def _neg_margin(out: np.ndarray, t: np.ndarray) -> np.ndarray:
    if out.shape[1] < 2:
        raise NumericError("correct-class margin is undefined with a single class")
    rows = np.arange(out.shape[0])
    others = out.copy()
    others[rows, t] = -np.inf
    m = others.max(axis=1)
    lse = m + np.log(np.exp(others - m[:, None]).sum(axis=1))
    return lse - out[rows, t]


def _measurement_output_grad(spec: MlpSpec, out: np.ndarray, t: np.ndarray) -> np.ndarray:
    if spec.task == REGRESSION:
        return np.sign(out - t.astype(np.float64)[:, None])
    t = t.astype(np.int64)
    if out.shape[1] < 2:
        raise NumericError("correct-class margin is undefined with a single class")
    rows = np.arange(out.shape[0])
    others = out.copy()
    others[rows, t] = -np.inf
    e = softmax(others)
    e[rows, t] = -1.0
    return e


def measurement_grads(spec: MlpSpec, params, x, t) -> np.ndarray:
    """Measurement gradients, one row per query, shape ``(n, D)``."""
    xb, _ = _batch(spec, x)
    out, cache = forward(spec, params, xb)
    deltas = _backward(spec, params, cache, _measurement_output_grad(spec, out, np.atleast_1d(t)))
    g = _per_example(spec, cache, deltas)
    _check_finite(g, "measurement gradient")
    return g


def measurement_grad(spec: MlpSpec, params, query: Example) -> np.ndarray:
    return measurement_grads(spec, params, query.x, [query.t])[0]
