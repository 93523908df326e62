"""Dense MLP engine on flat parameter vectors.

Parameters live in one contiguous float64 array laid out layer by layer as
``W_0 (fan_in x fan_out, row-major), b_0, W_1, b_1, ...``. Hidden layers use
ReLU, the output layer is linear and probabilities come from a softmax with
temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError

PROB_FLOOR = 1e-7
TEMPERATURE = 1.0


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("need at least an input and an output layer", "layer_sizes")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}", "layer_sizes")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}", "activation")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Model parameters plus the architecture that gives them meaning."""

    arch: Architecture
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.arch.num_params:
            raise InputError(
                f"expected {self.arch.num_params} parameters for {self.arch.layer_sizes}, "
                f"got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InputError("parameter vector contains non-finite values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views in forward order."""
        out = []
        offset = 0
        for fan_in, fan_out in self.arch.shapes:
            W = self.values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset:offset + fan_out]
            offset += fan_out
            out.append((W, b))
        return out

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.arch, values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.arch, self.values)

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    __hash__ = None


def pack_layers(arch: Architecture, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> ParamVector:
    parts = []
    for (fan_in, fan_out), (W, b) in zip(arch.shapes, layers, strict=True):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise InputError(f"layer shape {W.shape}/{b.shape} does not fit ({fan_in}, {fan_out})")
        parts.extend([W.ravel(), b])
    return ParamVector(arch, np.concatenate(parts))


def zeros(arch: Architecture) -> ParamVector:
    return ParamVector(arch, np.zeros(arch.num_params))


def init_params(arch: Architecture, seed) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return pack_layers(arch, layers)


def _as_batch(params: ParamVector, samples) -> tuple[np.ndarray, bool]:
    x = np.asarray(samples, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise InputError(
            f"sample dimension {x.shape[-1] if x.ndim else 0} does not match "
            f"input dim {params.arch.input_dim}"
        )
    return x, single


def _forward_cache(params: ParamVector, x: np.ndarray):
    acts = [x]
    pre = []
    layers = params.layers()
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts, pre


def forward_logits(params: ParamVector, samples) -> np.ndarray:
    """Logits for one sample (shape ``(K,)``) or a batch (shape ``(n, K)``)."""
    x, single = _as_batch(params, samples)
    acts, _ = _forward_cache(params, x)
    out = acts[-1]
    return out[0] if single else out


def softmax_t(logits, T: float = TEMPERATURE) -> np.ndarray:
    if not T > 0:
        raise ConfigError(f"temperature must be positive, got {T}", "T")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: ParamVector, samples) -> np.ndarray:
    return softmax_t(forward_logits(params, samples), TEMPERATURE)


def predict_class(params: ParamVector, samples):
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    probs = predict_proba(params, samples)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=1)


def kl_div(teacher, student) -> np.ndarray | float:
    """KL(teacher || student) in nats, row-wise for 2-D input.

    Zero teacher entries contribute nothing; student entries are floored at
    ``PROB_FLOOR`` before the log.
    """
    q = np.asarray(teacher, dtype=np.float64)
    p = np.asarray(student, dtype=np.float64)
    if q.shape != p.shape:
        raise InputError(f"distribution shapes differ: {q.shape} vs {p.shape}")
    p = np.maximum(p, PROB_FLOOR)
    safe_q = np.where(q > 0, q, 1.0)
    terms = np.where(q > 0, q * (np.log(safe_q) - np.log(p)), 0.0)
    out = terms.sum(axis=-1)
    # rounding can leave tiny negatives when q == p
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def kl_loss_and_grad(params: ParamVector, x, targets, weights) -> tuple[float, np.ndarray]:
    """Weighted *sum* of per-sample KL(target || softmax(logits)) and its gradient.

    Returns ``(loss, grad_values)``. ``backprop_kl`` divides by the batch size.
    """
    x, _ = _as_batch(params, x)
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = x.shape[0]
    if t.shape != (n, params.arch.num_classes) or w.shape != (n,):
        raise InputError(
            f"targets {t.shape} / weights {w.shape} not aligned with batch of {n} "
            f"and {params.arch.num_classes} classes"
        )
    acts, pre = _forward_cache(params, x)
    p = softmax_t(acts[-1], TEMPERATURE)
    loss = float(np.dot(w, kl_div(t, p)))

    # d/dz of -sum_k t_k log max(p_k, eps); the floor cuts the gradient where active
    live = t * (p >= PROB_FLOOR)
    delta = (p * live.sum(axis=1, keepdims=True) - live) * w[:, None]

    layers = params.layers()
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)
    flat = np.concatenate([part for gW, gb in grads for part in (gW.ravel(), gb)])
    return loss, flat


def backprop_kl(params: ParamVector, batch, targets, weights) -> ParamVector:
    """Gradient of ``mean_j weights_j * KL(targets_j || softmax(f(batch_j)))``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("batch must be a non-empty 2-D array")
    _, grad = kl_loss_and_grad(params, x, targets, weights)
    return ParamVector(params.arch, grad / x.shape[0])


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    if params.arch != grad.arch or params.values.shape != grad.values.shape:
        raise InputError("gradient does not match parameter layout")
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}", "lr")
    return ParamVector(params.arch, params.values - lr * grad.values)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
