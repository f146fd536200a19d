"""Minimal differentiable-compute kernel.

Dense float64 tensors (numpy arrays) plus the handful of operations the
recommendation model needs: affine maps, softmax, scaled dot-product
attention, cosine similarity and tanh.  Every operation ships with a
hand-derived adjoint instead of a general expression graph; the model
composes forward and backward passes explicitly and `grad_check` verifies
the composition against central finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .util import atomic_write_bytes, write_json, read_json

Array = np.ndarray

_CKPT_MAGIC = b"MTAPCKPT"
_CKPT_VERSION = 1


def require_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in '{name}'")


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Array:
    return rng.normal(0.0, std, size=shape).astype(np.float64)


# ---------------------------------------------------------------------------
# primitive operations with hand-derived adjoints
# ---------------------------------------------------------------------------


def affine(x: Array, w: Array, b: Array) -> Array:
    """x @ w + b for x of shape (m, p), w (p, q), b (q,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError("affine expects x (m,p), w (p,q), b (q,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    return x @ w + b


def affine_backward(grad_out: Array, x: Array, w: Array) -> tuple[Array, Array, Array]:
    """Adjoints of affine: returns (grad_x, grad_w, grad_b)."""
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax(logits: Array, axis: int = -1) -> Array:
    """Numerically stabilized softmax along `axis`."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of empty input")
    require_finite("softmax logits", logits)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: Array, out: Array, axis: int = -1) -> Array:
    """Adjoint of softmax given its output: s * (g - <g, s>)."""
    inner = (grad_out * out).sum(axis=axis, keepdims=True)
    return out * (grad_out - inner)


def scaled_dot_attention(query: Array, keys: Array, values: Array) -> tuple[Array, Array]:
    """Single-query attention: weights = softmax(keys @ query / sqrt(n)).

    Returns (weights of shape (K,), output of shape matching a value row).
    """
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if query.ndim != 1 or keys.ndim != 2 or values.ndim != 2:
        raise ValueError("attention expects query (n,), keys (K,n), values (K,m)")
    if keys.shape[0] < 1 or keys.shape[1] != query.shape[0]:
        raise ValueError(f"attention shape mismatch: q{query.shape} k{keys.shape}")
    if values.shape[0] != keys.shape[0]:
        raise ValueError(f"keys/values row mismatch: {keys.shape} vs {values.shape}")
    n = query.shape[0]
    logits = keys @ query / np.sqrt(n)
    weights = softmax(logits)
    out = weights @ values
    return weights, out


def scaled_dot_attention_backward(
    grad_out: Array,
    query: Array,
    keys: Array,
    values: Array,
    weights: Array,
) -> tuple[Array, Array, Array]:
    """Adjoints of scaled_dot_attention w.r.t. (query, keys, values)."""
    n = query.shape[0]
    grad_values = np.outer(weights, grad_out)
    grad_weights = values @ grad_out
    grad_logits = softmax_backward(grad_weights, weights)
    grad_query = keys.T @ grad_logits / np.sqrt(n)
    grad_keys = np.outer(grad_logits, query) / np.sqrt(n)
    return grad_query, grad_keys, grad_values


def cosine_similarity(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine expects equal 1-d shapes, got {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of zero-norm vector")
    return float(a @ b / (na * nb))


def cosine_similarity_backward(grad: float, a: Array, b: Array) -> tuple[Array, Array]:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    sim = a @ b / (na * nb)
    grad_a = grad * (b / (na * nb) - sim * a / (na * na))
    grad_b = grad * (a / (na * nb) - sim * b / (nb * nb))
    return grad_a, grad_b


def tanh(x: Array) -> Array:
    return np.tanh(x)


def tanh_backward(grad_out: Array, out: Array) -> Array:
    return grad_out * (1.0 - out * out)


def log_sigmoid(x: Array) -> Array:
    """log(sigmoid(x)) computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: Array) -> Array:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# parameter store and optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


class ParameterStore:
    """Named trainable tensors with gradient slots and Adam moment state."""

    def __init__(self):
        self.params: dict[str, Array] = {}
        self.grads: dict[str, Array] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self.step_count = 0

    def add(self, name: str, value: Array) -> Array:
        if name in self.params:
            raise ValueError(f"parameter '{name}' already registered")
        value = np.asarray(value, dtype=np.float64)
        require_finite(name, value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad: Array) -> None:
        self.grads[name] += grad

    def copy_params(self) -> dict[str, Array]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, Array]) -> None:
        for name, value in params.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter '{name}'")
            if self.params[name].shape != value.shape:
                raise ValueError(f"shape mismatch loading '{name}'")
            self.params[name][...] = value


def adam_step(store: ParameterStore, config: AdamConfig) -> None:
    """Bias-corrected Adam update with decoupled L2 weight decay.

    Gradients are zeroed after the update.
    """
    store.step_count += 1
    t = store.step_count
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in store.names():
        g = store.grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        m = store._m[name]
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        p = store.params[name]
        p -= config.learning_rate * update
        if config.weight_decay > 0.0:
            p -= config.learning_rate * config.weight_decay * p
    store.zero_grads()


def grad_check(
    fn: Callable[[ParameterStore], float],
    store: ParameterStore,
    eps: float = 1e-4,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn(store)` must return the scalar loss and accumulate gradients into
    `store.grads`.  The finite-difference sweep only uses the returned loss
    values; gradients accumulated during the sweep are discarded.
    """
    store.zero_grads()
    fn(store)
    analytic = {name: store.grads[name].copy() for name in store.names()}
    max_rel = 0.0
    for name in store.names():
        p = store.params[name]
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = fn(store)
            flat[i] = old - eps
            lm = fn(store)
            flat[i] = old
            fd = (lp - lm) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(fd), 1e-8)
            rel = abs(ga[i] - fd) / denom
            if rel > max_rel:
                max_rel = rel
    store.zero_grads()
    return max_rel


# ---------------------------------------------------------------------------
# checkpoints: flat binary container of (name, shape, values) triples
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict[str, Array], manifest: dict) -> None:
    """Write arrays to a deterministic binary container plus a JSON manifest."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    payload = b"".join(
        [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(header)), header] + blobs
    )
    atomic_write_bytes(path, payload)
    write_json(str(path) + ".manifest.json", manifest)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Array], dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a multitap checkpoint")
    ver, hlen = struct.unpack_from("<II", data, len(_CKPT_MAGIC))
    if ver != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ver}")
    hstart = len(_CKPT_MAGIC) + 8
    header = json.loads(data[hstart : hstart + hlen].decode("utf-8"))
    base = hstart + hlen
    arrays: dict[str, Array] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(
            entry["shape"]
        ).copy()
    manifest = read_json(str(path) + ".manifest.json")
    return arrays, manifest
