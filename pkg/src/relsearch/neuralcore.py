"""Minimal differentiable kernel shared by teacher and student.

Everything is float64 and hand-differentiated: the model zoo is two small
fixed architectures, so per-layer gradients plus a finite-difference checker
are simpler and more verifiable than a general autodiff graph. Parameters
live in named dicts of numpy arrays; checkpoints are versioned JSON
containers of (shape, flat data) pairs that round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_FORMAT = "relsearch-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss.

    Carries the failing batch index and per-parameter norms for diagnosis.
    """

    def __init__(self, message: str, batch_index: int, norms: dict[str, float]):
        super().__init__(message)
        self.batch_index = batch_index
        self.norms = norms


@dataclass
class DenseLayer:
    """Affine map y = W x + b with W of shape [out, in]."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.b.ndim != 1 or self.W.shape[0] != self.b.shape[0]:
            raise ShapeError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Seeded uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """y = W x + b; x may be a single vector [in] or a batch [n, in]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.W.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != layer fan-in {layer.W.shape[1]}")
    return x @ layer.W.T + layer.b


def dense_backward(
    layer: DenseLayer, x: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dW, db) for y = W x + b.

    Single vector: dx = W^T dy, dW = dy x^T, db = dy. Batched inputs sum the
    parameter gradients over the batch in row order.
    """
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.ndim != dy.ndim or x.shape[:-1] != dy.shape[:-1]:
        raise ShapeError(f"batch shapes disagree: x{x.shape} dy{dy.shape}")
    if x.shape[-1] != layer.W.shape[1] or dy.shape[-1] != layer.W.shape[0]:
        raise ShapeError(f"dims disagree with layer: x{x.shape} dy{dy.shape} W{layer.W.shape}")
    dx = dy @ layer.W
    if x.ndim == 1:
        dW = np.outer(dy, x)
        db = dy.copy()
    else:
        dW = dy.T @ x
        db = dy.sum(axis=0)
    return dx, dW, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """dx_i = dy_i * [x_i > 0]."""
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(dy, dtype=np.float64) * (x > 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Overflow-safe softmax along the last axis (max subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a soft target distribution.

    loss = -sum_c target_c * log softmax(logits)_c, dlogits = q - target.
    Computed via log-sum-exp so the loss stays finite for any finite logits.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits shape {z.shape} != target shape {t.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite logits")
    sums = t.sum(axis=-1)
    if np.any(t < 0.0) or np.any(np.abs(sums - 1.0) > 1e-6):
        raise ShapeError("target must be a distribution (non-negative, summing to 1)")
    logq = log_softmax(z)
    loss = float(-(t * logq).sum() / (1 if z.ndim == 1 else z.shape[0]))
    dlogits = softmax(z) - t
    if z.ndim > 1:
        dlogits = dlogits / z.shape[0]
    return loss, dlogits


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {params[name].shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


def param_norms(params: Params) -> dict[str, float]:
    return {k: float(np.linalg.norm(p)) for k, p in params.items()}


def grad_check(
    loss_fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    h: float = 1e-5,
    n_probes: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    Probes n_probes random parameter coordinates; for each, compares the
    analytic gradient at the current point with (f(p+h) - f(p-h)) / 2h.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    worst = 0.0
    for _ in range(n_probes):
        flat = int(rng.integers(total))
        idx = int(np.searchsorted(bounds, flat, side="right"))
        name = names[idx]
        offset = flat - (int(bounds[idx - 1]) if idx > 0 else 0)
        coords = np.unravel_index(offset, params[name].shape)
        original = params[name][coords]
        params[name][coords] = original + h
        plus, _ = loss_fn(params)
        params[name][coords] = original - h
        minus, _ = loss_fn(params)
        params[name][coords] = original
        numeric = (plus - minus) / (2.0 * h)
        analytic = float(grads[name][coords])
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container


def save_checkpoint(path: str | Path, params: Params, meta: dict | None = None) -> None:
    """Write a versioned JSON container of named tensors.

    Floats are serialized with shortest-roundtrip repr, so save -> load
    reproduces every array bit-exactly and identical inputs produce
    identical bytes.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.shape), "data": np.asarray(p, dtype=np.float64).ravel().tolist()}
            for name, p in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    params: Params = {}
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name!r} data length != product of shape")
        params[name] = data.reshape(shape)
    return params, payload.get("meta", {})


def clone_params(params: Params) -> Params:
    return {k: p.copy() for k, p in params.items()}
