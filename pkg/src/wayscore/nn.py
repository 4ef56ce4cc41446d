"""Minimal dense-layer compute with explicit reverse-mode gradients.

Everything is float64 numpy. Each layer caches what its backward pass
needs; gradients accumulate into ``Param.grad`` so a fragment can be run
once forward and once backward, then checked entry-by-entry against
central finite differences with :func:`grad_check`.

Conventions:
  * losses are mean-reduced over the batch,
  * dropout is inverted (train-time scaling, inference is identity),
  * RNG streams are counter-based (Philox) so sequences are reproducible
    across platforms for a fixed seed.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import NumericsError, ValidationError


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based RNG stream; same seed gives the same sequence."""
    return np.random.Generator(np.random.Philox(seed))


def ensure_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains NaN/Inf")
    return arr


class Param:
    """A trainable tensor with gradient and Adam state."""

    def __init__(self, value: np.ndarray, name: str = "param"):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def dense_forward(X: np.ndarray, W: np.ndarray, bias: np.ndarray) -> np.ndarray:
    X, W, bias = np.asarray(X, float), np.asarray(W, float), np.asarray(bias, float)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0] or bias.shape != (W.shape[1],):
        raise ValidationError(
            f"dense shape mismatch: X{X.shape} W{W.shape} bias{bias.shape}"
        )
    return ensure_finite("dense output", X @ W + bias)


def dense_backward(X, W, dY):
    """Gradients of Y = XW + bias. Returns (dX, dW, dbias)."""
    dX = dY @ W.T
    dW = X.T @ dY
    dbias = dY.sum(axis=0)
    return dX, dW, dbias


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "dense"):
        self.W = Param(glorot_uniform(rng, d_in, d_out), f"{name}.W")
        self.bias = Param(np.zeros(d_out), f"{name}.bias")
        self._X = None

    @property
    def params(self):
        return [self.W, self.bias]

    def forward(self, X: np.ndarray) -> np.ndarray:
        self._X = np.asarray(X, float)
        return dense_forward(self._X, self.W.value, self.bias.value)

    def backward(self, dY: np.ndarray) -> np.ndarray:
        dX, dW, dbias = dense_backward(self._X, self.W.value, dY)
        self.W.grad += dW
        self.bias.grad += dbias
        return dX


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return dY * (X > 0.0)


class ReLU:
    def __init__(self):
        self._X = None

    params: list = []

    def forward(self, X):
        self._X = X
        return relu(X)

    def backward(self, dY):
        return relu_backward(self._X, dY)


def dropout(X: np.ndarray, p: float, rng: np.random.Generator, training: bool):
    """Inverted dropout. Returns (output, mask); mask is None at inference."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return X, None
    keep = rng.random(X.shape) >= p
    scale = 1.0 / (1.0 - p)
    return X * keep * scale, keep * scale


def dropout_backward(dY: np.ndarray, mask) -> np.ndarray:
    return dY if mask is None else dY * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over rows. Returns (loss, dlogits). Labels are 0/1 ints."""
    logits = ensure_finite("logits", np.asarray(logits, float))
    labels = np.asarray(labels, int)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error. Returns (loss, dpred)."""
    pred = ensure_finite("pred", np.asarray(pred, float))
    target = np.asarray(target, float).reshape(pred.shape)
    diff = pred - target
    n = pred.shape[0]
    return float((diff**2).sum() / n), 2.0 * diff / n


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on every param (in place)."""
    for p in params:
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        ensure_finite(p.name, p.value)


def grad_check(loss_and_grad, params, h: float = 1e-4) -> float:
    """Worst relative error between analytic grads and central differences.

    ``loss_and_grad()`` must run a deterministic forward+backward (dropout
    off), filling ``param.grad``, and return the scalar loss. Every entry
    of every param is perturbed by +-h.
    """
    for p in params:
        p.zero_grad()
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.value.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            for q in params:
                q.zero_grad()
            lp = loss_and_grad()
            flat[i] = orig - h
            for q in params:
                q.zero_grad()
            lm = loss_and_grad()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / (max(abs(aflat[i]), abs(numeric)) + 1e-8)
            worst = max(worst, err)
    # restore analytic grads so callers can inspect them afterwards
    for p, ag in zip(params, analytic):
        p.grad[...] = ag
    return worst


# --- checkpoint envelope -------------------------------------------------

CHECKPOINT_VERSION = "1"


def params_to_doc(params) -> dict:
    return {
        p.name: {"shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
        for p in params
    }


def params_from_doc(params, doc: dict):
    for p in params:
        entry = doc[p.name]
        p.value = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        p.grad = np.zeros_like(p.value)
        p.m = np.zeros_like(p.value)
        p.v = np.zeros_like(p.value)
        p.step = 0


def save_checkpoint(path, kind: str, arch: dict, params, extra: dict | None = None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": arch,
        "params": params_to_doc(params),
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc
