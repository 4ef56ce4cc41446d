"""Graph convolution / graph embed pooling layers and the cluster model.

The graph conv filters node features with H = alpha*A + (1-alpha)*I
(identity restricted to valid rows, so padded slots stay zero), then
applies a dense transform, ReLU and dropout. Pooling projects nodes onto
k learned slots: E = softmax over the node axis of V @ W_emb (padded rows
excluded), V' = E^T V, A' = E^T A E. Because E's columns are convex
weights over real nodes, pooled adjacencies stay in [0, 1] and the pooled
output is invariant to node order and padding.

All tensors are batched: V (B, n, d), A (B, n, n), mask (B, n).
Everything has an explicit backward pass compatible with nn.grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn import (
    Dense,
    Param,
    adam_step,
    ensure_finite,
    glorot_uniform,
    make_rng,
    mse,
    softmax_cross_entropy,
)

TASK_CLASSIFICATION = "classification"
TASK_REGRESSION = "regression"
TASKS = (TASK_CLASSIFICATION, TASK_REGRESSION)


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def _bt(X: np.ndarray) -> np.ndarray:
    # batched matrix transpose
    return X.transpose(0, 2, 1)


class GraphConv:
    """out = Dropout(ReLU(H V W)) with H = alpha*A + (1-alpha)*diag(mask)."""

    def __init__(self, d_in: int, d_out: int, rng, dropout: float = 0.5, name: str = "gc"):
        self.W = Param(glorot_uniform(rng, d_in, d_out), f"{name}.W")
        self.alpha_raw = Param(np.zeros((1, 1)), f"{name}.alpha")  # alpha = sigmoid(raw)
        self.dropout = dropout
        self._cache = None

    @property
    def params(self):
        return [self.W, self.alpha_raw]

    @property
    def alpha(self) -> float:
        return _sigmoid(float(self.alpha_raw.value[0, 0]))

    def forward(self, V, A, mask, training=False, rng=None):
        B, n, d_in = V.shape
        if A.shape != (B, n, n) or d_in != self.W.value.shape[0]:
            raise ValidationError(
                f"graph conv shape mismatch: V{V.shape} A{A.shape} W{self.W.value.shape}"
            )
        alpha = self.alpha
        m = mask.astype(np.float64)
        eye = np.zeros_like(A)
        idx = np.arange(n)
        eye[:, idx, idx] = m
        H = alpha * A + (1.0 - alpha) * eye
        Z1 = np.matmul(H, V)
        Z2 = np.matmul(Z1, self.W.value)
        out = np.maximum(Z2, 0.0)
        drop = None
        if training and self.dropout > 0.0:
            keep = rng.random(out.shape) >= self.dropout
            drop = keep / (1.0 - self.dropout)
            out = out * drop
        self._cache = (V, A, eye, H, Z1, Z2 > 0.0, alpha, drop)
        return ensure_finite("graph conv output", out)

    def backward(self, dOut):
        V, A, eye, H, Z1, relu_mask, alpha, drop = self._cache
        if drop is not None:
            dOut = dOut * drop
        d2 = dOut * relu_mask
        self.W.grad += np.einsum("bnd,bne->de", Z1, d2)
        dZ1 = np.matmul(d2, self.W.value.T)
        dV = np.matmul(_bt(H), dZ1)
        dH = np.matmul(dZ1, _bt(V))
        dalpha = float(np.sum(dH * (A - eye)))
        self.alpha_raw.grad += dalpha * alpha * (1.0 - alpha)
        dA = alpha * dH
        return dV, dA


class GraphPool:
    """Soft-assignment pooling of n nodes onto k slots."""

    def __init__(self, d: int, k: int, rng, name: str = "gp"):
        if k < 1:
            raise ValidationError(f"pool size must be >= 1, got {k}")
        self.k = k
        self.W_emb = Param(glorot_uniform(rng, d, k), f"{name}.W_emb")
        self._cache = None

    @property
    def params(self):
        return [self.W_emb]

    def forward(self, V, A, mask):
        if not np.all(mask.any(axis=1)):
            raise ValidationError("graph pool: a graph has all rows masked")
        m = mask.astype(np.float64)[:, :, None]  # (B, n, 1)
        S = np.matmul(V, self.W_emb.value)  # (B, n, k)
        # softmax over the node axis, padded rows excluded
        S_shift = S - np.where(m > 0, S, -np.inf).max(axis=1, keepdims=True)
        e = np.exp(S_shift) * m
        E = e / e.sum(axis=1, keepdims=True)
        Vp = np.matmul(_bt(E), V)
        Ap = np.matmul(np.matmul(_bt(E), A), E)
        self._cache = (V, A, E)
        return ensure_finite("pooled nodes", Vp), ensure_finite("pooled adjacency", Ap)

    def backward(self, dVp, dAp):
        V, A, E = self._cache
        dV = np.matmul(E, dVp)
        dE = np.matmul(V, _bt(dVp))
        dE += np.matmul(np.matmul(A, E), _bt(dAp))
        dE += np.matmul(np.matmul(_bt(A), E), dAp)
        dA = np.matmul(np.matmul(E, dAp), _bt(E))
        # softmax (over nodes) backward, columnwise; padded rows have E = 0
        dot = (dE * E).sum(axis=1, keepdims=True)
        dS = E * (dE - dot)
        self.W_emb.grad += np.einsum("bnd,bnk->dk", V, dS)
        dV += np.matmul(dS, self.W_emb.value.T)
        return dV, dA


@dataclass
class GcnArch:
    """Layer widths: two convs, pool, two convs, pool, dense, output."""

    d_in: int
    conv_widths: tuple = (64, 64, 32, 32)
    pool_sizes: tuple = (32, 8)
    dense_width: int = 256
    n_out: int = 2
    dropout: float = 0.5

    def to_doc(self) -> dict:
        return {
            "d_in": self.d_in,
            "conv_widths": list(self.conv_widths),
            "pool_sizes": list(self.pool_sizes),
            "dense_width": self.dense_width,
            "n_out": self.n_out,
            "dropout": self.dropout,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GcnArch":
        return cls(
            d_in=doc["d_in"],
            conv_widths=tuple(doc["conv_widths"]),
            pool_sizes=tuple(doc["pool_sizes"]),
            dense_width=doc["dense_width"],
            n_out=doc["n_out"],
            dropout=doc["dropout"],
        )


class GcnModel:
    """conv, conv, pool, conv, conv, pool, flatten, dense, output head."""

    def __init__(self, arch: GcnArch, seed: int = 0):
        self.arch = arch
        rng = make_rng(seed)
        c1, c2, c3, c4 = arch.conv_widths
        p1, p2 = arch.pool_sizes
        self.gc1 = GraphConv(arch.d_in, c1, rng, arch.dropout, "gc1")
        self.gc2 = GraphConv(c1, c2, rng, arch.dropout, "gc2")
        self.gp1 = GraphPool(c2, p1, rng, "gp1")
        self.gc3 = GraphConv(c2, c3, rng, arch.dropout, "gc3")
        self.gc4 = GraphConv(c3, c4, rng, arch.dropout, "gc4")
        self.gp2 = GraphPool(c4, p2, rng, "gp2")
        self.dense1 = Dense(p2 * c4, arch.dense_width, rng, "dense1")
        self.dense_out = Dense(arch.dense_width, arch.n_out, rng, "dense_out")
        self._cache = None

    @property
    def params(self):
        layers = [self.gc1, self.gc2, self.gp1, self.gc3, self.gc4, self.gp2,
                  self.dense1, self.dense_out]
        return [p for layer in layers for p in layer.params]

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def forward(self, V, A, mask, training=False, rng=None):
        B = V.shape[0]
        p1, p2 = self.arch.pool_sizes
        ones1 = np.ones((B, p1), dtype=bool)
        ones2 = np.ones((B, p2), dtype=bool)
        h = self.gc1.forward(V, A, mask, training, rng)
        h = self.gc2.forward(h, A, mask, training, rng)
        h, A1 = self.gp1.forward(h, A, mask)
        h = self.gc3.forward(h, A1, ones1, training, rng)
        h = self.gc4.forward(h, A1, ones1, training, rng)
        h, _A2 = self.gp2.forward(h, A1, ones1)
        flat = h.reshape(B, -1)
        z = self.dense1.forward(flat)
        z_relu = np.maximum(z, 0.0)
        out = self.dense_out.forward(z_relu)
        self._cache = (z > 0.0, h.shape)
        return out

    def backward(self, dOut):
        relu_mask, pooled_shape = self._cache
        dz_relu = self.dense_out.backward(dOut)
        dflat = self.dense1.backward(dz_relu * relu_mask)
        dVp2 = dflat.reshape(pooled_shape)
        dV5, dA1 = self.gp2.backward(dVp2, np.zeros_like(self.gp2._cache[1]))
        dV4, dA1_c4 = self.gc4.backward(dV5)
        dV3, dA1_c3 = self.gc3.backward(dV4)
        dA1 += dA1_c4 + dA1_c3
        dV2, dA0 = self.gp1.backward(dV3, dA1)
        dV1, dA0_c2 = self.gc2.backward(dV2)
        dV0, dA0_c1 = self.gc1.backward(dV1)
        return dV0, dA0 + dA0_c2 + dA0_c1


def stack_graphs(graphs) -> tuple:
    V = np.stack([g.V for g in graphs])
    A = np.stack([g.A for g in graphs])
    mask = np.stack([g.mask for g in graphs])
    return V, A, mask


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = -1


def _batch_loss(model, V, A, mask, y, task, training, rng):
    out = model.forward(V, A, mask, training=training, rng=rng)
    if task == TASK_CLASSIFICATION:
        return softmax_cross_entropy(out, y)
    return mse(out, np.asarray(y, float).reshape(out.shape))


def _val_score(model, graphs, y, task) -> float:
    """Higher-is-better validation score (accuracy, or -MSE)."""
    pred = gcn_predict(model, graphs)
    y = np.asarray(y)
    if task == TASK_CLASSIFICATION:
        return float((pred == y).mean())
    return -float(((pred - y.astype(float)) ** 2).mean())


def train_gcn(graphs, y, task, graphs_val=None, y_val=None, *,
              batch_size: int = 256, lr: float = 1e-4, epochs: int = 100,
              patience: int = 10, seed: int = 0) -> tuple:
    """Adam training with early stopping on the validation metric.

    Returns (model, TrainHistory); the model carries best-epoch weights
    when a validation set is given.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if not graphs:
        raise ValidationError("no training graphs")
    d_in = graphs[0].V.shape[1]
    n_out = 2 if task == TASK_CLASSIFICATION else 1
    model = GcnModel(GcnArch(d_in=d_in, n_out=n_out), seed=seed)
    return _fit(model, graphs, y, task, graphs_val, y_val,
                batch_size=batch_size, lr=lr, epochs=epochs,
                patience=patience, seed=seed)


def _fit(model, graphs, y, task, graphs_val, y_val, *, batch_size, lr,
         epochs, patience, seed):
    V, A, mask = stack_graphs(graphs)
    y = np.asarray(y)
    rng = make_rng(seed + 1)
    drop_rng = make_rng(seed + 2)
    history = TrainHistory()
    best_score = -np.inf
    best_values = None
    stall = 0
    n = len(graphs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            pick = order[start : start + batch_size]
            model.zero_grads()
            loss, dout = _batch_loss(
                model, V[pick], A[pick], mask[pick], y[pick], task, True, drop_rng
            )
            model.backward(dout)
            if lr > 0.0:
                adam_step(model.params, lr)
            total += loss * len(pick)
        history.train_loss.append(total / n)
        if graphs_val:
            score = _val_score(model, graphs_val, y_val, task)
            history.val_metric.append(score)
            if score > best_score:
                best_score = score
                best_values = [p.value.copy() for p in model.params]
                history.best_epoch = epoch
                stall = 0
            else:
                stall += 1
                if stall > patience:
                    break
    if best_values is not None:
        for p, v in zip(model.params, best_values):
            p.value = v
    return model, history


def gcn_forward(model: GcnModel, graph) -> np.ndarray:
    """Inference pass over one ClusterGraph; returns logits or score row."""
    V, A, mask = stack_graphs([graph])
    return model.forward(V, A, mask, training=False)[0]


def gcn_predict(model: GcnModel, graphs) -> np.ndarray:
    """Class labels (argmax; ties to the lower class) or raw scores."""
    V, A, mask = stack_graphs(graphs)
    out = model.forward(V, A, mask, training=False)
    if model.arch.n_out == 2:
        return np.argmax(out, axis=1)
    return out[:, 0]


def save_gcn(model: GcnModel, path, extra: dict | None = None):
    from .nn import save_checkpoint

    save_checkpoint(path, "gcn", model.arch.to_doc(), model.params, extra)


def load_gcn(path) -> tuple:
    from .nn import load_checkpoint, params_from_doc

    doc = load_checkpoint(path)
    if doc["kind"] != "gcn":
        raise ValidationError(f"checkpoint at {path} is {doc['kind']!r}, expected gcn")
    model = GcnModel(GcnArch.from_doc(doc["arch"]))
    params_from_doc(model.params, doc["params"])
    return model, doc.get("extra", {})
