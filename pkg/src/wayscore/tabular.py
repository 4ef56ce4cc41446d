"""Models over cluster feature vectors: CART, forests, GBDT, kNN, MLP.

Trees are grown greedily: candidate thresholds are midpoints between
consecutive distinct sorted feature values, scored by Gini reduction
(classification) or variance reduction (regression). Rows with
value < threshold go left, >= threshold go right. Ties on score are
broken toward the lower feature index, then lower threshold, and a node
splits whenever any candidate exists (so constant-gain patterns like XOR
still separate); leaves form on pure nodes, depth/min_leaf limits, or
feature-constant rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn import Dense, ReLU, adam_step, make_rng, mse, softmax_cross_entropy

TASK_CLASSIFICATION = "classification"
TASK_REGRESSION = "regression"


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    # leaves: class counts [n0, n1] for classification, mean for regression
    class_counts: np.ndarray | None = None
    mean: float = 0.0
    n: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _gini_scan(sy: np.ndarray):
    """Weighted Gini impurity of every prefix/suffix split position."""
    n = sy.size
    cum1 = np.cumsum(sy)[:-1].astype(float)
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    n1l = cum1
    n1r = float(sy.sum()) - cum1
    gini_l = 1.0 - ((nl - n1l) / nl) ** 2 - (n1l / nl) ** 2
    gini_r = 1.0 - ((nr - n1r) / nr) ** 2 - (n1r / nr) ** 2
    return (nl * gini_l + nr * gini_r) / n


def _variance_scan(sy: np.ndarray):
    """Weighted child variance of every prefix/suffix split position."""
    n = sy.size
    cs = np.cumsum(sy)[:-1]
    css = np.cumsum(sy * sy)[:-1]
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    total, total_sq = sy.sum(), (sy * sy).sum()
    var_l = css / nl - (cs / nl) ** 2
    var_r = (total_sq - css) / nr - ((total - cs) / nr) ** 2
    return (nl * var_l + nr * var_r) / n


def _best_split(X, y, rows, features, task, min_leaf):
    """(score, feature, threshold) of the best candidate, or None."""
    best = None
    for f in features:
        v = X[rows, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        if sv[0] == sv[-1]:
            continue
        sy = y[rows][order].astype(float)
        child_cost = _gini_scan(sy) if task == TASK_CLASSIFICATION else _variance_scan(sy)
        positions = np.arange(1, sv.size)
        valid = (sv[1:] > sv[:-1]) & (positions >= min_leaf) & (sv.size - positions >= min_leaf)
        if not valid.any():
            continue
        cost = np.where(valid, child_cost, np.inf)
        i = int(np.argmin(cost))
        cand = (float(cost[i]), f, float((sv[i] + sv[i + 1]) / 2.0))
        if best is None or cand[0] < best[0]:
            best = cand
    return best


def _leaf(y, rows, task) -> TreeNode:
    sub = y[rows]
    if task == TASK_CLASSIFICATION:
        counts = np.array([int((sub == 0).sum()), int((sub == 1).sum())])
        return TreeNode(class_counts=counts, n=rows.size)
    return TreeNode(mean=float(sub.mean()), n=rows.size)


def fit_cart(X, y, task, max_depth=None, min_leaf: int = 1, mtry=None, rng=None) -> TreeNode:
    """Grow a CART tree. mtry/rng enable per-split feature subsampling."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError(f"need a non-empty 2-D matrix, got {X.shape}")
    if task not in (TASK_CLASSIFICATION, TASK_REGRESSION):
        raise ValidationError(f"unknown task {task!r}")
    n_features = X.shape[1]

    def grow(rows, depth):
        sub = y[rows]
        pure = (sub == sub[0]).all()
        if pure or (max_depth is not None and depth >= max_depth) or rows.size < 2 * min_leaf:
            return _leaf(y, rows, task)
        if mtry is not None and mtry < n_features:
            features = np.sort(rng.choice(n_features, size=mtry, replace=False))
        else:
            features = np.arange(n_features)
        found = _best_split(X, y, rows, features, task, min_leaf)
        if found is None:
            return _leaf(y, rows, task)
        _, f, thr = found
        go_left = X[rows, f] < thr
        node = _leaf(y, rows, task)  # carries prediction stats for export
        node.feature, node.threshold = f, thr
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    return grow(np.arange(X.shape[0]), 0)


def predict_tree(tree: TreeNode, x) -> float | int:
    """Route one row to its leaf; majority class (tie -> lower) or mean."""
    node = tree
    while not node.is_leaf:
        node = node.left if x[node.feature] < node.threshold else node.right
    if node.class_counts is not None:
        return int(np.argmax(node.class_counts))
    return node.mean


class FlatTree:
    """Array form of a tree for vectorized batch prediction."""

    def __init__(self, root: TreeNode, task: str):
        self.task = task
        feats, thrs, lefts, rights, values = [], [], [], [], []

        def walk(node):
            idx = len(feats)
            feats.append(node.feature)
            thrs.append(node.threshold)
            lefts.append(-1)
            rights.append(-1)
            if node.class_counts is not None:
                values.append(float(np.argmax(node.class_counts)))
            else:
                values.append(node.mean)
            if not node.is_leaf:
                lefts[idx] = walk(node.left)
                rights[idx] = walk(node.right)
            return idx

        walk(root)
        self.feature = np.asarray(feats)
        self.threshold = np.asarray(thrs)
        self.left = np.asarray(lefts)
        self.right = np.asarray(rights)
        self.value = np.asarray(values)

    @classmethod
    def from_arrays(cls, doc: dict, task: str) -> "FlatTree":
        obj = cls.__new__(cls)
        obj.task = task
        obj.feature = np.asarray(doc["feature"], dtype=np.int64)
        obj.threshold = np.asarray(doc["threshold"], dtype=np.float64)
        obj.left = np.asarray(doc["left"], dtype=np.int64)
        obj.right = np.asarray(doc["right"], dtype=np.int64)
        obj.value = np.asarray(doc["value"], dtype=np.float64)
        return obj

    def to_arrays(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    def apply(self, X) -> np.ndarray:
        """Leaf index for every row of X."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return node
            rows = np.flatnonzero(internal)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] < self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class ForestModel:
    trees: list
    flat: list
    task: str
    n_trees: int
    seed: int
    bootstrap: bool
    mtry: int


def default_mtry(n_features: int, task: str) -> int:
    if task == TASK_CLASSIFICATION:
        return int(np.ceil(np.sqrt(n_features)))
    return max(1, int(np.ceil(n_features / 3.0)))


def fit_random_forest(X, y, task, n_trees: int = 300, max_depth=None,
                      mtry=None, min_leaf: int = 1, bootstrap: bool = True,
                      seed: int = 0) -> ForestModel:
    """Bagged trees with per-split feature subsampling.

    Tree t uses the seed ``seed + t``, so results do not depend on fit
    scheduling.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] < 2:
        raise ValidationError("random forest needs at least 2 rows")
    if mtry is None:
        mtry = default_mtry(X.shape[1], task)
    trees = []
    for t in range(n_trees):
        rng = make_rng(seed + t)
        if bootstrap:
            rows = rng.integers(0, X.shape[0], size=X.shape[0])
            Xt, yt = X[rows], y[rows]
        else:
            Xt, yt = X, y
        trees.append(fit_cart(Xt, yt, task, max_depth=max_depth, min_leaf=min_leaf,
                              mtry=mtry, rng=rng))
    flat = [FlatTree(tr, task) for tr in trees]
    return ForestModel(trees=trees, flat=flat, task=task, n_trees=n_trees,
                       seed=seed, bootstrap=bootstrap, mtry=mtry)


def predict_forest(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    votes = np.stack([ft.predict(X) for ft in model.flat])
    if model.task == TASK_REGRESSION:
        return votes.mean(axis=0)
    ones = (votes == 1).sum(axis=0)
    return (ones > model.n_trees - ones).astype(np.int64)  # tie -> class 0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


@dataclass
class GbdtModel:
    task: str
    init: float
    stages: list  # of (FlatTree, learning_rate)
    n_stages: int
    train_loss: list = field(default_factory=list)


def fit_gbdt(X, y, task, n_stages: int = 300, shrinkage: float = 0.1,
             tree_depth: int = 3, min_leaf: int = 1, seed: int = 0) -> GbdtModel:
    """Least-squares boosting (regression) or log-loss boosting with
    Newton leaf values (binary classification)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValidationError("gbdt needs at least 2 rows")
    if task == TASK_REGRESSION:
        init = float(y.mean())
    else:
        p = float(np.clip(y.mean(), 1e-9, 1 - 1e-9))
        init = float(np.log(p / (1.0 - p)))
    F = np.full(X.shape[0], init)
    model = GbdtModel(task=task, init=init, stages=[], n_stages=n_stages)
    for _ in range(n_stages):
        if task == TASK_REGRESSION:
            residual = y - F
            tree = fit_cart(X, residual, TASK_REGRESSION, max_depth=tree_depth,
                            min_leaf=min_leaf)
            flat = FlatTree(tree, TASK_REGRESSION)
        else:
            p = _sigmoid(F)
            residual = y - p
            tree = fit_cart(X, residual, TASK_REGRESSION, max_depth=tree_depth,
                            min_leaf=min_leaf)
            flat = FlatTree(tree, TASK_REGRESSION)
            # Newton step per leaf: sum(residual) / sum(p*(1-p))
            leaves = flat.apply(X)
            hess = p * (1.0 - p)
            for leaf_id in np.unique(leaves):
                rows = leaves == leaf_id
                denom = max(float(hess[rows].sum()), 1e-12)
                flat.value[leaf_id] = float(residual[rows].sum()) / denom
        F = F + shrinkage * flat.predict(X)
        model.stages.append((flat, shrinkage))
        if task == TASK_REGRESSION:
            model.train_loss.append(float(((y - F) ** 2).mean()))
        else:
            p = _sigmoid(F)
            eps = 1e-12
            model.train_loss.append(
                float(-(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)).mean())
            )
    return model


def predict_gbdt(model: GbdtModel, X, raw: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    F = np.full(X.shape[0], model.init)
    for flat, lr in model.stages:
        F = F + lr * flat.predict(X)
    if model.task == TASK_REGRESSION or raw:
        return F
    return (F > 0.0).astype(np.int64)  # tie -> class 0


def knn_predict(X_train, y_train, X_query, k: int = 3, task: str = TASK_CLASSIFICATION) -> np.ndarray:
    """Euclidean k-nearest-neighbour vote/mean.

    Distance ties resolve to the lower training-row index; class vote
    ties resolve to the lower class.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    X_query = np.atleast_2d(np.asarray(X_query, dtype=np.float64))
    n = X_train.shape[0]
    if k > n:
        raise ValidationError(f"k={k} exceeds {n} training rows")
    d2 = ((X_query[:, None, :] - X_train[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    vals = y_train[nearest]
    if task == TASK_REGRESSION:
        return vals.astype(float).mean(axis=1)
    ones = (vals == 1).sum(axis=1)
    return (ones > k - ones).astype(np.int64)


# --- MLP -------------------------------------------------------------------


class MlpModel:
    """Dense/ReLU stack with a 2-way or 1-way head."""

    def __init__(self, d_in: int, hidden, n_out: int, seed: int = 0):
        rng = make_rng(seed)
        self.hidden = tuple(hidden)
        self.n_out = n_out
        self.layers = []
        prev = d_in
        for i, width in enumerate(hidden):
            self.layers.append(Dense(prev, width, rng, f"mlp{i}"))
            self.layers.append(ReLU())
            prev = width
        self.layers.append(Dense(prev, n_out, rng, "mlp_out"))

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, X):
        h = np.asarray(X, dtype=np.float64)
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def backward(self, dOut):
        d = dOut
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


def fit_mlp(X, y, task, X_val=None, y_val=None, hidden=(256, 256, 256),
            lr: float = 1e-3, epochs: int = 100, batch_size: int = 128,
            patience: int = 10, seed: int = 0):
    """Adam-trained MLP; early stopping on the validation metric when a
    validation set is supplied. Returns (model, history dict)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n_out = 2 if task == TASK_CLASSIFICATION else 1
    model = MlpModel(X.shape[1], hidden, n_out, seed=seed)
    rng = make_rng(seed + 1)
    history = {"train_loss": [], "val_metric": [], "best_epoch": -1}
    best_score, best_values, stall = -np.inf, None, 0
    for epoch in range(epochs):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, X.shape[0], batch_size):
            pick = order[start : start + batch_size]
            for p in model.params:
                p.zero_grad()
            out = model.forward(X[pick])
            if task == TASK_CLASSIFICATION:
                loss, dout = softmax_cross_entropy(out, y[pick])
            else:
                loss, dout = mse(out, y[pick].astype(float).reshape(-1, 1))
            model.backward(dout)
            if lr > 0.0:
                adam_step(model.params, lr)
            total += loss * len(pick)
        history["train_loss"].append(total / X.shape[0])
        if X_val is not None:
            pred = predict_mlp(model, X_val)
            if task == TASK_CLASSIFICATION:
                score = float((pred == np.asarray(y_val)).mean())
            else:
                score = -float(((pred - np.asarray(y_val, float)) ** 2).mean())
            history["val_metric"].append(score)
            if score > best_score:
                best_score, stall = score, 0
                best_values = [p.value.copy() for p in model.params]
                history["best_epoch"] = epoch
            else:
                stall += 1
                if stall > patience:
                    break
    if best_values is not None:
        for p, v in zip(model.params, best_values):
            p.value = v
    return model, history


def predict_mlp(model: MlpModel, X) -> np.ndarray:
    out = model.forward(X)
    if model.n_out == 2:
        return np.argmax(out, axis=1)
    return out[:, 0]


# --- serialization ---------------------------------------------------------


def tree_to_doc(node: TreeNode) -> dict:
    if node.is_leaf:
        doc = {"n": node.n}
        if node.class_counts is not None:
            doc["class_counts"] = [int(v) for v in node.class_counts]
        else:
            doc["mean"] = node.mean
        return doc
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "n": node.n,
        "class_counts": None if node.class_counts is None else [int(v) for v in node.class_counts],
        "mean": node.mean,
        "left": tree_to_doc(node.left),
        "right": tree_to_doc(node.right),
    }


def tree_from_doc(doc: dict) -> TreeNode:
    counts = doc.get("class_counts")
    node = TreeNode(
        class_counts=None if counts is None else np.asarray(counts),
        mean=doc.get("mean", 0.0),
        n=doc.get("n", 0),
    )
    if "left" in doc:
        node.feature = doc["feature"]
        node.threshold = doc["threshold"]
        node.left = tree_from_doc(doc["left"])
        node.right = tree_from_doc(doc["right"])
    return node
