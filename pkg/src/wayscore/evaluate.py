"""Metrics, baselines, vote aggregation, permutation importance, exports.

The regression metric is the *square of the Pearson correlation* between
predictions and truth. That is not the coefficient of determination: a
biased predictor that tracks the truth linearly still scores 1.0 here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geo import build_index, query_knn

log = logging.getLogger(__name__)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size < 1:
        raise ValidationError(f"length mismatch: {preds.shape} vs {labels.shape}")
    return float((preds == labels).mean())


def pearson_r2(preds, truths) -> float:
    """Squared Pearson correlation; 0 (with a warning) when either side
    is constant."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.size < 2:
        raise ValidationError("pearson_r2 needs two equal-length vectors of size >= 2")
    sp, st = preds.std(), truths.std()
    if sp == 0.0 or st == 0.0:
        log.warning("pearson_r2: zero variance on one side; returning 0")
        return 0.0
    r = float(((preds - preds.mean()) * (truths - truths.mean())).mean() / (sp * st))
    return r * r


def random_baseline(labels, seed: int) -> np.ndarray:
    """Uniform coin-flip predictions; ~0.5 accuracy on balanced labels."""
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.integers(0, 2, size=len(np.asarray(labels)))


def neighbor_baseline(eval_clusters, pool_clusters, pool_targets, k: int, task: str) -> np.ndarray:
    """Predict each cluster from its k nearest labeled neighbours.

    The pool is indexed by cluster center; the evaluated cluster itself is
    excluded when present. Classification takes the mode (tie -> lower
    class), regression the mean.
    """
    if not pool_clusters:
        raise ValidationError("neighbor baseline: empty pool")
    index = build_index(((cl.cluster_id, cl.center) for cl in pool_clusters), cell_size_deg=0.5)
    preds = []
    for cl in eval_clusters:
        ids = query_knn(index, cl.center, k + 1)
        ids = [i for i in ids if i != cl.cluster_id][:k]
        vals = np.asarray([pool_targets[i] for i in ids])
        if task == "classification":
            ones = int((vals == 1).sum())
            preds.append(1 if ones > vals.size - ones else 0)
        else:
            preds.append(float(vals.mean()))
    return np.asarray(preds)


def vote_aggregate(votes, task: str, probabilities=None):
    """Collapse per-image predictions into one cluster prediction.

    Classification: majority class; an exact tie falls back to the mean
    class-1 probability thresholded at 0.5 (>= 0.5 predicts 1). When no
    probabilities are given the votes themselves serve as probabilities.
    Regression: mean of the per-image scores.
    """
    votes = np.asarray(votes, dtype=np.float64)
    if votes.size < 1:
        raise ValidationError("vote_aggregate needs at least one prediction")
    if task == "regression":
        return float(votes.mean())
    ones = int((votes == 1).sum())
    zeros = votes.size - ones
    if ones != zeros:
        return 1 if ones > zeros else 0
    probs = votes if probabilities is None else np.asarray(probabilities, dtype=np.float64)
    return 1 if probs.mean() >= 0.5 else 0


@dataclass
class ModelEval:
    indicator: str
    task: str
    model: str
    feature: str
    country: str
    metrics: dict
    predictions: list  # of {cluster_id, truth, prediction}
    confusion: dict | None = None
    runtime_s: float = 0.0


@dataclass
class ImportanceRanking:
    feature_names: list
    mean_drop: np.ndarray
    std_drop: np.ndarray
    ranks: np.ndarray  # permutation of 1..F, 1 = most important

    def rows(self):
        order = np.argsort(self.ranks)
        return [
            (self.feature_names[i], float(self.mean_drop[i]), float(self.std_drop[i]),
             int(self.ranks[i]))
            for i in order
        ]


def permutation_importance(predict_fn, X_val, y_val, metric, n_repeats: int = 10,
                           seed: int = 0, feature_names=None) -> ImportanceRanking:
    """Mean metric drop when one column is shuffled on held-out data.

    ``metric(y_true, y_pred)`` must be higher-is-better. Negative drops
    are kept as-is. Each (feature, repeat) pair shuffles with its own
    derived seed, so repeats are order-independent.
    """
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val)
    if X_val.shape[0] < 2:
        raise ValidationError("permutation importance needs >= 2 validation rows")
    n, F = X_val.shape
    baseline = metric(y_val, predict_fn(X_val))
    children = np.random.SeedSequence(seed).spawn(F * n_repeats)
    mean_drop = np.zeros(F)
    std_drop = np.zeros(F)
    for f in range(F):
        drops = np.empty(n_repeats)
        for r in range(n_repeats):
            rng = np.random.Generator(np.random.Philox(children[f * n_repeats + r]))
            Xp = X_val.copy()
            Xp[:, f] = Xp[rng.permutation(n), f]
            drops[r] = baseline - metric(y_val, predict_fn(Xp))
        mean_drop[f] = drops.mean()
        std_drop[f] = drops.std()
    # rank 1 = biggest drop; ties resolve to the lower feature index
    order = np.lexsort((np.arange(F), -mean_drop))
    ranks = np.empty(F, dtype=np.int64)
    ranks[order] = np.arange(1, F + 1)
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(F)]
    return ImportanceRanking(list(feature_names), mean_drop, std_drop, ranks)


# --- exports ---------------------------------------------------------------


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def export_tree_dot(tree, feature_names, task: str) -> str:
    """Graphviz DOT text for a fitted tree; node ids follow pre-order."""
    lines = ["digraph decision_tree {", "  node [shape=box];"]
    edges = []
    counter = [0]

    def walk(node):
        my_id = f"n{counter[0]}"
        counter[0] += 1
        if node.is_leaf:
            if node.class_counts is not None:
                pred = int(np.argmax(node.class_counts))
                label = f"class {pred}\\nn={node.n}"
            else:
                label = f"value {node.mean:.4g}\\nn={node.n}"
        else:
            label = f"{_dot_escape(str(feature_names[node.feature]))} < {node.threshold:.4g}\\nn={node.n}"
        lines.append(f'  {my_id} [label="{label}"];')
        if not node.is_leaf:
            left_id = walk(node.left)
            right_id = walk(node.right)
            edges.append(f'  {my_id} -> {left_id} [label="<"];')
            edges.append(f'  {my_id} -> {right_id} [label=">="];')
        return my_id

    walk(tree)
    return "\n".join(lines + edges + ["}"]) + "\n"


OUTCOME_CORRECT = "correct"
OUTCOME_FALSE_POSITIVE = "false_positive"
OUTCOME_FALSE_NEGATIVE = "false_negative"


def export_predictions_geojson(predictions, clusters_by_id) -> dict:
    """GeoJSON FeatureCollection of per-cluster classification outcomes.

    ``predictions`` rows need cluster_id, truth and prediction; points are
    emitted in (lon, lat) order per RFC 7946.
    """
    features = []
    for row in predictions:
        cid = row["cluster_id"]
        if cid not in clusters_by_id:
            raise ValidationError(f"prediction references unknown cluster {cid!r}")
        cl = clusters_by_id[cid]
        truth, pred = int(row["truth"]), int(row["prediction"])
        if truth == pred:
            outcome = OUTCOME_CORRECT
        elif pred == 1:
            outcome = OUTCOME_FALSE_POSITIVE
        else:
            outcome = OUTCOME_FALSE_NEGATIVE
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [cl.center.lon, cl.center.lat]},
                "properties": {
                    "cluster_id": cid,
                    "truth": truth,
                    "prediction": pred,
                    "outcome": outcome,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def confusion_counts(preds, labels) -> dict:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return {
        "tp": int(((preds == 1) & (labels == 1)).sum()),
        "tn": int(((preds == 0) & (labels == 0)).sum()),
        "fp": int(((preds == 1) & (labels == 0)).sum()),
        "fn": int(((preds == 0) & (labels == 1)).sum()),
    }


def eval_to_doc(entries) -> dict:
    return {
        "entries": [
            {
                "indicator": e.indicator,
                "task": e.task,
                "model": e.model,
                "feature": e.feature,
                "country": e.country,
                "metrics": e.metrics,
                "predictions": e.predictions,
                "confusion": e.confusion,
            }
            for e in entries
        ]
    }


def save_eval_report(entries, path):
    with open(path, "w") as fh:
        json.dump(eval_to_doc(entries), fh, sort_keys=True)
