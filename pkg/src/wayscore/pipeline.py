"""Model training / checkpoint / prediction plumbing shared by commands.

Tabular models consume the cluster feature vector (summed counts plus
image count). Trees, forests and GBDT see raw features since they are
scale-invariant; the MLP and kNN see standardized features; the graph
model sees standardized per-image node features. Each checkpoint records
everything needed to rebuild its inputs (standardizer, node mode, graph
sampling seed, d_max), so evaluation is reproducible from files alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import features, gcn, graphs, tabular
from .dataset import LabeledDataset, pool_datasets
from .errors import ValidationError
from .features import Standardizer, standardize_features

FEATURE_LABELS = {
    "counts": "object_counts",
    "embedding": "embeddings",
    "counts+embedding": "embeddings+object_counts",
}


@dataclass
class DataBundle:
    """One or two labeled datasets plus their image tables."""

    datasets: list
    images: list

    @classmethod
    def single(cls, dataset: LabeledDataset, images: dict) -> "DataBundle":
        return cls([dataset], [images])

    def pairs(self, part: str):
        """(cluster, images_table) pairs for a split, ordered by id."""
        out = []
        for ds, imgs in zip(self.datasets, self.images):
            out.extend((cl, imgs) for cl in ds.clusters_in(part))
        out.sort(key=lambda pair: pair[0].cluster_id)
        return out

    def train_pairs(self, pool_fraction: float, seed: int):
        """Training pairs, honoring dataset pooling when two are loaded."""
        if len(self.datasets) == 1:
            return self.pairs("train"), sorted(self.datasets[0].indicators)
        pooled, common = pool_datasets(self.datasets[0], self.datasets[1], pool_fraction, seed)
        table = {}
        for ds, imgs in zip(self.datasets, self.images):
            for cl in ds.clusters:
                table[cl.cluster_id] = imgs
        return [(cl, table[cl.cluster_id]) for cl in pooled], sorted(common)

    def indicator_column(self, name: str):
        for ds in self.datasets:
            if name in ds.indicators:
                yield ds.indicators[name]


def targets_for(pairs, bundle: DataBundle, indicator: str, task: str) -> np.ndarray:
    """Label (classification) or rescaled value (regression) per cluster."""
    lookup = {}
    for ds in bundle.datasets:
        if indicator not in ds.indicators:
            continue
        col = ds.indicators[indicator]
        lookup.update(col.labels if task == "classification" else col.rescaled)
    try:
        vals = [lookup[cl.cluster_id] for cl, _ in pairs]
    except KeyError as exc:
        raise ValidationError(f"cluster {exc} lacks indicator {indicator!r}") from exc
    return np.asarray(vals)


def tabular_matrix(pairs) -> np.ndarray:
    return np.stack([features.aggregate_counts(cl, imgs) for cl, imgs in pairs])


def ensure_embeddings(pairs, mode: str):
    if mode == features.MODE_COUNTS:
        return
    for cl, imgs in pairs:
        for img_id in cl.image_ids:
            if imgs[img_id].embedding is None:
                raise ValidationError(
                    f"node mode {mode!r} requires embeddings but image {img_id!r} has none"
                )


def compute_dmax(bundle: DataBundle) -> float:
    best = 0.0
    for ds, imgs in zip(bundle.datasets, bundle.images):
        best = max(best, graphs.compute_global_dmax(ds.clusters, imgs))
    return best


def build_graph_set(pairs, cfg_graph: graphs.GraphConfig, mode: str, standardizer):
    return [
        graphs.build_cluster_graph(cl, imgs, cfg_graph, mode, standardizer)
        for cl, imgs in pairs
    ]


# --- training --------------------------------------------------------------


def train_model(name: str, bundle: DataBundle, train_pairs, indicator: str,
                task: str, cfg, seed: int):
    """Fit one (model, indicator, task) combination.

    Returns (checkpoint_doc_args, summary) where checkpoint_doc_args is a
    dict with kind/arch/params/extra for nn.save_checkpoint.
    """
    y = targets_for(train_pairs, bundle, indicator, task)
    val_pairs = bundle.pairs("val")
    val_pairs = [p for p in val_pairs if _has_indicator(bundle, p[0], indicator)]
    y_val = targets_for(val_pairs, bundle, indicator, task) if val_pairs else None
    base_extra = {"task": task, "indicator": indicator, "model": name}

    if name in ("cart", "random_forest", "gbdt", "knn", "mlp"):
        X = tabular_matrix(train_pairs)
        base_extra["feature"] = "counts"
        if name == "cart":
            tree = tabular.fit_cart(X, y, task, max_depth=cfg["cart_depth"])
            extra = base_extra | {"tree": tabular.tree_to_doc(tree), "standardizer": None}
            return dict(kind="cart", arch={}, params=[], extra=extra), {}
        if name == "random_forest":
            model = tabular.fit_random_forest(
                X, y, task, n_trees=cfg["rf_trees"], max_depth=cfg["rf_max_depth"], seed=seed
            )
            extra = base_extra | {
                "trees": [ft.to_arrays() for ft in model.flat],
                "standardizer": None,
            }
            return dict(kind="forest", arch={}, params=[], extra=extra), {}
        if name == "gbdt":
            model = tabular.fit_gbdt(
                X, y, task, n_stages=cfg["gbdt_stages"], shrinkage=cfg["gbdt_shrinkage"],
                tree_depth=cfg["gbdt_depth"], seed=seed
            )
            extra = base_extra | {
                "init": model.init,
                "stages": [ft.to_arrays() for ft, _ in model.stages],
                "shrinkage": cfg["gbdt_shrinkage"],
                "train_loss": model.train_loss,
                "standardizer": None,
            }
            return dict(kind="gbdt", arch={}, params=[], extra=extra), {
                "final_train_loss": model.train_loss[-1] if model.train_loss else None
            }
        # standardized-feature models
        scaler, X_std = standardize_features(X)
        if name == "knn":
            extra = base_extra | {
                "X": X_std.tolist(),
                "y": np.asarray(y).tolist(),
                "k": cfg["knn_k"],
                "standardizer": scaler.to_doc(),
            }
            return dict(kind="knn", arch={}, params=[], extra=extra), {}
        X_val = scaler.apply(tabular_matrix(val_pairs)) if val_pairs else None
        model, history = tabular.fit_mlp(
            X_std, y, task, X_val, y_val,
            hidden=tuple(cfg["mlp_hidden"]), lr=cfg["mlp_lr"], epochs=cfg["mlp_epochs"],
            batch_size=cfg["mlp_batch"], patience=cfg["mlp_patience"], seed=seed,
        )
        arch = {"d_in": X.shape[1], "hidden": list(model.hidden), "n_out": model.n_out}
        extra = base_extra | {"standardizer": scaler.to_doc()}
        return dict(kind="mlp", arch=arch, params=model.params, extra=extra), {
            "best_epoch": history["best_epoch"]
        }

    if name == "gcn":
        mode = cfg["gcn_node_mode"]
        ensure_embeddings(train_pairs + val_pairs, mode)
        d_max = compute_dmax(bundle)
        graph_seed = seed
        gconf = graphs.GraphConfig(n_max=cfg["gcn_n_max"], d_max_km=d_max, seed=graph_seed)
        node_rows = []
        for cl, imgs in train_pairs:
            ids = graphs.sample_images(cl, gconf.n_max, graphs.cluster_seed(graph_seed, cl.cluster_id))
            node_rows.extend(features.assemble_node_features(imgs[i], mode) for i in ids)
        scaler, _ = standardize_features(np.stack(node_rows))
        g_train = build_graph_set(train_pairs, gconf, mode, scaler)
        g_val = build_graph_set(val_pairs, gconf, mode, scaler) if val_pairs else None
        model, history = gcn.train_gcn(
            g_train, y, task, g_val, y_val,
            batch_size=cfg["gcn_batch"], lr=cfg["gcn_lr"], epochs=cfg["gcn_epochs"],
            patience=cfg["gcn_patience"], seed=seed,
        )
        model.arch.dropout = cfg["gcn_dropout"]
        extra = base_extra | {
            "feature": mode,
            "standardizer": scaler.to_doc(),
            "node_mode": mode,
            "d_max_km": d_max,
            "n_max": cfg["gcn_n_max"],
            "graph_seed": graph_seed,
        }
        return dict(kind="gcn", arch=model.arch.to_doc(), params=model.params, extra=extra), {
            "best_epoch": history.best_epoch
        }

    raise ValidationError(f"unknown model {name!r}")


def _has_indicator(bundle: DataBundle, cluster, indicator: str) -> bool:
    for ds in bundle.datasets:
        if indicator in ds.indicators and cluster.cluster_id in ds.indicators[indicator].labels:
            return True
    return False


# --- prediction from checkpoints -------------------------------------------


def predict_checkpoint(doc: dict, pairs) -> np.ndarray:
    """Predictions of a saved model on (cluster, images) pairs."""
    kind = doc["kind"]
    extra = doc["extra"]
    task = extra["task"]
    if kind in ("cart", "forest", "gbdt", "knn", "mlp"):
        X = tabular_matrix(pairs)
        if extra.get("standardizer"):
            X = Standardizer.from_doc(extra["standardizer"]).apply(X)
        if kind == "cart":
            flat = tabular.FlatTree(tabular.tree_from_doc(extra["tree"]), task)
            pred = flat.predict(X)
            return pred.astype(np.int64) if task == "classification" else pred
        if kind == "forest":
            flats = [tabular.FlatTree.from_arrays(d, task) for d in extra["trees"]]
            model = tabular.ForestModel(trees=[], flat=flats, task=task,
                                        n_trees=len(flats), seed=0, bootstrap=True, mtry=0)
            return tabular.predict_forest(model, X)
        if kind == "gbdt":
            flats = [(tabular.FlatTree.from_arrays(d, "regression"), extra["shrinkage"])
                     for d in extra["stages"]]
            model = tabular.GbdtModel(task=task, init=extra["init"], stages=flats,
                                      n_stages=len(flats))
            return tabular.predict_gbdt(model, X)
        if kind == "knn":
            return tabular.knn_predict(
                np.asarray(extra["X"]), np.asarray(extra["y"]), X, k=extra["k"], task=task
            )
        model = tabular.MlpModel(doc["arch"]["d_in"], doc["arch"]["hidden"],
                                 doc["arch"]["n_out"])
        from .nn import params_from_doc

        params_from_doc(model.params, doc["params"])
        return tabular.predict_mlp(model, X)
    if kind == "gcn":
        model = gcn.GcnModel(gcn.GcnArch.from_doc(doc["arch"]))
        from .nn import params_from_doc

        params_from_doc(model.params, doc["params"])
        gconf = graphs.GraphConfig(
            n_max=extra["n_max"], d_max_km=extra["d_max_km"], seed=extra["graph_seed"]
        )
        scaler = Standardizer.from_doc(extra["standardizer"])
        gs = build_graph_set(pairs, gconf, extra["node_mode"], scaler)
        return gcn.gcn_predict(model, gs)
    raise ValidationError(f"unknown checkpoint kind {kind!r}")


def tabular_predictor(doc: dict):
    """Matrix->predictions closure for permutation importance.

    Only feature-vector models have per-feature semantics; the graph model
    does not, so it returns None.
    """
    kind = doc["kind"]
    if kind == "gcn":
        return None
    extra = doc["extra"]
    task = extra["task"]
    scaler = Standardizer.from_doc(extra["standardizer"]) if extra.get("standardizer") else None

    def run(X):
        Xs = scaler.apply(X) if scaler is not None else X
        if kind == "cart":
            return tabular.FlatTree(tabular.tree_from_doc(extra["tree"]), task).predict(Xs)
        if kind == "forest":
            flats = [tabular.FlatTree.from_arrays(d, task) for d in extra["trees"]]
            model = tabular.ForestModel(trees=[], flat=flats, task=task,
                                        n_trees=len(flats), seed=0, bootstrap=True, mtry=0)
            return tabular.predict_forest(model, Xs)
        if kind == "gbdt":
            flats = [(tabular.FlatTree.from_arrays(d, "regression"), extra["shrinkage"])
                     for d in extra["stages"]]
            return tabular.predict_gbdt(
                tabular.GbdtModel(task=task, init=extra["init"], stages=flats, n_stages=len(flats)),
                Xs,
            )
        if kind == "knn":
            return tabular.knn_predict(np.asarray(extra["X"]), np.asarray(extra["y"]),
                                       Xs, k=extra["k"], task=task)
        raise ValidationError(f"no tabular predictor for kind {kind!r}")

    if kind == "mlp":
        def run(X, _doc=doc, _scaler=scaler):  # noqa: F811 - mlp needs its params once
            from .nn import params_from_doc

            model = tabular.MlpModel(_doc["arch"]["d_in"], _doc["arch"]["hidden"],
                                     _doc["arch"]["n_out"])
            params_from_doc(model.params, _doc["params"])
            return tabular.predict_mlp(model, _scaler.apply(X))

    return run


def checkpoint_name(model: str, indicator: str, task: str) -> str:
    safe = lambda s: str(s).replace(os.sep, "_").replace(" ", "_")  # noqa: E731
    return f"{safe(model)}__{safe(indicator)}__{safe(task)}.json"
