"""Cluster-level and node-level feature construction.

A cluster's tabular feature vector is its summed per-class object counts
with the image count appended last, giving C+1 features. Node features
for the graph model are per-image: counts, an externally supplied
embedding, or both concatenated (counts first).
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import ValidationError

MODE_COUNTS = "counts"
MODE_EMBEDDING = "embedding"
MODE_BOTH = "counts+embedding"
NODE_MODES = (MODE_COUNTS, MODE_EMBEDDING, MODE_BOTH)


def aggregate_counts(cluster, images) -> np.ndarray:
    """Summed object counts plus the cluster's image count (length C+1)."""
    if not cluster.image_ids:
        raise ValidationError(f"cluster {cluster.cluster_id!r} has no images")
    total = None
    for img_id in cluster.image_ids:
        counts = images[img_id].counts
        total = counts.astype(np.float64) if total is None else total + counts
    return np.concatenate([total, [float(len(cluster.image_ids))]])


def cluster_feature_matrix(clusters, images) -> np.ndarray:
    return np.stack([aggregate_counts(cl, images) for cl in clusters])


def feature_names(taxonomy) -> list:
    return list(taxonomy.class_names) + ["n_images"]


def assemble_node_features(image, mode: str) -> np.ndarray:
    """Per-image node vector: counts (C), embedding (d_e), or both (C+d_e)."""
    if mode not in NODE_MODES:
        raise ValidationError(f"unknown node feature mode {mode!r}; choose from {NODE_MODES}")
    if mode == MODE_COUNTS:
        return image.counts.astype(np.float64)
    if image.embedding is None:
        raise ValidationError(f"image {image.image_id!r} has no embedding (mode {mode!r})")
    if mode == MODE_EMBEDDING:
        return np.asarray(image.embedding, dtype=np.float64)
    return np.concatenate([image.counts.astype(np.float64), image.embedding])


class Standardizer:
    """Per-column (x - mean) / std fit on train data; population std.

    Zero-variance columns pass through unchanged so the transform stays
    invertible.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = mean
        self.std = std

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, float) - self.mean) / self.std

    def invert(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, float) * self.std + self.mean

    def to_doc(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_doc(cls, doc: dict) -> "Standardizer":
        return cls(np.asarray(doc["mean"], float), np.asarray(doc["std"], float))


def standardize_features(X: np.ndarray) -> tuple[Standardizer, np.ndarray]:
    """Fit a standardizer on X and return (transform, transformed X)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError(f"expected a non-empty 2-D matrix, got shape {X.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std == 0.0
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    transform = Standardizer(mean, std)
    return transform, transform.apply(X)


def export_cluster_features_csv(clusters, images, taxonomy, path):
    """Write the cluster feature table (one row per cluster) to CSV."""
    names = feature_names(taxonomy)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id"] + names)
        for cl in clusters:
            z = aggregate_counts(cl, images)
            writer.writerow([cl.cluster_id] + [format(v, "g") for v in z])
