"""Fixed-size graph construction for the graph model.

Each cluster becomes a fully connected graph over (a sample of) its
images: node matrix V (n_max x d, zero-padded), adjacency
A[j][k] = 1 - d_jk / d_max clamped to [0, 1], and a validity mask. d_max
is one global constant: the largest within-cluster image distance in the
dataset.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import assemble_node_features
from .geo import haversine_km

EARTH_KM_PER_RAD = 6371.0088


@dataclass
class ClusterGraph:
    V: np.ndarray  # n_max x d
    A: np.ndarray  # n_max x n_max
    mask: np.ndarray  # n_max bools
    n_real: int
    cluster_id: str = ""


@dataclass
class GraphConfig:
    n_max: int = 200
    d_max_km: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValidationError(f"n_max must be >= 1, got {self.n_max}")
        if self.d_max_km <= 0:
            raise ValidationError(f"d_max_km must be > 0, got {self.d_max_km}")


def _pairwise_km(points) -> np.ndarray:
    """Dense haversine distance matrix for a list of GeoPoints."""
    lat = np.radians([p.lat for p in points])
    lon = np.radians([p.lon for p in points])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    s = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_KM_PER_RAD * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def compute_global_dmax(clusters, images) -> float:
    """Largest image-to-image distance within any single cluster.

    Falls back to 1 km (with a warning) when every cluster has at most one
    image or all images coincide.
    """
    import logging

    best = 0.0
    for cl in clusters:
        if len(cl.image_ids) < 2:
            continue
        pts = [images[i].location for i in cl.image_ids]
        best = max(best, float(_pairwise_km(pts).max()))
    if best <= 0.0:
        logging.getLogger(__name__).warning(
            "no within-cluster image pair with positive distance; using d_max = 1 km"
        )
        return 1.0
    return best


def cluster_seed(global_seed: int, cluster_id: str) -> int:
    """Stable per-cluster sampling seed (independent of process hashing)."""
    return global_seed ^ zlib.crc32(cluster_id.encode("utf-8"))


def sample_images(cluster, n_max: int, seed: int) -> list:
    """Uniform subsample (without replacement) of a cluster's image ids.

    Deterministic under the seed; the result is ordered by image_id.
    """
    if n_max < 1:
        raise ValidationError(f"n_max must be >= 1, got {n_max}")
    ids = sorted(cluster.image_ids)
    if len(ids) <= n_max:
        return ids
    rng = np.random.Generator(np.random.Philox(seed))
    pick = rng.choice(len(ids), size=n_max, replace=False)
    return sorted(ids[int(i)] for i in pick)


def build_adjacency(image_points, d_max_km: float) -> np.ndarray:
    """Fully connected affinity matrix 1 - d/d_max, clamped to [0, 1]."""
    if d_max_km <= 0:
        raise ValidationError(f"d_max_km must be > 0, got {d_max_km}")
    d = _pairwise_km(image_points)
    a = np.clip(1.0 - d / d_max_km, 0.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return a


def pad_graph(V_real: np.ndarray, A_real: np.ndarray, n_max: int, cluster_id: str = "") -> ClusterGraph:
    """Zero-pad node and adjacency matrices out to n_max slots."""
    V_real = np.asarray(V_real, dtype=np.float64)
    A_real = np.asarray(A_real, dtype=np.float64)
    n_real = V_real.shape[0]
    if n_real > n_max:
        raise ValidationError(f"{n_real} nodes exceed n_max={n_max}; sample first")
    d = V_real.shape[1]
    V = np.zeros((n_max, d))
    A = np.zeros((n_max, n_max))
    mask = np.zeros(n_max, dtype=bool)
    V[:n_real] = V_real
    A[:n_real, :n_real] = A_real
    mask[:n_real] = True
    return ClusterGraph(V=V, A=A, mask=mask, n_real=n_real, cluster_id=cluster_id)


def build_cluster_graph(cluster, images, config: GraphConfig, mode: str,
                        standardizer=None) -> ClusterGraph:
    """Sample, featurize, connect and pad one cluster."""
    ids = sample_images(cluster, config.n_max, cluster_seed(config.seed, cluster.cluster_id))
    V = np.stack([assemble_node_features(images[i], mode) for i in ids])
    if standardizer is not None:
        V = standardizer.apply(V)
    A = build_adjacency([images[i].location for i in ids], config.d_max_km)
    return pad_graph(V, A, config.n_max, cluster_id=cluster.cluster_id)


def build_graphs(clusters, images, config: GraphConfig, mode: str, standardizer=None) -> list:
    return [build_cluster_graph(cl, images, config, mode, standardizer) for cl in clusters]


def node_feature_matrix(clusters, images, config: GraphConfig, mode: str) -> np.ndarray:
    """Stacked (sampled) node features across clusters, for fitting scalers."""
    rows = []
    for cl in clusters:
        ids = sample_images(cl, config.n_max, cluster_seed(config.seed, cl.cluster_id))
        rows.extend(assemble_node_features(images[i], mode) for i in ids)
    return np.stack(rows)
