"""Synthetic dataset generator with a planted, measurable signal.

Clusters are placed in a lat/lon box with a minimum spacing; each gets a
batch of images whose per-class counts are Poisson draws from spatially
smooth intensity fields (random Fourier features, correlation length
``corr_km``). The latent indicator is a fixed linear combination of the
cluster's summed counts over a small planted class set, plus Gaussian
noise. Because the generator knows the noiseless latent, it can report
the Bayes-optimal accuracy of the median-threshold rule by Monte Carlo,
which downstream tests use as a yardstick.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Cluster, ImageRecord, LabeledDataset, Taxonomy, build_labels
from .errors import ValidationError
from .geo import GeoPoint

KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON_EQ = 111.320


@dataclass
class SynthConfig:
    seed: int = 0
    n_clusters: int = 200
    images_per_cluster: tuple = (30, 60)
    n_classes: int = 65
    planted_classes: tuple = (4, 13, 27, 41, 58)
    planted_weights: tuple = (1.0, 0.8, -0.7, 0.9, -0.6)
    noise_sigma: float | None = None  # absolute noise; overrides target_bayes
    target_bayes: float = 0.97
    corr_km: float = 120.0
    lat_range: tuple = (8.0, 13.0)
    lon_range: tuple = (76.0, 81.0)
    image_radius_km: float = 1.5
    min_center_spacing_km: float = 4.0
    indicator_name: str = "wellbeing"
    country: str = "synthland"
    embed_dim: int = 0
    n_fourier: int = 8
    field_strength: float = 0.8
    rate_log_sigma: float = 0.5
    base_rate: float = 1.2

    def validate(self):
        if self.n_clusters < 2:
            raise ValidationError("need at least 2 clusters")
        lo, hi = self.images_per_cluster
        if not (1 <= lo <= hi):
            raise ValidationError(f"bad images_per_cluster range ({lo}, {hi})")
        if len(self.planted_classes) != len(self.planted_weights):
            raise ValidationError("planted_classes and planted_weights must align")
        if len(self.planted_classes) > self.n_classes:
            raise ValidationError("more planted classes than classes")
        if any(not 0 <= c < self.n_classes for c in self.planted_classes):
            raise ValidationError("planted class index out of range")
        if len(set(self.planted_classes)) != len(self.planted_classes):
            raise ValidationError("planted classes must be distinct")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0.5 < self.target_bayes <= 1.0:
            raise ValidationError("target_bayes must be in (0.5, 1]")
        if self.corr_km <= 0 or self.image_radius_km <= 0:
            raise ValidationError("corr_km and image_radius_km must be > 0")


@dataclass
class SynthOracle:
    """Ground truth the generator knows but models must not see."""

    planted_classes: list
    planted_weights: list
    sigma: float
    median: float
    bayes_accuracy: float
    mu: dict  # cluster_id -> noiseless latent
    latent: dict  # cluster_id -> noisy latent (the raw indicator)
    indicator_name: str = "wellbeing"

    def bayes_label(self, cluster_id: str) -> int:
        return int(self.mu[cluster_id] >= self.median)

    def to_doc(self) -> dict:
        return {
            "planted_classes": list(self.planted_classes),
            "planted_weights": list(self.planted_weights),
            "sigma": self.sigma,
            "median": self.median,
            "bayes_accuracy": self.bayes_accuracy,
            "mu": self.mu,
            "latent": self.latent,
            "indicator_name": self.indicator_name,
        }


def _normal_cdf(z: np.ndarray) -> np.ndarray:
    return np.array([0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in z])


def _sample_centers(cfg: SynthConfig, rng) -> np.ndarray:
    """Rejection-sample (lat, lon) centers with a minimum pairwise spacing."""
    lat0 = 0.5 * (cfg.lat_range[0] + cfg.lat_range[1])
    kx = KM_PER_DEG_LON_EQ * math.cos(math.radians(lat0))
    accepted = np.empty((0, 2))
    out = []
    attempts = 0
    limit = 1000 * cfg.n_clusters
    while len(out) < cfg.n_clusters:
        attempts += 1
        if attempts > limit:
            raise ValidationError(
                "could not place cluster centers with the requested spacing; "
                "enlarge the box or reduce min_center_spacing_km"
            )
        lat = rng.uniform(*cfg.lat_range)
        lon = rng.uniform(*cfg.lon_range)
        xy = np.array([lon * kx, lat * KM_PER_DEG_LAT])
        if accepted.size:
            d2 = ((accepted - xy) ** 2).sum(axis=1)
            if d2.min() < cfg.min_center_spacing_km**2:
                continue
        accepted = np.vstack([accepted, xy])
        out.append((lat, lon))
    return np.asarray(out)


class _IntensityFields:
    """Per-class log-Gaussian intensity surfaces over local km coordinates."""

    def __init__(self, cfg: SynthConfig, rng):
        C, M = cfg.n_classes, cfg.n_fourier
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(C, M))
        wavelength = cfg.corr_km * rng.uniform(0.5, 1.5, size=(C, M))
        k = 2.0 * np.pi / wavelength
        self.omega = np.stack([k * np.cos(theta), k * np.sin(theta)], axis=-1)  # (C, M, 2)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(C, M))
        self.rate = cfg.base_rate * np.exp(rng.normal(0.0, cfg.rate_log_sigma, size=C))
        self.gamma = cfg.field_strength
        self.scale = math.sqrt(2.0 / M)

    def intensity(self, xy_km: np.ndarray) -> np.ndarray:
        """Poisson rates per (point, class); chunked to bound memory."""
        n = xy_km.shape[0]
        C = self.rate.size
        lam = np.empty((n, C))
        for c0 in range(0, C, 8):
            c1 = min(c0 + 8, C)
            arg = np.einsum("nd,cmd->ncm", xy_km, self.omega[c0:c1]) + self.phase[c0:c1]
            g = self.scale * np.cos(arg).sum(axis=2)
            lam[:, c0:c1] = self.rate[c0:c1] * np.exp(self.gamma * g - 0.5 * self.gamma**2)
        return lam


def _calibrate_sigma(mu: np.ndarray, target: float) -> float:
    """Bisection on sigma so mean Phi(|mu - median| / sigma) hits target."""
    gap = np.abs(mu - np.median(mu))
    spread = float(mu.std())
    if spread == 0.0:
        return 0.0
    lo, hi = 1e-9 * spread, 100.0 * spread
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        acc = float(_normal_cdf(gap / mid).mean())
        if acc > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _monte_carlo_bayes(mu: np.ndarray, sigma: float, median: float, rng,
                       n_draws: int = 200) -> float:
    """Accuracy of predicting 1{mu >= median} against redrawn noisy labels."""
    pred = mu >= median
    if sigma == 0.0:
        return 1.0
    hits = 0
    for _ in range(n_draws):
        labels = (mu + rng.normal(0.0, sigma, size=mu.size)) >= median
        hits += int((labels == pred).sum())
    return hits / (n_draws * mu.size)


def generate_synthetic(cfg: SynthConfig):
    """Build a labeled dataset with a planted signal.

    Returns (dataset, images, oracle): the dataset is labeled but unsplit;
    images map image_id -> ImageRecord; the oracle carries the latent
    ground truth and the Monte-Carlo Bayes accuracy.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    fields = _IntensityFields(cfg, rng)
    centers = _sample_centers(cfg, rng)
    n = cfg.n_clusters
    lat0 = 0.5 * (cfg.lat_range[0] + cfg.lat_range[1])
    kx = KM_PER_DEG_LON_EQ * math.cos(math.radians(lat0))

    counts_per_img = rng.integers(cfg.images_per_cluster[0], cfg.images_per_cluster[1] + 1, size=n)
    clusters = []
    images: dict[str, ImageRecord] = {}
    totals = np.zeros((n, cfg.n_classes))
    all_counts = []
    img_meta = []  # (image_id, lat, lon)
    for i in range(n):
        cid = f"c{i:05d}"
        lat_c, lon_c = centers[i]
        n_img = int(counts_per_img[i])
        radius = cfg.image_radius_km * np.sqrt(rng.random(n_img))
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n_img)
        lat_img = lat_c + radius * np.sin(angle) / KM_PER_DEG_LAT
        lon_img = lon_c + radius * np.cos(angle) / (KM_PER_DEG_LON_EQ * np.cos(math.radians(lat_c)))
        xy = np.stack([lon_img * kx, lat_img * KM_PER_DEG_LAT], axis=1)
        lam = fields.intensity(xy)
        counts = rng.poisson(lam)
        totals[i] = counts.sum(axis=0)
        ids = [f"img_{i:05d}_{j:04d}" for j in range(n_img)]
        for j, img_id in enumerate(ids):
            img_meta.append((img_id, float(lat_img[j]), float(lon_img[j])))
            all_counts.append(counts[j])
        clusters.append(Cluster(cid, GeoPoint(float(lat_c), float(lon_c)), cfg.country, ids, {}))

    planted = np.asarray(cfg.planted_classes, dtype=int)
    weights = np.asarray(cfg.planted_weights, dtype=float)
    mu = totals[:, planted] @ weights
    sigma = cfg.noise_sigma if cfg.noise_sigma is not None else _calibrate_sigma(mu, cfg.target_bayes)
    noise = rng.normal(0.0, sigma, size=n) if sigma > 0 else np.zeros(n)
    latent = mu + noise
    for cl, value in zip(clusters, latent):
        cl.indicators[cfg.indicator_name] = float(value)

    count_matrix = np.asarray(all_counts)
    embeddings = None
    if cfg.embed_dim > 0:
        proj = rng.normal(0.0, 1.0, size=(cfg.n_classes, cfg.embed_dim)) / math.sqrt(cfg.n_classes)
        embeddings = np.tanh(count_matrix / max(1.0, count_matrix.mean()) @ proj)
        embeddings = embeddings + 0.1 * rng.normal(0.0, 1.0, size=embeddings.shape)
    for idx, (img_id, lat, lon) in enumerate(img_meta):
        images[img_id] = ImageRecord(
            img_id,
            GeoPoint(lat, lon),
            count_matrix[idx].astype(np.int64),
            None if embeddings is None else embeddings[idx],
        )

    taxonomy = Taxonomy(tuple(f"class_{i:02d}" for i in range(cfg.n_classes)))
    dataset = build_labels(clusters, taxonomy, [cfg.indicator_name])
    median = dataset.indicators[cfg.indicator_name].median
    bayes = _monte_carlo_bayes(mu, sigma, median, rng)
    oracle = SynthOracle(
        planted_classes=list(map(int, planted)),
        planted_weights=list(map(float, weights)),
        sigma=float(sigma),
        median=median,
        bayes_accuracy=float(bayes),
        mu={cl.cluster_id: float(v) for cl, v in zip(clusters, mu)},
        latent={cl.cluster_id: float(v) for cl, v in zip(clusters, latent)},
        indicator_name=cfg.indicator_name,
    )
    return dataset, images, oracle


def write_synthetic_files(dataset: LabeledDataset, images: dict, oracle: SynthOracle, out_dir):
    """Emit the standard ingestion files plus the hidden oracle document."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    images_path = os.path.join(out_dir, "images.jsonl")
    with open(images_path, "w") as fh:
        for img_id in sorted(images):
            rec = images[img_id]
            row = {
                "image_id": rec.image_id,
                "lat": rec.location.lat,
                "lon": rec.location.lon,
                "counts": [int(v) for v in rec.counts],
            }
            if rec.embedding is not None:
                row["embedding"] = [float(v) for v in rec.embedding]
            fh.write(json.dumps(row) + "\n")

    clusters_path = os.path.join(out_dir, "clusters.csv")
    indicator_names = sorted(dataset.indicators)
    with open(clusters_path, "w") as fh:
        fh.write("cluster_id,lat,lon,country," + ",".join(indicator_names) + "\n")
        for cl in sorted(dataset.clusters, key=lambda c: c.cluster_id):
            vals = ",".join(repr(cl.indicators[name]) for name in indicator_names)
            fh.write(f"{cl.cluster_id},{cl.center.lat!r},{cl.center.lon!r},{cl.country},{vals}\n")

    taxonomy_path = os.path.join(out_dir, "taxonomy.txt")
    with open(taxonomy_path, "w") as fh:
        fh.write("\n".join(dataset.taxonomy.class_names) + "\n")

    oracle_path = os.path.join(out_dir, "oracle.json")
    with open(oracle_path, "w") as fh:
        json.dump(oracle.to_doc(), fh, sort_keys=True)

    return {
        "images": images_path,
        "clusters": clusters_path,
        "taxonomy": taxonomy_path,
        "oracle": oracle_path,
    }


def load_oracle(path) -> SynthOracle:
    with open(path) as fh:
        doc = json.load(fh)
    return SynthOracle(
        planted_classes=doc["planted_classes"],
        planted_weights=doc["planted_weights"],
        sigma=doc["sigma"],
        median=doc["median"],
        bayes_accuracy=doc["bayes_accuracy"],
        mu=doc["mu"],
        latent=doc["latent"],
        indicator_name=doc.get("indicator_name", "wellbeing"),
    )
