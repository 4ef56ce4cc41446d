"""Image/cluster ingestion, spatial matching, label construction, splits.

File formats:
  * images: JSON lines, one object per image with keys image_id, lat, lon,
    counts (length-C int list) and optional embedding (float list),
  * clusters: CSV with header cluster_id, lat, lon, country, then one
    column per raw indicator,
  * taxonomy: plain text, one class name per line (order fixes count
    indices),
  * labeled dataset artifact: a single JSON document carrying clusters,
    labels, rescale constants and the train/val split.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geo import GeoPoint, build_index, haversine_km, query_radius

log = logging.getLogger(__name__)

ARTIFACT_VERSION = "1"


@dataclass(frozen=True)
class Taxonomy:
    class_names: tuple

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValidationError("taxonomy must have at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("taxonomy class names must be unique")

    def __len__(self) -> int:
        return len(self.class_names)


def load_taxonomy(path) -> Taxonomy:
    with open(path) as fh:
        names = [line.strip() for line in fh if line.strip()]
    return Taxonomy(tuple(names))


def save_taxonomy(taxonomy: Taxonomy, path):
    with open(path, "w") as fh:
        fh.write("\n".join(taxonomy.class_names) + "\n")


@dataclass
class ImageRecord:
    image_id: str
    location: GeoPoint
    counts: np.ndarray
    embedding: np.ndarray | None = None


@dataclass
class Cluster:
    cluster_id: str
    center: GeoPoint
    country: str
    image_ids: list = field(default_factory=list)
    indicators: dict = field(default_factory=dict)


def load_images(path, taxonomy: Taxonomy) -> dict:
    """Parse an images JSONL file into {image_id: ImageRecord}.

    Malformed rows raise with their 1-based line number; count vectors must
    match the taxonomy length; embeddings must share one length.
    """
    c = len(taxonomy)
    records: dict[str, ImageRecord] = {}
    embed_dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                image_id = str(row["image_id"])
                loc = GeoPoint(float(row["lat"]), float(row["lon"]))
                counts = np.asarray(row["counts"], dtype=np.int64)
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed image row ({exc})") from exc
            if counts.ndim != 1 or counts.shape[0] != c:
                raise ValidationError(
                    f"{path}:{lineno}: counts length {counts.shape} does not match "
                    f"taxonomy size {c}"
                )
            if np.any(counts < 0):
                raise ValidationError(f"{path}:{lineno}: negative object count")
            if image_id in records:
                raise ValidationError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            embedding = None
            if row.get("embedding") is not None:
                embedding = np.asarray(row["embedding"], dtype=np.float64)
                if embed_dim is None:
                    embed_dim = embedding.shape[0]
                elif embedding.shape[0] != embed_dim:
                    raise ValidationError(
                        f"{path}:{lineno}: embedding length {embedding.shape[0]} != {embed_dim}"
                    )
            records[image_id] = ImageRecord(image_id, loc, counts, embedding)
    if not records:
        log.warning("no image rows found in %s", path)
    log.info("loaded %d images from %s", len(records), path)
    return records


def load_clusters(path) -> tuple[list, list]:
    """Parse the clusters CSV. Returns (clusters, indicator_names)."""
    clusters = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty clusters file") from None
        if header[:4] != ["cluster_id", "lat", "lon", "country"]:
            raise ValidationError(
                f"{path}: header must start with cluster_id,lat,lon,country; got {header[:4]}"
            )
        indicator_names = header[4:]
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                cid = row[0]
                center = GeoPoint(float(row[1]), float(row[2]))
                values = {name: float(v) for name, v in zip(indicator_names, row[4:])}
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed cluster row ({exc})") from exc
            for name, v in values.items():
                if not np.isfinite(v):
                    raise ValidationError(f"{path}:{lineno}: non-finite value for {name}")
            if cid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate cluster_id {cid!r}")
            seen.add(cid)
            clusters.append(Cluster(cid, center, row[3], [], values))
    return clusters, indicator_names


def match_images_to_clusters(images, clusters, radius_km: float = 5.0, mode: str = "nearest"):
    """Assign images to clusters and drop clusters left with no images.

    ``nearest`` assigns each image to the closest center within radius_km
    (ties broken by lower cluster_id); ``all`` duplicates an image into
    every cluster whose radius contains it. Returns the kept clusters.
    """
    if mode not in ("nearest", "all"):
        raise ValidationError(f"unknown assignment mode {mode!r}")
    index = build_index(
        ((rec.image_id, rec.location) for rec in images.values()),
        cell_size_deg=max(radius_km / 111.0, 0.01),
    )
    if mode == "all":
        for cl in clusters:
            cl.image_ids = sorted(query_radius(index, cl.center, radius_km))
    else:
        best: dict[str, tuple[float, str]] = {}
        for cl in clusters:
            for img_id in query_radius(index, cl.center, radius_km):
                d = haversine_km(images[img_id].location, cl.center)
                key = (d, cl.cluster_id)
                if img_id not in best or key < best[img_id]:
                    best[img_id] = key
        assigned: dict[str, list] = {}
        for img_id, (_, cid) in best.items():
            assigned.setdefault(cid, []).append(img_id)
        for cl in clusters:
            cl.image_ids = sorted(assigned.get(cl.cluster_id, []))
    kept = [cl for cl in clusters if cl.image_ids]
    dropped = len(clusters) - len(kept)
    if dropped:
        log.info("dropped %d clusters with no images in range", dropped)
    return kept


def rescale_indicator(values) -> tuple[np.ndarray, float, float]:
    """Linearly map raw values onto [-1, 1]. Returns (scaled, min, max).

    A constant column maps to all zeros (with a warning) so degenerate
    synthetic configs stay runnable.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValidationError("rescale needs at least one value")
    if not np.all(np.isfinite(values)):
        raise ValidationError("rescale input contains non-finite values")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        log.warning("constant indicator column; rescaling to all zeros")
        return np.zeros_like(values), lo, hi
    return 2.0 * (values - lo) / (hi - lo) - 1.0, lo, hi


def median_split(values) -> tuple[np.ndarray, float]:
    """Binary labels: 1 where value >= median. Returns (labels, median).

    The median of an even-length sample is the mean of the two middle
    order statistics, so e.g. [1,2,3,4] -> 2.5 -> labels [0,0,1,1].
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValidationError("median split needs at least two values")
    med = float(np.median(values))
    labels = (values >= med).astype(np.int64)
    ones = int(labels.sum())
    zeros = labels.size - ones
    if zeros == 0 or ones == 0:
        log.warning("median split produced a single class (%d ones / %d zeros)", ones, zeros)
    else:
        log.info("median split: %d ones / %d zeros", ones, zeros)
    return labels, med


@dataclass
class SplitSpec:
    seed: int
    train_fraction: float
    membership: dict  # cluster_id -> "train" | "val"

    def ids(self, part: str) -> list:
        return sorted(cid for cid, m in self.membership.items() if m == part)


@dataclass
class IndicatorColumn:
    name: str
    raw: dict  # cluster_id -> raw value
    rescaled: dict  # cluster_id -> value in [-1, 1]
    labels: dict  # cluster_id -> 0/1
    vmin: float
    vmax: float
    median: float


@dataclass
class LabeledDataset:
    clusters: list  # of Cluster, each with image_ids assigned
    taxonomy: Taxonomy
    indicators: dict  # name -> IndicatorColumn
    split: SplitSpec | None = None

    def cluster_by_id(self, cid: str) -> Cluster:
        return self._by_id()[cid]

    def _by_id(self):
        if not hasattr(self, "_id_map"):
            self._id_map = {cl.cluster_id: cl for cl in self.clusters}
        return self._id_map

    def clusters_in(self, part: str) -> list:
        if self.split is None:
            raise ValidationError("dataset has no split")
        member = self.split.membership
        return [cl for cl in self.clusters if member.get(cl.cluster_id) == part]

    @property
    def countries(self) -> list:
        return sorted({cl.country for cl in self.clusters})


def build_labels(clusters, taxonomy: Taxonomy, indicator_names) -> LabeledDataset:
    """Rescale each indicator over all clusters and median-split it."""
    if not clusters:
        raise ValidationError("0 clusters retained; cannot build labels")
    indicators = {}
    cids = [cl.cluster_id for cl in clusters]
    for name in indicator_names:
        raw = np.array([cl.indicators[name] for cl in clusters], dtype=np.float64)
        scaled, vmin, vmax = rescale_indicator(raw)
        labels, med = median_split(raw)
        indicators[name] = IndicatorColumn(
            name=name,
            raw=dict(zip(cids, raw.tolist())),
            rescaled=dict(zip(cids, scaled.tolist())),
            labels=dict(zip(cids, (int(v) for v in labels))),
            vmin=vmin,
            vmax=vmax,
            median=med,
        )
    return LabeledDataset(clusters=clusters, taxonomy=taxonomy, indicators=indicators)


def split_train_val(dataset: LabeledDataset, seed: int, train_fraction: float = 0.8) -> SplitSpec:
    """Seeded random split into floor(f*N) train and the rest val."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = sorted(cl.cluster_id for cl in dataset.clusters)
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(ids))
    n_train = int(np.floor(train_fraction * len(ids)))
    membership = {}
    for rank, idx in enumerate(order):
        membership[ids[idx]] = "train" if rank < n_train else "val"
    spec = SplitSpec(seed=seed, train_fraction=train_fraction, membership=membership)
    dataset.split = spec
    return spec


def pool_datasets(ds_a: LabeledDataset, ds_b: LabeledDataset, fraction: float, seed: int):
    """Sampled union of two train splits for cross-country training.

    Draws ``fraction`` of each dataset's train clusters without
    replacement. Indicators present in only one dataset are excluded
    (with a warning). Returns (pooled_clusters, common_indicator_names);
    evaluation stays per-country on the original datasets.
    """
    if ds_a.taxonomy.class_names != ds_b.taxonomy.class_names:
        raise ValidationError("pooled datasets must share a taxonomy")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"pool fraction must be in (0, 1], got {fraction}")
    common = [n for n in ds_a.indicators if n in ds_b.indicators]
    for name in sorted(set(ds_a.indicators) ^ set(ds_b.indicators)):
        log.warning("indicator %r missing from one dataset; excluded from pooled set", name)
    rng = np.random.Generator(np.random.Philox(seed))
    pooled = []
    for ds in (ds_a, ds_b):
        train = sorted(ds.clusters_in("train"), key=lambda cl: cl.cluster_id)
        n_take = int(round(fraction * len(train)))
        take = rng.choice(len(train), size=n_take, replace=False) if n_take < len(train) else np.arange(len(train))
        pooled.extend(train[int(i)] for i in sorted(take))
    return pooled, common


# --- artifact (JSON) ------------------------------------------------------


def dataset_to_doc(dataset: LabeledDataset, images_path: str | None = None,
                   radius_km: float | None = None, mode: str | None = None) -> dict:
    doc = {
        "version": ARTIFACT_VERSION,
        "taxonomy": list(dataset.taxonomy.class_names),
        "images_path": images_path,
        "radius_km": radius_km,
        "assignment_mode": mode,
        "clusters": [
            {
                "cluster_id": cl.cluster_id,
                "lat": cl.center.lat,
                "lon": cl.center.lon,
                "country": cl.country,
                "image_ids": list(cl.image_ids),
                "indicators": cl.indicators,
            }
            for cl in sorted(dataset.clusters, key=lambda c: c.cluster_id)
        ],
        "indicators": {
            name: {
                "min": col.vmin,
                "max": col.vmax,
                "median": col.median,
                "rescaled": col.rescaled,
                "labels": col.labels,
            }
            for name, col in sorted(dataset.indicators.items())
        },
        "split": None
        if dataset.split is None
        else {
            "seed": dataset.split.seed,
            "train_fraction": dataset.split.train_fraction,
            "membership": dataset.split.membership,
        },
    }
    return doc


def dataset_from_doc(doc: dict) -> LabeledDataset:
    if doc.get("version") != ARTIFACT_VERSION:
        raise ValidationError(f"unsupported dataset artifact version {doc.get('version')!r}")
    taxonomy = Taxonomy(tuple(doc["taxonomy"]))
    clusters = [
        Cluster(
            cluster_id=c["cluster_id"],
            center=GeoPoint(c["lat"], c["lon"]),
            country=c["country"],
            image_ids=list(c["image_ids"]),
            indicators=dict(c["indicators"]),
        )
        for c in doc["clusters"]
    ]
    indicators = {
        name: IndicatorColumn(
            name=name,
            raw={c["cluster_id"]: c["indicators"][name] for c in doc["clusters"]},
            rescaled=dict(entry["rescaled"]),
            labels={k: int(v) for k, v in entry["labels"].items()},
            vmin=entry["min"],
            vmax=entry["max"],
            median=entry["median"],
        )
        for name, entry in doc["indicators"].items()
    }
    split = None
    if doc.get("split") is not None:
        split = SplitSpec(
            seed=doc["split"]["seed"],
            train_fraction=doc["split"]["train_fraction"],
            membership=dict(doc["split"]["membership"]),
        )
    return LabeledDataset(clusters=clusters, taxonomy=taxonomy, indicators=indicators, split=split)


def save_dataset(dataset: LabeledDataset, path, **meta):
    with open(path, "w") as fh:
        json.dump(dataset_to_doc(dataset, **meta), fh, sort_keys=True)


def load_dataset(path) -> LabeledDataset:
    with open(path) as fh:
        return dataset_from_doc(json.load(fh))
