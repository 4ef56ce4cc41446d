"""Flat key/value run configuration and run manifests.

A config file is one JSON object; unknown keys are rejected so typos
fail fast. Every default below reproduces the reference hyperparameters,
so a config only has to name its input paths to run the standard setup.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time

from .errors import ValidationError

MODEL_NAMES = ("cart", "random_forest", "gbdt", "knn", "mlp", "gcn")
TASK_NAMES = ("classification", "regression")

DEFAULTS = {
    # input paths
    "images_path": None,
    "clusters_path": None,
    "taxonomy_path": None,
    "out_dir": "runs/out",
    "dataset_path": None,  # defaults to <out_dir>/dataset/dataset.json
    # dataset construction
    "radius_km": 5.0,
    "assignment_mode": "nearest",
    "train_fraction": 0.8,
    "seed": 0,
    "indicators": "all",
    "tasks": ["classification", "regression"],
    "models": ["random_forest"],
    # tabular model hyperparameters
    "mlp_hidden": [256, 256, 256],
    "mlp_lr": 0.001,
    "mlp_epochs": 100,
    "mlp_batch": 128,
    "mlp_patience": 10,
    "rf_trees": 300,
    "rf_max_depth": None,
    "gbdt_stages": 300,
    "gbdt_shrinkage": 0.1,
    "gbdt_depth": 3,
    "knn_k": 3,
    "cart_depth": None,
    # graph model hyperparameters
    "gcn_lr": 0.0001,
    "gcn_batch": 256,
    "gcn_epochs": 100,
    "gcn_patience": 10,
    "gcn_dropout": 0.5,
    "gcn_n_max": 200,
    "gcn_node_mode": "counts",
    # evaluation / interpretation
    "neighbor_k": 1000,
    "importance_repeats": 10,
    "importance_model": "random_forest",
    "tree_depth": 3,
    # pooling
    "pool_with": None,
    "pool_fraction": 1.0,
    # synthetic data
    "synth_n_clusters": 200,
    "synth_images_min": 30,
    "synth_images_max": 60,
    "synth_n_classes": 65,
    "synth_planted": [4, 13, 27, 41, 58],
    "synth_weights": [1.0, 0.8, -0.7, 0.9, -0.6],
    "synth_sigma": None,
    "synth_target_bayes": 0.97,
    "synth_corr_km": 120.0,
    "synth_embed_dim": 0,
    "synth_indicator": "wellbeing",
    "synth_country": "synthland",
    # image-count ablation
    "ablate_sizes": [50, 100, 150, 200],
    "ablate_epochs": 100,
    "ablate_lr": 0.001,
}


class RunConfig(dict):
    """Effective configuration: defaults overlaid with the config file."""

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        cfg = cls(copy.deepcopy(DEFAULTS))
        if path is not None:
            try:
                with open(path) as fh:
                    user = json.load(fh)
            except FileNotFoundError:
                raise ValidationError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from exc
            if not isinstance(user, dict):
                raise ValidationError(f"{path}: config must be a JSON object")
            unknown = sorted(set(user) - set(DEFAULTS))
            if unknown:
                raise ValidationError(f"{path}: unknown config keys {unknown}")
            cfg.update(user)
        if overrides:
            cfg.update(overrides)
        cfg.validate()
        return cfg

    def validate(self):
        for name in self["models"]:
            if name not in MODEL_NAMES:
                raise ValidationError(
                    f"unknown model {name!r}; valid names: {list(MODEL_NAMES)}"
                )
        for task in self["tasks"]:
            if task not in TASK_NAMES:
                raise ValidationError(f"unknown task {task!r}; valid: {list(TASK_NAMES)}")
        if self["assignment_mode"] not in ("nearest", "all"):
            raise ValidationError(f"unknown assignment_mode {self['assignment_mode']!r}")
        sizes = self["ablate_sizes"]
        if sorted(sizes) != list(sizes) or len(set(sizes)) != len(sizes):
            raise ValidationError(f"ablate_sizes must be strictly ascending, got {sizes}")

    def require_paths(self, *keys):
        for key in keys:
            path = self.get(key)
            if path is None:
                raise ValidationError(f"config key {key!r} is required for this command")
            if not os.path.exists(path):
                raise ValidationError(f"{key} = {path!r} does not exist")

    @property
    def dataset_path(self) -> str:
        return self["dataset_path"] or os.path.join(self["out_dir"], "dataset", "dataset.json")

    def hash(self) -> str:
        canon = json.dumps(self, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory, command: str, config: RunConfig, inputs=(),
                   metrics=None, started=None, notes=None):
    """Atomically write the run manifest next to the command's outputs."""
    doc = {
        "command": command,
        "config_hash": config.hash(),
        "config": dict(config),
        "versions": {"dataset_artifact": "1", "checkpoint": "1"},
        "input_fingerprints": {p: file_sha256(p) for p in inputs if p and os.path.exists(p)},
        "timings": {"total_s": None if started is None else time.time() - started},
        "metrics": metrics or {},
        "notes": notes or [],
    }
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
    os.replace(tmp, path)
    return path


class OutputLock:
    """Advisory lock so two commands cannot write one output dir at once."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        return False
