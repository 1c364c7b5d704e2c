"""Handcrafted baselines: LBP+HOG and multi-scale LBP with an RBF SVM."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..datamodel import DatasetManifest, dumps_records
from .hog import HOG_LENGTH, hog_features, mirror_permutation
from .lbp import MSLBP_LENGTH, lbp_histogram, multiscale_lbp
from .svm import FeatureVector, SvmModel, load_svm, predict_score, save_svm, train_svm

DESCRIPTORS = {"lbp59+hog324": 59 + HOG_LENGTH, "mslbp": MSLBP_LENGTH}
CANONICAL_SIZE = (64, 64)

__all__ = [
    "DESCRIPTORS", "FeatureVector", "SvmModel", "extract", "extract_manifest",
    "hog_features", "lbp_histogram", "load_features", "load_svm", "mirror_permutation",
    "multiscale_lbp", "predict_score", "save_features", "save_svm", "train_svm",
]


def extract(image, descriptor_id: str) -> FeatureVector:
    """Descriptor of a 64x64 grayscale crop."""
    img = np.asarray(image, dtype=np.float64)
    if descriptor_id == "lbp59+hog324":
        values = np.concatenate([lbp_histogram(img), hog_features(img)])
    elif descriptor_id == "mslbp":
        values = multiscale_lbp(img)
    else:
        raise ValueError(f"unknown descriptor {descriptor_id!r}; choose from {sorted(DESCRIPTORS)}")
    return FeatureVector(values, descriptor_id)


def extract_manifest(manifest: DatasetManifest, descriptor_id: str) -> np.ndarray:
    """(n, length) feature matrix for every record, resized to 64x64.

    When ``MIXNET_CACHE`` names a directory, results are cached there keyed
    by the manifest content and descriptor.
    """
    from ..imaging import load_gray, resize_gray

    cache_dir = os.environ.get("MIXNET_CACHE")
    cache_file = None
    if cache_dir:
        h = hashlib.sha256()
        h.update(descriptor_id.encode())
        h.update(str(Path(manifest.root or ".").resolve()).encode())
        h.update(dumps_records(manifest.records).encode())
        cache_file = Path(cache_dir) / f"{descriptor_id}-{h.hexdigest()[:20]}"
        if cache_file.with_suffix(".json").exists():
            return load_features(cache_file)[0]
    rows = [extract(resize_gray(load_gray(r.image_path(manifest.root)), CANONICAL_SIZE),
                    descriptor_id).values for r in manifest.records]
    x = np.stack(rows) if rows else np.zeros((0, DESCRIPTORS[descriptor_id]))
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        save_features(x, descriptor_id, cache_file)
    return x


def save_features(x: np.ndarray, descriptor_id: str, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<path>.f32`` (little-endian float32, row-major) and ``<path>.json``."""
    path = Path(path)
    x = np.atleast_2d(np.asarray(x))
    data, meta = path.with_suffix(".f32"), path.with_suffix(".json")
    x.astype("<f4").tofile(data)
    meta.write_text(json.dumps({"count": int(x.shape[0]), "descriptor_id": descriptor_id,
                                "length": int(x.shape[1])}, sort_keys=True) + "\n")
    return data, meta


def load_features(path: str | os.PathLike) -> tuple[np.ndarray, str]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    x = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
    expected = meta["count"] * meta["length"]
    if x.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {x.size}")
    return x.reshape(meta["count"], meta["length"]).astype(np.float64), meta["descriptor_id"]
