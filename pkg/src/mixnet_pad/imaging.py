"""Frame loading helpers."""

from __future__ import annotations

import os
from functools import lru_cache

import numpy as np
from PIL import Image

from .datamodel import DatasetManifest


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    """HxWx3 float32 in [0, 1]. Results are memoised per path and read-only."""
    st = os.stat(path)
    return _load_rgb_cached(os.fspath(path), st.st_mtime_ns, st.st_size)


@lru_cache(maxsize=50_000)
def _load_rgb_cached(path: str, mtime_ns: int, size: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr.flags.writeable = False
    return arr


def clear_cache() -> None:
    _load_rgb_cached.cache_clear()


def load_gray(path: str | os.PathLike) -> np.ndarray:
    """HxW float64 with 0..255 intensities (luma of the RGB image)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def resize_gray(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape == tuple(size):
        return image
    im = Image.fromarray(image.astype(np.float32), mode="F")
    return np.asarray(im.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float64)


def load_batch(manifest: DatasetManifest, indices=None) -> np.ndarray:
    """Stack frames as an NCHW float32 array."""
    records = manifest.records if indices is None else [manifest.records[i] for i in indices]
    if not records:
        raise ValueError("no records to load")
    arrs = [load_rgb(r.image_path(manifest.root)) for r in records]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"frames have mixed shapes {sorted(shapes)}")
    return np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2))
