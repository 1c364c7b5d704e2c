"""Per-pixel LBP and HOG kernels.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same output. The numba path is used when numba imports and the environment
variable ``MIXNET_NO_NUMBA`` is unset (or "0"); set it to force numpy.
"""

from __future__ import annotations

import math
import os
from functools import lru_cache

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MIXNET_NO_NUMBA", "0") in ("", "0")

HOG_BINS = 9
HOG_BIN_WIDTH = 180.0 / HOG_BINS


def sample_offsets(points: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(dy, dx) of the circular neighbours. Point 0 is east, counter-clockwise;
    offsets are snapped so axis-aligned points are exact integers."""
    ang = 2.0 * np.pi * np.arange(points) / points
    dy = np.round(-radius * np.sin(ang), 12)
    dx = np.round(radius * np.cos(ang), 12)
    return dy + 0.0, dx + 0.0


@lru_cache(maxsize=None)
def uniform_lut(points: int) -> np.ndarray:
    """Map every P-bit code to its uniform-pattern bin.

    Uniform codes (at most two circular 0/1 transitions) take bins
    ``0 .. P*(P-1)+1`` in ascending code order; all others share the last bin.
    """
    codes = np.arange(1 << points, dtype=np.int64)
    rotated = ((codes >> 1) | ((codes & 1) << (points - 1)))
    transitions = np.array([bin(int(v)).count("1") for v in (codes ^ rotated)])
    uniform = transitions <= 2
    n_uniform = int(uniform.sum())
    lut = np.full(codes.shape, n_uniform, dtype=np.int64)
    lut[uniform] = np.arange(n_uniform)
    return lut


def n_bins(points: int) -> int:
    return points * (points - 1) + 3


def _lbp_codes_numpy(img, dy, dx, margin):
    h, w = img.shape
    ys = np.arange(margin, h - margin)[:, None]
    xs = np.arange(margin, w - margin)[None, :]
    center = img[margin:h - margin, margin:w - margin]
    codes = np.zeros(center.shape, dtype=np.int64)
    for p in range(dy.shape[0]):
        y0 = int(np.floor(dy[p]))
        x0 = int(np.floor(dx[p]))
        wy = dy[p] - y0
        wx = dx[p] - x0
        diff = (1 - wy) * (1 - wx) * (img[ys + y0, xs + x0] - center)
        if wx > 0:
            diff = diff + (1 - wy) * wx * (img[ys + y0, xs + x0 + 1] - center)
        if wy > 0:
            diff = diff + wy * (1 - wx) * (img[ys + y0 + 1, xs + x0] - center)
        if wy > 0 and wx > 0:
            diff = diff + wy * wx * (img[ys + y0 + 1, xs + x0 + 1] - center)
        codes |= (diff >= 0).astype(np.int64) << p
    return codes


def _hog_cells_numpy(img, cell):
    gy, gx = _gradients(img)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    t = (ang + HOG_BIN_WIDTH / 2) / HOG_BIN_WIDTH
    hi = np.floor(t).astype(np.int64)
    # an angle exactly on a bin edge (e.g. 90 degrees) is split between both bins
    tie = t == hi
    h, w = img.shape
    cy, cx = h // cell, w // cell
    rows = np.arange(cy * cell) // cell
    cols = np.arange(cx * cell) // cell
    base = (rows[:, None] * cx + cols[None, :]) * HOG_BINS
    m = mag[:cy * cell, :cx * cell]
    tie = tie[:cy * cell, :cx * cell]
    hi = hi[:cy * cell, :cx * cell]
    weight = np.where(tie, m / 2, m)
    idx = np.concatenate([(base + hi % HOG_BINS).ravel(), (base + (hi - 1) % HOG_BINS)[tie]])
    wts = np.concatenate([weight.ravel(), weight[tie]])
    hist = np.bincount(idx, weights=wts, minlength=cy * cx * HOG_BINS)
    return hist.reshape(cy, cx, HOG_BINS)


def _gradients(img):
    """Centred differences with edge replication."""
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gy, gx


if HAVE_NUMBA:
    @njit(cache=True)
    def _lbp_codes_jit(img, dy, dx, margin):
        h, w = img.shape
        out = np.zeros((h - 2 * margin, w - 2 * margin), dtype=np.int64)
        npts = dy.shape[0]
        for y in range(margin, h - margin):
            for x in range(margin, w - margin):
                c = img[y, x]
                code = 0
                for p in range(npts):
                    y0 = int(np.floor(dy[p]))
                    x0 = int(np.floor(dx[p]))
                    wy = dy[p] - y0
                    wx = dx[p] - x0
                    diff = (1 - wy) * (1 - wx) * (img[y + y0, x + x0] - c)
                    if wx > 0:
                        diff = diff + (1 - wy) * wx * (img[y + y0, x + x0 + 1] - c)
                    if wy > 0:
                        diff = diff + wy * (1 - wx) * (img[y + y0 + 1, x + x0] - c)
                    if wy > 0 and wx > 0:
                        diff = diff + wy * wx * (img[y + y0 + 1, x + x0 + 1] - c)
                    if diff >= 0:
                        code |= 1 << p
                out[y - margin, x - margin] = code
        return out

    @njit(cache=True)
    def _hog_cells_jit(img, cell):
        h, w = img.shape
        cy, cx = h // cell, w // cell
        hist = np.zeros((cy, cx, 9))
        for y in range(cy * cell):
            yu = y - 1 if y > 0 else 0
            yd = y + 1 if y < h - 1 else h - 1
            for x in range(cx * cell):
                xl = x - 1 if x > 0 else 0
                xr = x + 1 if x < w - 1 else w - 1
                gx = img[y, xr] - img[y, xl]
                gy = img[yd, x] - img[yu, x]
                mag = math.hypot(gx, gy)
                ang = math.degrees(math.atan2(gy, gx)) % 180.0
                t = (ang + 10.0) / 20.0
                b = int(math.floor(t))
                if t == b:
                    hist[y // cell, x // cell, b % 9] += mag / 2
                    hist[y // cell, x // cell, (b - 1) % 9] += mag / 2
                else:
                    hist[y // cell, x // cell, b % 9] += mag
        return hist


def lbp_codes_numpy(img: np.ndarray, points: int, radius: float) -> np.ndarray:
    dy, dx = sample_offsets(points, radius)
    return _lbp_codes_numpy(np.asarray(img, dtype=np.float64), dy, dx, int(np.ceil(radius)))


def lbp_codes_numba(img: np.ndarray, points: int, radius: float) -> np.ndarray:
    dy, dx = sample_offsets(points, radius)
    return _lbp_codes_jit(np.ascontiguousarray(img, dtype=np.float64), dy, dx,
                          int(np.ceil(radius)))


def hog_cells_numpy(img: np.ndarray, cell: int) -> np.ndarray:
    return _hog_cells_numpy(np.asarray(img, dtype=np.float64), cell)


def hog_cells_numba(img: np.ndarray, cell: int) -> np.ndarray:
    return _hog_cells_jit(np.ascontiguousarray(img, dtype=np.float64), cell)


def lbp_codes(img: np.ndarray, points: int, radius: float) -> np.ndarray:
    """LBP code of every pixel at least ``ceil(radius)`` from the border.

    Bit ``p`` is set when the bilinearly interpolated neighbour ``p`` is
    greater than or equal to the centre.
    """
    if USE_NUMBA:
        return lbp_codes_numba(img, points, radius)
    return lbp_codes_numpy(img, points, radius)


def hog_cells(img: np.ndarray, cell: int) -> np.ndarray:
    """Per-cell unsigned-orientation histograms, shape (rows, cols, 9).

    Bins are 20 degrees wide and centred on 0, 20, ..., 160; each pixel adds
    its gradient magnitude to one bin (no interpolation). An angle exactly on
    a bin edge, such as the 90 degrees of a purely vertical gradient, splits
    its magnitude evenly between the two bins, which keeps the histogram
    exactly equivariant under horizontal mirroring.
    """
    if USE_NUMBA:
        return hog_cells_numba(img, cell)
    return hog_cells_numpy(img, cell)
