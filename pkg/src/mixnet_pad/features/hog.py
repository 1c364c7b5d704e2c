"""HOG descriptor: 9 unsigned bins, 16x16 cells, 3x3-cell blocks, L2-Hys."""

from __future__ import annotations

import numpy as np

from ._kernels import HOG_BINS, hog_cells

HOG_SIZE = (64, 64)
CELL = 16
BLOCK = 3
HOG_LENGTH = HOG_BINS * BLOCK * BLOCK * 2 * 2
L2HYS_CLIP = 0.2
EPS = 1e-6


def l2_hys(v: np.ndarray, clip: float = L2HYS_CLIP, eps: float = EPS) -> np.ndarray:
    v = v / np.sqrt(np.sum(v * v) + eps * eps)
    v = np.minimum(v, clip)
    return v / np.sqrt(np.sum(v * v) + eps * eps)


def hog_features(image) -> np.ndarray:
    """324-dim HOG of a 64x64 grayscale crop.

    4x4 cells of 16 px give 2x2 block positions of 3x3 cells (stride one
    cell); blocks are emitted row-major with cells row-major inside.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != HOG_SIZE:
        raise ValueError(f"HOG expects a 64x64 image, got shape {img.shape}")
    cells = hog_cells(img, CELL)
    n = cells.shape[0] - BLOCK + 1
    blocks = [l2_hys(cells[by:by + BLOCK, bx:bx + BLOCK].ravel())
              for by in range(n) for bx in range(n)]
    return np.concatenate(blocks)


def mirror_permutation() -> np.ndarray:
    """Index map ``perm`` with ``hog(fliplr(img)) == hog(img)[perm]``.

    Mirroring swaps block and cell columns and sends the bin centred at
    ``20*b`` degrees to the one centred at ``180 - 20*b``.
    """
    n = HOG_SIZE[0] // CELL - BLOCK + 1
    idx = np.arange(HOG_LENGTH).reshape(n, n, BLOCK, BLOCK, HOG_BINS)
    idx = idx[:, ::-1, :, ::-1, :]
    idx = idx[..., (-np.arange(HOG_BINS)) % HOG_BINS]
    return idx.ravel()
