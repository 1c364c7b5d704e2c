"""Uniform LBP histograms and the multi-scale LBP descriptor."""

from __future__ import annotations

import numpy as np

from ._kernels import lbp_codes, n_bins, uniform_lut

MSLBP_SIZE = (64, 64)
# 3x3 overlapping regions over the 62x62 LBP(8,1) code map: 30 px wide, 14 px overlap.
MSLBP_REGION = 30
MSLBP_STARTS = (0, 16, 32)
MSLBP_LENGTH = 9 * 59 + 59 + 243


def _as_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    return img


def code_histogram(codes: np.ndarray, points: int) -> np.ndarray:
    """Normalised uniform-pattern histogram of a code map."""
    hist = np.bincount(uniform_lut(points)[codes].ravel(), minlength=n_bins(points))
    return hist / hist.sum()


def lbp_histogram(image, points: int = 8, radius: float = 1.0) -> np.ndarray:
    """Uniform, non-rotation-invariant LBP histogram (59 bins for P=8).

    Raises:
        ValueError: the image has no interior pixel for the given radius.
    """
    img = _as_gray(image)
    margin = int(np.ceil(radius))
    if min(img.shape) < 2 * margin + 1:
        raise ValueError(f"image {img.shape} too small for LBP radius {radius}; "
                         f"need at least {2 * margin + 1}x{2 * margin + 1}")
    return code_histogram(lbp_codes(img, points, radius), points)


def multiscale_lbp(image) -> np.ndarray:
    """833-dim multi-scale LBP of a 64x64 crop.

    Nine regional LBP(8,1) histograms, then global LBP(8,2) and LBP(16,2).
    """
    img = _as_gray(image)
    if img.shape != MSLBP_SIZE:
        raise ValueError(f"multi-scale LBP expects a 64x64 image, got {img.shape[0]}x{img.shape[1]}")
    codes = lbp_codes(img, 8, 1.0)
    parts = [code_histogram(codes[y:y + MSLBP_REGION, x:x + MSLBP_REGION], 8)
             for y in MSLBP_STARTS for x in MSLBP_STARTS]
    parts.append(lbp_histogram(img, 8, 2.0))
    parts.append(lbp_histogram(img, 16, 2.0))
    return np.concatenate(parts)
