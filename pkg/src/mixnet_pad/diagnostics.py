"""Class activation maps, the 3D branch-score scatter and ROC figures.

Figures are written as PNG and SVG with timestamps and random ids stripped,
so reruns produce identical files.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import Attack, ScoreQuadruple
from .mixnet import MixNetModel, _as_tensor, _prep

SCATTER_HEADER = ("sample_id", "print_score", "replay_score", "mask_score", "class")
CLASS_COLORS = {"genuine": "#1b9e77", "print": "#d95f02", "replay": "#7570b3", "mask": "#e7298a"}


@dataclass(frozen=True)
class ActivationMap:
    values: np.ndarray
    branch: str
    source_sample: str | None = None

    def mass_fraction(self, region: tuple[slice, slice]) -> float:
        """Share of the total map mass that falls inside ``region``."""
        total = float(self.values.sum())
        return float(self.values[region].sum()) / total if total > 0 else 0.0


def cam_from_features(maps, weights, out_size: tuple[int, int]) -> np.ndarray:
    """Weighted feature-map sum, rectified, bilinearly upsampled and
    min-max normalised to [0, 1] (all zeros if the map is constant)."""
    maps = torch.as_tensor(maps, dtype=torch.float64)
    w = torch.as_tensor(weights, dtype=torch.float64)
    if maps.dim() != 3 or w.shape != (maps.shape[0],):
        raise ValueError(f"need (C, h, w) maps and C weights, got {tuple(maps.shape)}, {tuple(w.shape)}")
    m = torch.relu(torch.einsum("c,chw->hw", w, maps))
    up = F.interpolate(m[None, None], size=tuple(out_size), mode="bilinear", align_corners=False)[0, 0]
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.zeros(tuple(out_size))
    return ((up - lo) / (hi - lo)).numpy()


@torch.no_grad()
def cam(model: MixNetModel, image, branch: str, use_attack_class: bool = True,
        sample_id: str | None = None) -> ActivationMap:
    """CAM of one branch for one image (CHW or 1xCHW, values in [0, 1]).

    The attack-class row of the branch head weights the final feature maps;
    ``use_attack_class=False`` uses the genuine-class row instead.
    """
    if branch not in model.branches:
        raise KeyError(f"model has no {branch!r} branch; branches: {list(model.branches)}")
    x = _as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image, model)
    if x.dim() == 3:
        x = x[None]
    x = _prep(x, model.input_size)
    br = model.branches[branch]
    was = br.training
    br.eval()
    try:
        _, maps = br(x, return_maps=True)
    finally:
        br.train(was)
    w = br.head.weight[1 if use_attack_class else 0]
    return ActivationMap(cam_from_features(maps[0], w, x.shape[-2:]), branch, sample_id)


# -- score scatter --------------------------------------------------------------

def _class_name(attack_class) -> str:
    value = getattr(attack_class, "value", attack_class)
    name = Attack(value).value
    return name


def score_scatter_export(rows: Sequence[tuple[str, ScoreQuadruple, object]], csv_path,
                         figure_stem=None, seed: int = 0) -> Path:
    """Write the branch-score table and optionally a 3D scatter (PNG + SVG).

    ``rows`` holds (sample_id, quadruple, class) where class is an attack
    class or its name; mask subtypes are reported as ``mask``.
    """
    table = []
    for sid, q, cls in rows:
        if q.mask_score is None:
            raise ValueError("3D scatter needs three branch scores; this is a 2-branch model, "
                             "plot print_score against replay_score instead")
        table.append((sid, q.print_score, q.replay_score, q.mask_score, _class_name(cls)))
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for sid, p, r, m, c in table:
            w.writerow([sid, repr(float(p)), repr(float(r)), repr(float(m)), c])
    if figure_stem is not None:
        _scatter_figure(table, Path(figure_stem), seed)
    return csv_path


def read_scatter(path) -> list[tuple[str, float, float, float, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SCATTER_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(r[0], float(r[1]), float(r[2]), float(r[3]), r[4]) for r in reader]


def class_centroids(table) -> dict[str, np.ndarray]:
    groups: dict[str, list] = {}
    for _, p, r, m, c in table:
        groups.setdefault(c, []).append((p, r, m))
    return {c: np.mean(v, axis=0) for c, v in groups.items()}


# -- figures ----------------------------------------------------------------------

def _pyplot(seed: int):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = f"mixnet-pad-{seed}"
    matplotlib.rcParams["path.simplify"] = False
    return plt


def _save(fig, stem: Path) -> list[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    png, svg = stem.with_suffix(".png"), stem.with_suffix(".svg")
    fig.savefig(png, dpi=100, metadata={"Software": None})
    fig.savefig(svg, metadata={"Date": None, "Creator": None})
    return [png, svg]


def _scatter_figure(table, stem: Path, seed: int) -> list[Path]:
    plt = _pyplot(seed)
    fig = plt.figure(figsize=(6, 5))
    ax = fig.add_subplot(projection="3d")
    for cls, color in CLASS_COLORS.items():
        pts = np.array([t[1:4] for t in table if t[4] == cls], dtype=float).reshape(-1, 3)
        if len(pts):
            ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=6, c=color, label=cls, depthshade=False)
    ax.set_xlabel("print score")
    ax.set_ylabel("replay score")
    ax.set_zlabel("mask score")
    for setter in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
        setter(0, 1)
    ax.view_init(elev=20, azim=-60)
    ax.legend(loc="upper left")
    try:
        return _save(fig, stem)
    finally:
        plt.close(fig)


def roc_figure(series: Mapping[str, Sequence[tuple[float, float]]], seed: int = 0):
    """Matplotlib figure with one ROC curve per labelled series of (FPR, TPR) points."""
    if not series:
        raise ValueError("roc_plot needs at least one series")
    plt = _pyplot(seed)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, pts in series.items():
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        ax.plot(pts[:, 0], pts[:, 1], label=label, linewidth=1.5, marker=".", markersize=3)
    ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=1, label="_chance")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("False positive rate (BPCER)")
    ax.set_ylabel("True positive rate (1 - APCER)")
    ax.legend(loc="lower right")
    return fig


def roc_plot(series: Mapping[str, Sequence[tuple[float, float]]], out_stem, seed: int = 0) -> list[Path]:
    """Write the ROC figure as PNG and SVG."""
    fig = roc_figure(series, seed)
    try:
        return _save(fig, Path(out_stem))
    finally:
        fig.clf()
        _pyplot(seed).close(fig)


def write_cam_png(amap: ActivationMap, path: str | os.PathLike, image=None) -> Path:
    """Heatmap (optionally over the grayscale image) as a PNG."""
    from PIL import Image

    heat = (np.clip(amap.values, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([heat, np.zeros_like(heat), 255 - heat], axis=-1)
    if image is not None:
        g = np.asarray(image, dtype=np.float64)
        if g.ndim == 3:
            g = g.mean(axis=0 if g.shape[0] in (1, 3) else -1)
        g = (np.clip(g, 0, 1) * 255)[..., None]
        rgb = (0.5 * rgb + 0.5 * g).astype(np.uint8)
    Image.fromarray(rgb).save(path)
    return Path(path)
