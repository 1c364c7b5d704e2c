"""Procedural genuine/print/replay/mask face frames.

Every class shares a face-like base image; attacks add a class signature
whose amplitude is ``class_signature_strength``:

* print: halftone dot grid with a hard rectangular border, lower-centre region
* replay: horizontal banding and a specular highlight, lower-centre region
* mask: smoothed skin texture over the whole face plus hard-edged eye/mouth
  cut-outs

Frames of one video share pose jitter, illumination gain and skin texture,
so splitting folds by video is meaningful. Output is a pure function of the
:class:`SynthSpec`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .datamodel import (Attack, AttackClass, DatasetManifest, MaskSubtype, SampleRecord,
                        save_manifest)

TRAIN_CLASSES = (Attack.GENUINE, Attack.PRINT, Attack.REPLAY, Attack.MASK)
UNSEEN_SUBTYPES = (MaskSubtype.PAPER, MaskSubtype.HALF, MaskSubtype.TRANSPARENT,
                   MaskSubtype.MANNEQUIN)

_CLASS_CODE = {Attack.GENUINE: 0, Attack.PRINT: 1, Attack.REPLAY: 2, Attack.MASK: 3}
_SUBTYPE_CODE = {None: 0, MaskSubtype.SILICONE: 1, MaskSubtype.PAPER: 2, MaskSubtype.HALF: 3,
                 MaskSubtype.TRANSPARENT: 4, MaskSubtype.MANNEQUIN: 5}

# Mask texture parameters per subtype: (smooth fraction, cut-out depth, edge artifacts,
# lower-half only, brightness shift)
_MASK_STYLE = {
    MaskSubtype.SILICONE: (1.0, 1.0, 0.0, False, 0.2),
    MaskSubtype.PAPER: (0.9, 1.0, 1.0, False, 0.16),
    MaskSubtype.HALF: (1.0, 1.0, 0.0, True, 0.2),
    MaskSubtype.TRANSPARENT: (0.35, 0.3, 0.0, False, 0.05),
    MaskSubtype.MANNEQUIN: (1.0, 0.8, 0.0, False, 0.24),
}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    videos_per_class: int = 3
    frames_per_video: int = 4
    class_signature_strength: float = 1.0

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError(f"image_size must be at least 32x32, got {self.image_size}")
        if self.videos_per_class < 1 or self.frames_per_video < 1:
            raise ValueError("videos_per_class and frames_per_video must be positive")
        if not 0.0 < self.class_signature_strength <= 1.0:
            raise ValueError("class_signature_strength must lie in (0, 1]")


def signature_region(image_size: tuple[int, int]) -> tuple[slice, slice]:
    """Lower-centre (nose/mouth) box where print and replay signatures live."""
    h, w = image_size
    return slice(int(0.55 * h), int(0.85 * h)), slice(int(0.3 * w), int(0.7 * w))


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


class _Video:
    """Per-video appearance shared by all of its frames."""

    def __init__(self, rng: np.random.Generator, size: tuple[int, int]):
        h, w = size
        scale = h / 64.0
        self.dy, self.dx = rng.uniform(-1.0, 1.0, size=2) * scale
        self.gain = rng.uniform(0.97, 1.03)
        self.face_level = rng.uniform(0.4, 0.44)
        self.background = rng.uniform(0.23, 0.27) + 0.03 * np.linspace(-1, 1, w)[None, :] \
            * rng.uniform(-1, 1)
        self.fine = rng.normal(0, 0.03, size=size)
        self.smooth = gaussian_filter(rng.normal(0, 1, size=size), 2.5 * scale)
        self.smooth *= 0.04 / (self.smooth.std() + 1e-12)


def _render(video: _Video, cls: AttackClass, strength: float, size, rng) -> np.ndarray:
    h, w = size
    jy, jx = rng.uniform(-0.5, 0.5, size=2) * (h / 64.0)
    cy, cx = 0.5 * h + video.dy + jy, 0.5 * w + video.dx + jx
    face_r = _ellipse(h, w, cy, cx, 0.4 * h, 0.31 * w)
    face = np.clip((1.0 - face_r) * 2.5, 0.0, 1.0)
    eye_l = _ellipse(h, w, cy - 0.1 * h, cx - 0.12 * w, 0.04 * h, 0.06 * w)
    eye_r = _ellipse(h, w, cy - 0.1 * h, cx + 0.12 * w, 0.04 * h, 0.06 * w)
    mouth = _ellipse(h, w, cy + 0.2 * h, cx, 0.03 * h, 0.11 * w)
    soft = lambda r: np.exp(-2.0 * r)  # noqa: E731
    features = 0.25 * (soft(eye_l) + soft(eye_r) + soft(mouth))

    s = strength
    smooth_frac, cut_depth, edges, lower_only, bright = 0.0, 0.0, 0.0, False, 0.0
    if cls.value is Attack.MASK:
        smooth_frac, cut_depth, edges, lower_only, bright = \
            _MASK_STYLE[cls.mask_subtype or MaskSubtype.SILICONE]
    region = np.ones((h, w))
    if lower_only:
        region = np.clip((np.arange(h)[:, None] - cy) / (0.05 * h) + 0.5, 0, 1) * region
    mix = s * smooth_frac * region
    texture = (1 - mix) * video.fine + mix * video.smooth
    img = video.background + face * (video.face_level + texture - features + s * bright * region)

    if cls.value is Attack.MASK:
        cut = ((eye_l < 1.5) | (eye_r < 1.5) | (mouth < 1.5)).astype(float) * region
        img = img * (1 - 0.3 * s * cut_depth * cut)
        if edges:
            ring = ((face_r > 0.78) & (face_r < 0.92)).astype(float)
            img = img - s * edges * 0.25 * ring

    rs, cs = signature_region(size)
    if cls.value is Attack.PRINT:
        patch = img[rs, cs]
        yy, xx = np.mgrid[0:patch.shape[0], 0:patch.shape[1]]
        dots = ((yy % 4 - 1.5) ** 2 + (xx % 4 - 1.5) ** 2 <= 1.3).astype(float)
        patch = patch * (1 - 0.55 * s * dots)
        border = np.zeros(patch.shape, dtype=bool)
        border[:2, :] = border[-2:, :] = border[:, :2] = border[:, -2:] = True
        patch = np.where(border, patch + 0.35 * s, patch)
        img[rs, cs] = patch
    elif cls.value is Attack.REPLAY:
        patch = img[rs, cs]
        yy, xx = np.mgrid[0:patch.shape[0], 0:patch.shape[1]]
        bands = np.sin(2 * np.pi * yy / 3.0)
        ph, pw = patch.shape
        spec = np.exp(-(((yy - 0.4 * ph) / (0.25 * ph)) ** 2 + ((xx - 0.65 * pw) / (0.16 * pw)) ** 2))
        img[rs, cs] = patch + s * (0.3 * bands + 0.8 * spec)

    img = img * video.gain + rng.normal(0, 0.01, size=size)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _write_png(gray: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(np.repeat(gray[:, :, None], 3, axis=2)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _emit(spec: SynthSpec, out_dir, classes, source: str, name: str) -> DatasetManifest:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    records = []
    for cls in classes:
        token = cls.value.value
        if cls.mask_subtype not in (None, MaskSubtype.SILICONE):
            token = f"mask-{cls.mask_subtype.value}"
        code = [spec.seed, _CLASS_CODE[cls.value], _SUBTYPE_CODE[cls.mask_subtype]]
        for v in range(spec.videos_per_class):
            video = _Video(np.random.default_rng(code + [v, 0]), spec.image_size)
            media = f"{token}_{v:03d}"
            for f in range(spec.frames_per_video):
                rng = np.random.default_rng(code + [v, f + 1])
                gray = _render(video, cls, spec.class_signature_strength, spec.image_size, rng)
                _write_png(gray, out / f"{media}_{f:03d}.png")
                records.append(SampleRecord(
                    sample_id=f"s{spec.seed}-{media}_{f:03d}", media_path=media, attack_class=cls,
                    source_dataset=source, frame_index=f,
                    subject_id=f"s{spec.seed}-{token}-{v:03d}"))
    manifest = DatasetManifest(name, 1, tuple(records), "frame", root=str(out))
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def generate(spec: SynthSpec, out_dir: str | os.PathLike,
             classes=TRAIN_CLASSES) -> DatasetManifest:
    """Write frames and ``manifest.jsonl`` to ``out_dir``.

    Masks carry the silicone subtype. ``classes`` may drop attacks, e.g. to
    mimic a print/replay-only database.
    """
    acs = [AttackClass(Attack(c), MaskSubtype.SILICONE if Attack(c) is Attack.MASK else None)
           for c in classes]
    return _emit(spec, out_dir, acs, "synth", f"synth-{spec.seed}")


def generate_unseen_masks(spec: SynthSpec, out_dir: str | os.PathLike,
                          include_silicone: bool = False) -> DatasetManifest:
    """Genuine frames plus the four held-out mask subtypes (and optionally silicone).

    The silicone frames use the training mask signature; with a fresh seed they
    play the role of a cross-database sample of a seen attack.
    """
    acs = [AttackClass(Attack.GENUINE)]
    if include_silicone:
        acs.append(AttackClass(Attack.MASK, MaskSubtype.SILICONE))
    acs += [AttackClass(Attack.MASK, st) for st in UNSEEN_SUBTYPES]
    return _emit(spec, out_dir, acs, "synth-unseen", f"synth-unseen-{spec.seed}")


def class_mean_images(manifest: DatasetManifest, key=lambda r: r.attack_class.key
                      ) -> dict[str, np.ndarray]:
    from .imaging import load_gray

    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for r in manifest.records:
        k = key(r)
        img = load_gray(r.image_path(manifest.root))
        sums[k] = sums.get(k, 0) + img
        counts[k] = counts.get(k, 0) + 1
    return {k: sums[k] / counts[k] for k in sorted(sums)}


def nearest_centroid_accuracy(train: DatasetManifest, test: DatasetManifest) -> float:
    """Accuracy of a per-class mean-image nearest-centroid classifier.

    Calibrates how learnable the class signatures are; independent of any
    network code.
    """
    from .imaging import load_gray

    key = lambda r: r.attack_class.value.value  # noqa: E731
    centroids = class_mean_images(train, key)
    names = list(centroids)
    stack = np.stack([centroids[n].ravel() for n in names])
    correct = 0
    for r in test.records:
        x = load_gray(r.image_path(test.root)).ravel()
        pred = names[int(np.argmin(((stack - x) ** 2).sum(axis=1)))]
        correct += pred == key(r)
    return correct / len(test.records)
