"""Sample, label and manifest types shared across the toolkit.

Manifests are JSON Lines files with one :class:`SampleRecord` per line.
Optional fields are omitted rather than written as ``null`` and keys are
sorted, so ``save -> load -> save`` is byte-identical. Manifest-level
attributes (name, fold count, granularity) live in a ``<path>.meta.json``
sidecar; when it is missing they are inferred from the records.
"""

from __future__ import annotations

import enum
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ManifestError(ValueError):
    """Malformed manifest line or violated manifest invariant."""


class Attack(str, enum.Enum):
    GENUINE = "genuine"
    PRINT = "print"
    REPLAY = "replay"
    MASK = "mask"


class MaskSubtype(str, enum.Enum):
    SILICONE = "silicone"
    PAPER = "paper"
    HALF = "half"
    TRANSPARENT = "transparent"
    MANNEQUIN = "mannequin"


ATTACKS = (Attack.PRINT, Attack.REPLAY, Attack.MASK)


@dataclass(frozen=True, order=True)
class AttackClass:
    value: Attack
    mask_subtype: MaskSubtype | None = None

    def __post_init__(self):
        object.__setattr__(self, "value", Attack(self.value))
        if self.mask_subtype is not None:
            object.__setattr__(self, "mask_subtype", MaskSubtype(self.mask_subtype))
            if self.value is not Attack.MASK:
                raise ValueError(f"mask_subtype given for non-mask class {self.value.value!r}")

    @classmethod
    def parse(cls, text: str) -> "AttackClass":
        """Parse ``"print"`` or ``"mask:silicone"``."""
        value, _, subtype = text.partition(":")
        return cls(Attack(value), MaskSubtype(subtype) if subtype else None)

    @property
    def is_attack(self) -> bool:
        return self.value is not Attack.GENUINE

    @property
    def key(self) -> str:
        """Finest-grained name: the mask subtype when present, else the class."""
        return self.mask_subtype.value if self.mask_subtype else self.value.value

    def __str__(self) -> str:
        if self.mask_subtype is None:
            return self.value.value
        return f"{self.value.value}:{self.mask_subtype.value}"


GENUINE = AttackClass(Attack.GENUINE)


class LabelQuadruple(NamedTuple):
    print_label: int
    replay_label: int
    mask_label: int
    final_label: int

    def branch_label(self, attack: str) -> int:
        return getattr(self, f"{attack}_label")


class ScoreQuadruple(NamedTuple):
    """Branch confidences plus fused attack score; ``mask_score`` is None for 2-branch models."""

    print_score: float
    replay_score: float
    mask_score: float | None
    final_score: float

    def branch_score(self, attack: str) -> float | None:
        return getattr(self, f"{attack}_score")


_TABLE = {
    Attack.GENUINE: LabelQuadruple(0, 0, 0, 0),
    Attack.PRINT: LabelQuadruple(1, 0, 0, 1),
    Attack.REPLAY: LabelQuadruple(0, 1, 0, 1),
    Attack.MASK: LabelQuadruple(0, 0, 1, 1),
}


def label_for(attack_class: AttackClass | Attack | str) -> LabelQuadruple:
    """Training targets for one sample. All mask subtypes share the mask row."""
    if isinstance(attack_class, AttackClass):
        return _TABLE[attack_class.value]
    if isinstance(attack_class, str) and ":" in attack_class:
        return _TABLE[AttackClass.parse(attack_class).value]
    return _TABLE[Attack(attack_class)]


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    media_path: str
    attack_class: AttackClass
    source_dataset: str
    frame_index: int | None = None
    subject_id: str | None = None
    fold: int | None = None

    @property
    def video_key(self) -> tuple[str, str]:
        """Identity of the video this record belongs to."""
        return (self.source_dataset, self.media_path)

    def image_path(self, root: str | os.PathLike | None = None) -> Path:
        """Resolve the image file: ``media_path`` itself if it names an image,
        else ``<media_path>_<frame_index:03d>.png``."""
        path = self.media_path
        if self.frame_index is not None and not path.lower().endswith(IMAGE_SUFFIXES):
            path = f"{path}_{self.frame_index:03d}.png"
        p = Path(path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return p

    def to_json(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "media_path": self.media_path,
            "attack_class": self.attack_class.value.value,
            "source_dataset": self.source_dataset,
        }
        if self.attack_class.mask_subtype is not None:
            d["mask_subtype"] = self.attack_class.mask_subtype.value
        if self.frame_index is not None:
            d["frame_index"] = self.frame_index
        if self.subject_id is not None:
            d["subject_id"] = self.subject_id
        if self.fold is not None:
            d["fold"] = self.fold
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        allowed = {"sample_id", "media_path", "frame_index", "attack_class", "mask_subtype",
                   "source_dataset", "subject_id", "fold"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown field(s) {sorted(unknown)}")
        for name in ("sample_id", "media_path", "attack_class", "source_dataset"):
            if name not in d:
                raise ValueError(f"missing field {name!r}")
        frame_index = d.get("frame_index")
        if frame_index is not None and (not isinstance(frame_index, int) or frame_index < 0):
            raise ValueError(f"frame_index must be a nonnegative integer, got {frame_index!r}")
        fold = d.get("fold")
        if fold is not None and (not isinstance(fold, int) or fold < 0):
            raise ValueError(f"fold must be a nonnegative integer, got {fold!r}")
        return cls(
            sample_id=str(d["sample_id"]),
            media_path=str(d["media_path"]),
            attack_class=AttackClass(Attack(d["attack_class"]), d.get("mask_subtype")),
            source_dataset=str(d["source_dataset"]),
            frame_index=frame_index,
            subject_id=d.get("subject_id"),
            fold=fold,
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    fold_count: int
    records: tuple[SampleRecord, ...]
    granularity: str = "frame"
    root: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate(self)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def with_records(self, records: Iterable[SampleRecord], **changes) -> "DatasetManifest":
        return replace(self, records=tuple(records), **changes)

    def subset(self, predicate) -> "DatasetManifest":
        return self.with_records(r for r in self.records if predicate(r))

    def attack_values(self) -> set[Attack]:
        return {r.attack_class.value for r in self.records}

    def videos(self) -> dict[tuple[str, str], list[SampleRecord]]:
        """Records grouped by video, in first-appearance order."""
        groups: dict[tuple[str, str], list[SampleRecord]] = {}
        for r in self.records:
            groups.setdefault(r.video_key, []).append(r)
        return groups


def validate(manifest: DatasetManifest) -> None:
    if manifest.fold_count < 1:
        raise ManifestError(f"fold_count must be positive, got {manifest.fold_count}")
    if manifest.granularity not in ("video", "frame"):
        raise ManifestError(f"granularity must be 'video' or 'frame', got {manifest.granularity!r}")
    seen = set()
    for r in manifest.records:
        if r.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
        seen.add(r.sample_id)
        if r.fold is not None and r.fold >= manifest.fold_count:
            raise ManifestError(
                f"sample {r.sample_id!r}: fold {r.fold} out of range for fold_count {manifest.fold_count}")
        if manifest.granularity == "frame" and r.frame_index is None:
            raise ManifestError(f"sample {r.sample_id!r}: frame manifest record lacks frame_index")


def dumps_records(records: Iterable[SampleRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True, separators=(", ", ": ")) + "\n"
                   for r in records)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_records(manifest.records))
    meta = {"name": manifest.name, "fold_count": manifest.fold_count,
            "granularity": manifest.granularity}
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a JSONL manifest (and its sidecar, if present).

    Raises:
        FileNotFoundError: ``path`` does not exist.
        ManifestError: a line fails to parse (message carries the line number)
            or a manifest invariant is violated.
    """
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_json(json.loads(line)))
            except (ValueError, TypeError, AttributeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from None
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
    else:
        folds = [r.fold for r in records if r.fold is not None]
        frame = bool(records) and all(r.frame_index is not None for r in records)
        meta = {"name": path.stem, "fold_count": max(folds) + 1 if folds else 1,
                "granularity": "frame" if frame or not records else "video"}
    return DatasetManifest(meta["name"], int(meta["fold_count"]), tuple(records),
                           meta["granularity"], root=str(path.parent))


def assign_folds(manifest: DatasetManifest, k: int, seed: int) -> DatasetManifest:
    """Stratified video-level fold assignment.

    Within each attack class the videos are shuffled with ``seed`` and dealt
    round-robin into ``k`` folds, so per-class fold sizes differ by at most one.
    Frame manifests are handled by grouping frames into videos first; every
    frame inherits its video's fold.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    videos = manifest.videos()
    by_class: dict[Attack, list[tuple[str, str]]] = defaultdict(list)
    for key, recs in videos.items():
        by_class[recs[0].attack_class.value].append(key)
    if by_class:
        smallest = min(by_class, key=lambda c: len(by_class[c]))
        if k > len(by_class[smallest]):
            raise ValueError(f"k={k} exceeds the {len(by_class[smallest])} video(s) of class "
                             f"{smallest.value!r}")
    rng = np.random.default_rng(seed)
    fold_of: dict[tuple[str, str], int] = {}
    for cls in sorted(by_class, key=lambda c: c.value):
        keys = sorted(by_class[cls])
        for i, j in enumerate(rng.permutation(len(keys))):
            fold_of[keys[j]] = i % k
    records = [replace(r, fold=fold_of[r.video_key]) for r in manifest.records]
    return manifest.with_records(records, fold_count=k)


def split_by_fold(manifest: DatasetManifest, fold: int) -> tuple[DatasetManifest, DatasetManifest]:
    """(train, test) where test is ``fold`` and train is every other fold."""
    if any(r.fold is None for r in manifest.records):
        raise ManifestError("manifest has records without fold assignment")
    train = manifest.subset(lambda r: r.fold != fold)
    test = manifest.subset(lambda r: r.fold == fold)
    return train, test


def split_validation(manifest: DatasetManifest, fraction: float, seed: int
                     ) -> tuple[DatasetManifest, DatasetManifest]:
    """Hold out ``fraction`` of each class's videos (at least one) as a validation split."""
    videos = manifest.videos()
    by_class: dict[Attack, list[tuple[str, str]]] = defaultdict(list)
    for key, recs in videos.items():
        by_class[recs[0].attack_class.value].append(key)
    rng = np.random.default_rng(seed)
    held = set()
    for cls in sorted(by_class, key=lambda c: c.value):
        keys = sorted(by_class[cls])
        n = max(1, int(round(fraction * len(keys))))
        if n >= len(keys):
            raise ValueError(f"class {cls.value!r} has too few videos ({len(keys)}) to hold out")
        held.update(keys[j] for j in rng.permutation(len(keys))[:n])
    train = manifest.subset(lambda r: r.video_key not in held)
    val = manifest.subset(lambda r: r.video_key in held)
    return train, val


def class_composition(manifest: DatasetManifest) -> dict[str, dict[str, int]]:
    """Per-class video and frame counts."""
    out: dict[str, dict[str, int]] = {}
    for recs in manifest.videos().values():
        c = out.setdefault(str(recs[0].attack_class), {"videos": 0, "frames": 0})
        c["videos"] += 1
        c["frames"] += len(recs)
    return dict(sorted(out.items()))
