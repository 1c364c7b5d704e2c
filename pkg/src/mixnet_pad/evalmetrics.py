"""ISO/IEC 30107-3 style error rates, ROC/EER and cross-fold aggregation.

Convention: a sample is classified as an attack when ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import AttackClass


class ThresholdLeakError(RuntimeError):
    """A threshold was fitted on samples that are also being tested."""


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    final_score: float
    truth: int
    attack_class: AttackClass | None = None

    def __post_init__(self):
        if not 0.0 <= self.final_score <= 1.0 or math.isnan(self.final_score):
            raise ValueError(f"score {self.final_score} of {self.sample_id!r} outside [0, 1]")
        if self.truth not in (0, 1):
            raise ValueError(f"truth must be 0 or 1, got {self.truth!r}")


def _split(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.final_score for s in samples], dtype=np.float64)
    truth = np.array([s.truth for s in samples], dtype=np.int64)
    return scores[truth == 1], scores[truth == 0]


def apcer(samples: Sequence[ScoredSample], threshold: float) -> float:
    """Fraction of attacks scored below ``threshold`` (accepted as bona fide)."""
    attacks, _ = _split(samples)
    if attacks.size == 0:
        raise ValueError("APCER needs at least one attack sample")
    return int(np.count_nonzero(attacks < threshold)) / attacks.size


def bpcer(samples: Sequence[ScoredSample], threshold: float) -> float:
    """Fraction of bona fide samples scored at or above ``threshold``."""
    _, genuine = _split(samples)
    if genuine.size == 0:
        raise ValueError("BPCER needs at least one bona fide sample")
    return int(np.count_nonzero(genuine >= threshold)) / genuine.size


def acer(apcer_value: float, bpcer_value: float) -> float:
    return (apcer_value + bpcer_value) / 2.0


@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray    # ascending, with -inf / +inf sentinels
    apcer: np.ndarray         # at each threshold
    bpcer: np.ndarray
    eer: float
    eer_threshold: float

    @property
    def points(self) -> list[tuple[float, float]]:
        """(FPR, TPR) from (0, 0) to (1, 1); FPR = BPCER, TPR = 1 - APCER."""
        return [(float(b), float(1.0 - a)) for a, b in zip(self.apcer[::-1], self.bpcer[::-1])]

    @property
    def auc(self) -> float:
        pts = np.array(self.points)
        return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def eer_from_curve(thresholds, a, b) -> tuple[float, float]:
    """EER and its threshold from APCER/BPCER sampled at ascending thresholds.

    The crossing is the first threshold where ``APCER - BPCER >= 0``. An exact
    crossing returns the shared value; otherwise the two operating points are
    joined linearly. The threshold is the midpoint of the interval of real
    thresholds that realise the crossing; infinite sentinels are replaced by
    ``min - 1`` / ``max + 1`` of the finite thresholds.
    """
    finite = [t for t in thresholds if math.isfinite(t)]
    lo_sub, hi_sub = finite[0] - 1.0, finite[-1] + 1.0

    def sub(t):
        if t == -math.inf:
            return lo_sub
        if t == math.inf:
            return hi_sub
        return t

    i = 0
    while a[i] - b[i] < 0:
        i += 1
    if a[i] - b[i] == 0:
        j = i
        while j + 1 < len(thresholds) and a[j + 1] - b[j + 1] == 0:
            j += 1
        return float(a[i]), (sub(thresholds[i - 1]) + sub(thresholds[j])) / 2.0
    d0 = a[i - 1] - b[i - 1]
    d1 = a[i] - b[i]
    lam = -d0 / (d1 - d0)
    eer = a[i - 1] + lam * (a[i] - a[i - 1])
    return float(eer), (sub(thresholds[i - 1]) + sub(thresholds[i])) / 2.0


def roc_and_eer(samples: Sequence[ScoredSample]) -> RocResult:
    """Sweep every distinct score (plus infinite sentinels) as a threshold.

    Raises:
        ValueError: only one class present.
    """
    attacks, genuine = _split(samples)
    if attacks.size == 0 or genuine.size == 0:
        raise ValueError("ROC/EER needs both attack and bona fide samples")
    distinct = np.unique(np.concatenate([attacks, genuine]))
    thresholds = np.concatenate([[-np.inf], distinct, [np.inf]])
    att_sorted = np.sort(attacks)
    gen_sorted = np.sort(genuine)
    # count of attacks strictly below t; genuine at or above t
    a = np.searchsorted(att_sorted, thresholds, side="left") / attacks.size
    b = (genuine.size - np.searchsorted(gen_sorted, thresholds, side="left")) / genuine.size
    eer, thr = eer_from_curve(list(thresholds), a, b)
    return RocResult(thresholds, a, b, eer, thr)


@dataclass(frozen=True)
class Threshold:
    """A decision threshold plus the ids of the samples it was fitted on."""

    value: float
    source: str
    fitted_on: frozenset[str] = field(repr=False)

    def check_disjoint(self, test_ids) -> None:
        leaked = self.fitted_on.intersection(test_ids)
        if leaked:
            raise ThresholdLeakError(
                f"threshold ({self.source}) was fitted on {len(leaked)} test sample(s), "
                f"e.g. {sorted(leaked)[0]!r}")


def fit_threshold(samples: Sequence[ScoredSample], source: str) -> Threshold:
    """EER threshold on training or development scores."""
    if source not in ("train", "dev"):
        raise ValueError(f"thresholds are fitted on 'train' or 'dev' scores, not {source!r}")
    return Threshold(roc_and_eer(samples).eer_threshold, source,
                     frozenset(s.sample_id for s in samples))


@dataclass
class FoldScores:
    """Scores of one fold: threshold-fitting set (train or dev) and test set."""

    fit: list[ScoredSample]
    test: list[ScoredSample]
    threshold: Threshold | None = None


@dataclass
class FoldMetrics:
    fold: int
    apcer: float
    bpcer: float
    acer: float
    threshold: float
    threshold_source: str
    test_eer: float | None
    attack_wise_apcer: dict[str, float]


@dataclass
class MeanStd:
    mean: float
    std: float

    @classmethod
    def of(cls, values) -> "MeanStd":
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"))
        return cls(float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0)


@dataclass
class MetricsReport:
    apcer: MeanStd
    bpcer: MeanStd
    acer: MeanStd
    eer_threshold: float
    roc: list[tuple[float, float]]
    attack_wise_apcer: dict[str, float]
    hter: float | None = None
    test_eer: MeanStd | None = None
    folds: list[FoldMetrics] = field(default_factory=list)
    scenario_tags: dict[str, str] | None = None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def attack_key(sample: ScoredSample, by_subtype: bool = True) -> str:
    if sample.attack_class is None:
        return "attack"
    return sample.attack_class.key if by_subtype else sample.attack_class.value.value


def _attack_wise(test, threshold, by_subtype) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for s in test:
        if s.truth == 1:
            groups.setdefault(attack_key(s, by_subtype), []).append(s.final_score)
    return {k: int(np.count_nonzero(np.array(v) < threshold)) / len(v)
            for k, v in sorted(groups.items())}


def fold_metrics(fold: int, scores: FoldScores, threshold: Threshold,
                 by_subtype: bool = True) -> FoldMetrics:
    threshold.check_disjoint(s.sample_id for s in scores.test)
    t = threshold.value
    ap, bp = apcer(scores.test, t), bpcer(scores.test, t)
    return FoldMetrics(fold, ap, bp, acer(ap, bp), t, threshold.source,
                       roc_and_eer(scores.test).eer,
                       _attack_wise(scores.test, t, by_subtype))


def evaluate_protocol(folds: Sequence[FoldScores], threshold_source: str = "train_fold_eer",
                      by_subtype: bool = True) -> MetricsReport:
    """Per-fold APCER/BPCER/ACER at a threshold fitted on each fold's fit set.

    ``threshold_source`` is ``train_fold_eer`` or ``dev_split_eer``; with the
    latter the report also carries HTER, the mean over folds of
    (FAR + FRR) / 2 on the test set. Standard deviations use ``ddof=1``.
    A precomputed ``FoldScores.threshold`` (e.g. from an earlier training
    run) takes precedence over refitting.
    """
    if threshold_source not in ("train_fold_eer", "dev_split_eer"):
        raise ValueError(f"unknown threshold source {threshold_source!r}")
    if not folds:
        raise ValueError("no folds to evaluate")
    source = "train" if threshold_source == "train_fold_eer" else "dev"
    rows = []
    for i, fs in enumerate(folds):
        if fs is None or not fs.test:
            raise ValueError(f"fold {i} has no test scores")
        thr = fs.threshold
        if thr is None:
            if not fs.fit:
                raise ValueError(f"fold {i} has no {source} scores to fit a threshold")
            thr = fit_threshold(fs.fit, source)
        rows.append(fold_metrics(i, fs, thr, by_subtype))
    keys = sorted({k for r in rows for k in r.attack_wise_apcer})
    attack_wise = {k: float(np.mean([r.attack_wise_apcer[k] for r in rows
                                     if k in r.attack_wise_apcer])) for k in keys}
    pooled = [s for fs in folds for s in fs.test]
    report = MetricsReport(
        apcer=MeanStd.of(r.apcer for r in rows),
        bpcer=MeanStd.of(r.bpcer for r in rows),
        acer=MeanStd.of(r.acer for r in rows),
        eer_threshold=float(np.mean([r.threshold for r in rows])),
        roc=roc_and_eer(pooled).points,
        attack_wise_apcer=attack_wise,
        test_eer=MeanStd.of(r.test_eer for r in rows),
        folds=rows,
    )
    if threshold_source == "dev_split_eer":
        report.hter = float(np.mean([r.acer for r in rows]))
    return report


def hter(far: float, frr: float) -> float:
    return (far + frr) / 2.0


def render_table(reports: dict[str, MetricsReport]) -> str:
    """Plain-text ACER/APCER/BPCER table, values in percent as mean +- std."""
    def fmt(m: MeanStd) -> str:
        return f"{100 * m.mean:6.2f} +- {100 * m.std:5.2f}"

    width = max([len("Architecture")] + [len(n) for n in reports])
    lines = [f"{'Architecture':<{width}} | {'ACER':^15} | {'APCER':^15} | {'BPCER':^15}",
             "-" * (width + 57)]
    for name, r in reports.items():
        lines.append(f"{name:<{width}} | {fmt(r.acer)} | {fmt(r.apcer)} | {fmt(r.bpcer)}")
    return "\n".join(lines) + "\n"


def render_attack_table(reports: dict[str, MetricsReport], keys: Sequence[str] | None = None) -> str:
    """Attack-wise APCER (%) with one column per attack or mask subtype."""
    if keys is None:
        keys = sorted({k for r in reports.values() for k in r.attack_wise_apcer})
    width = max([len("Architecture")] + [len(n) for n in reports])
    cols = [max(len(k), 7) for k in keys]
    head = f"{'Architecture':<{width}} | " + " | ".join(f"{k:^{c}}" for k, c in zip(keys, cols))
    lines = [head, "-" * len(head)]
    for name, r in reports.items():
        cells = []
        for k, c in zip(keys, cols):
            v = r.attack_wise_apcer.get(k)
            cells.append(f"{'-' if v is None else f'{100 * v:.2f}':>{c}}")
        lines.append(f"{name:<{width}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"
