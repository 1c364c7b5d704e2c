"""Evaluation protocols: k-fold intra-database, cross/unseen attack, and
predefined train/test splits.

Every run writes ``runs/<protocol>/<fold>/{checkpoint,scores.jsonl,metrics.json}``
under its output directory when one is given.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import trainer
from .datamodel import (ATTACKS, Attack, DatasetManifest, ScoreQuadruple, class_composition,
                        load_manifest, split_by_fold, split_validation)
from .evalmetrics import (FoldScores, MetricsReport, ScoredSample, Threshold, evaluate_protocol,
                          fit_threshold, fold_metrics, render_attack_table)
from .features import extract_manifest, save_svm, train_svm
from .features.svm import SvmModel
from .mixnet import (BackboneSpec, IndependentEnsemble, MixNetConfig, build, build_vanilla,
                     save_checkpoint)

log = logging.getLogger(__name__)

PROTOCOL_NAMES = ("intra_database", "cross_unseen", "predefined_split")
SCENARIOS = ("seen", "cross", "unseen")
DEFAULT_SCENARIO_TAGS = {"genuine": "seen", "silicone": "cross", "paper": "unseen",
                         "half": "unseen", "transparent": "unseen", "mannequin": "unseen"}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    train_manifests: tuple[str, ...] = ()
    test_manifests: tuple[str, ...] = ()
    fold_count: int = 3
    threshold_source: str = "train_fold_eer"
    scenario_tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PROTOCOL_NAMES:
            raise ProtocolError(f"unknown protocol {self.name!r}; choose from {PROTOCOL_NAMES}")
        if self.threshold_source not in ("train_fold_eer", "dev_split_eer"):
            raise ProtocolError(f"unknown threshold source {self.threshold_source!r}")
        if self.fold_count < 1:
            raise ProtocolError("fold_count must be positive")
        bad = {k: v for k, v in self.scenario_tags.items() if v not in SCENARIOS}
        if bad:
            raise ProtocolError(f"scenario tags must be one of {SCENARIOS}: {bad}")

    @classmethod
    def from_json(cls, d: dict) -> "ProtocolSpec":
        return cls(d["name"], tuple(d.get("train_manifests", ())), tuple(d.get("test_manifests", ())),
                   int(d.get("fold_count", 3)), d.get("threshold_source", "train_fold_eer"),
                   dict(d.get("scenario_tags", {})))

    def to_json(self) -> dict:
        return {"name": self.name, "train_manifests": list(self.train_manifests),
                "test_manifests": list(self.test_manifests), "fold_count": self.fold_count,
                "threshold_source": self.threshold_source, "scenario_tags": dict(self.scenario_tags)}


def load_protocol(path: str | os.PathLike) -> ProtocolSpec:
    """Read a protocol file; relative manifest paths resolve against its directory."""
    path = Path(path)
    d = json.loads(path.read_text())
    for key in ("train_manifests", "test_manifests"):
        d[key] = [str(path.parent / p) for p in d.get(key, [])]
    return ProtocolSpec.from_json(d)


def load_manifests(paths: Sequence[str]) -> DatasetManifest:
    """Concatenate manifests; records keep their own image roots via absolute paths."""
    parts = [load_manifest(p) for p in paths]
    if len(parts) == 1:
        return parts[0]
    records = []
    for m in parts:
        root = Path(m.root or ".")
        for r in m.records:
            records.append(replace(r, media_path=str((root / r.media_path).resolve())))
    return DatasetManifest("+".join(m.name for m in parts), max(m.fold_count for m in parts),
                           records, parts[0].granularity)


# -- pipelines ----------------------------------------------------------------

class HandcraftedPipeline:
    """Handcrafted descriptor + RBF SVM, exposed through the same train/score
    interface as the networks."""

    def __init__(self, descriptor_id: str = "lbp59+hog324", grid: dict | None = None):
        self.descriptor_id = descriptor_id
        self.grid = grid
        self.model: SvmModel | None = None

    def fit(self, manifest: DatasetManifest, seed: int = 0) -> None:
        x = extract_manifest(manifest, self.descriptor_id)
        y = [int(r.attack_class.is_attack) for r in manifest.records]
        self.model = train_svm(list(_vectors(x, self.descriptor_id)), y, self.grid, seed)

    def score_manifest(self, manifest: DatasetManifest) -> list[ScoreQuadruple]:
        if self.model is None:
            raise RuntimeError("pipeline has not been fitted")
        s = self.model.scores(extract_manifest(manifest, self.descriptor_id))
        return [ScoreQuadruple(0.0, 0.0, None, float(v)) for v in s]


def _vectors(x, descriptor_id):
    from .features import FeatureVector
    for row in x:
        yield FeatureVector(row, descriptor_id)


ModelFactory = Callable[[DatasetManifest, int], object]


def present_attacks(manifest: DatasetManifest) -> list[str]:
    values = manifest.attack_values()
    return [a.value for a in ATTACKS if a in values]


def mixnet_factory(backbone: BackboneSpec | None = None, alphas=None,
                   fusion: str = "trainable") -> ModelFactory:
    """Build a MixNet with one branch per attack class in the training manifest
    (two branches when it has no masks)."""
    def make(manifest: DatasetManifest, seed: int):
        cfg = MixNetConfig.for_attacks(present_attacks(manifest), backbone, alphas, fusion)
        return build(cfg, seed)
    return make


def vanilla_factory(backbone: BackboneSpec | None = None) -> ModelFactory:
    return lambda manifest, seed: build_vanilla(backbone or BackboneSpec(), seed)


def independent_factory(backbone: BackboneSpec | None = None, combine: str = "max") -> ModelFactory:
    def make(manifest: DatasetManifest, seed: int):
        import torch
        torch.manual_seed(seed)
        return IndependentEnsemble({a: backbone or BackboneSpec()
                                    for a in present_attacks(manifest)}, combine)
    return make


def svm_factory(descriptor_id: str = "lbp59+hog324", grid: dict | None = None) -> ModelFactory:
    return lambda manifest, seed: HandcraftedPipeline(descriptor_id, grid)


def _fit(model, manifest, config, fold_dir: Path | None) -> set[str]:
    """Train ``model`` in place; returns the ids that appeared in training batches."""
    if isinstance(model, HandcraftedPipeline):
        model.fit(manifest, config.seed)
        if fold_dir:
            save_svm(model.model, fold_dir / "checkpoint")
        return {r.sample_id for r in manifest.records}
    ckpt = fold_dir / "checkpoint" if fold_dir else None
    logp = fold_dir / "train_log.jsonl" if fold_dir else None
    return trainer.fit(model, manifest, config, ckpt, logp).seen_ids()


def score(model, manifest: DatasetManifest) -> list[ScoreQuadruple]:
    if isinstance(model, HandcraftedPipeline):
        return model.score_manifest(manifest)
    return trainer.score_manifest(model, manifest)


# -- score files ----------------------------------------------------------------

def write_scores(path: str | os.PathLike, manifest: DatasetManifest, quads) -> None:
    """JSON Lines: sample_id, the four scores (mask omitted for 2-branch), truth, attack_class."""
    with open(path, "w") as fh:
        for r, q in zip(manifest.records, quads):
            row = {"sample_id": r.sample_id, "print_score": q.print_score,
                   "replay_score": q.replay_score, "final_score": q.final_score,
                   "truth": int(r.attack_class.is_attack), "attack_class": str(r.attack_class)}
            if q.mask_score is not None:
                row["mask_score"] = q.mask_score
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_scores(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=float) + "\n")


def video_mean(manifest: DatasetManifest, samples: Sequence[ScoredSample]) -> list[ScoredSample]:
    """Collapse frame scores to one mean score per video (off by default)."""
    groups: dict[tuple, list] = {}
    for r, s in zip(manifest.records, samples):
        groups.setdefault(r.video_key, []).append(s)
    return [ScoredSample("/".join(k), float(np.mean([s.final_score for s in v])), v[0].truth,
                         v[0].attack_class) for k, v in groups.items()]


# -- intra-database -------------------------------------------------------------

@dataclass
class IntraResult:
    models: list
    thresholds: list[Threshold]
    report: MetricsReport
    fold_scores: list[FoldScores]
    test_manifests: list[DatasetManifest]


def _fold_dir(out_dir, protocol: str, fold) -> Path | None:
    if out_dir is None:
        return None
    d = Path(out_dir) / "runs" / protocol / str(fold)
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_intra(manifest: DatasetManifest, model_factory: ModelFactory,
              train_config: trainer.TrainConfig, out_dir=None, protocol: str = "intra",
              aggregate: str = "frame") -> IntraResult:
    """Train on k-1 folds and test on the remaining one, k times.

    Each fold's threshold is the EER threshold of the model's own training
    scores. Raises if a test sample ever appears in a training batch.
    """
    if aggregate not in ("frame", "video"):
        raise ValueError("aggregate must be 'frame' or 'video'")
    folds = sorted({r.fold for r in manifest.records if r.fold is not None})
    if len(folds) < 2 or any(r.fold is None for r in manifest.records):
        raise ProtocolError("intra-database protocol needs every record assigned to one of >= 2 folds")
    models, thresholds, fold_scores, tests = [], [], [], []
    for k in folds:
        train, test = split_by_fold(manifest, k)
        log.info("fold %d composition: train %s test %s", k,
                 class_composition(train), class_composition(test))
        fold_dir = _fold_dir(out_dir, protocol, k)
        model = model_factory(train, train_config.seed + k)
        seen = _fit(model, train, train_config, fold_dir)
        leaked = seen.intersection(r.sample_id for r in test.records)
        if leaked:
            raise ProtocolError(f"fold {k}: test sample {sorted(leaked)[0]!r} used in training")
        fit_s = trainer.scored_samples(train, score(model, train))
        test_q = score(model, test)
        test_s = trainer.scored_samples(test, test_q)
        if aggregate == "video":
            fit_s, test_s = video_mean(train, fit_s), video_mean(test, test_s)
        thr = fit_threshold(fit_s, "train")
        fs = FoldScores(fit_s, test_s, thr)
        if fold_dir:
            write_scores(fold_dir / "scores.jsonl", test, test_q)
            _dump(fold_dir / "metrics.json", fold_metrics(k, fs, thr).__dict__)
        models.append(model)
        thresholds.append(thr)
        fold_scores.append(fs)
        tests.append(test)
    report = evaluate_protocol(fold_scores, "train_fold_eer")
    if out_dir is not None:
        (Path(out_dir) / "runs" / protocol / "metrics.json").write_text(report.to_json() + "\n")
    return IntraResult(models, thresholds, report, fold_scores, tests)


# -- cross / unseen ---------------------------------------------------------------

def run_cross_unseen(intra: IntraResult, unseen_manifest: DatasetManifest,
                     scenario_tags: Mapping[str, str] | None = None, out_dir=None,
                     protocol: str = "cross-unseen") -> MetricsReport:
    """Evaluate the intra-trained models on held-out attack subtypes.

    No training happens here. Each model keeps its own training-fold
    threshold, and the report averages the per-model metrics.
    """
    tags = dict(DEFAULT_SCENARIO_TAGS if scenario_tags is None else scenario_tags)
    keys = {r.attack_class.key for r in unseen_manifest.records}
    missing = sorted(keys - set(tags))
    if missing:
        raise ProtocolError(f"no scenario tag for {missing}")
    if not unseen_manifest.records:
        raise ProtocolError("unseen manifest is empty")
    folds = []
    for i, (model, thr) in enumerate(zip(intra.models, intra.thresholds)):
        q = score(model, unseen_manifest)
        samples = trainer.scored_samples(unseen_manifest, q)
        folds.append(FoldScores([], samples, thr))
        fold_dir = _fold_dir(out_dir, protocol, i)
        if fold_dir:
            write_scores(fold_dir / "scores.jsonl", unseen_manifest, q)
            _dump(fold_dir / "metrics.json", fold_metrics(i, folds[-1], thr).__dict__)
    report = evaluate_protocol(folds, "train_fold_eer")
    report.scenario_tags = {k: tags[k] for k in sorted(keys)}
    if out_dir is not None:
        (Path(out_dir) / "runs" / protocol / "metrics.json").write_text(report.to_json() + "\n")
    return report


# -- predefined split ---------------------------------------------------------------

def check_subject_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    def subjects(m):
        return {r.subject_id or "/".join(r.video_key) for r in m.records}
    common = subjects(train) & subjects(test)
    if common:
        raise ProtocolError(f"train and test share {len(common)} subject(s), "
                            f"e.g. {sorted(common)[0]!r}")


def run_predefined(train: DatasetManifest, test: DatasetManifest, model_factory: ModelFactory,
                   train_config: trainer.TrainConfig, metric: str = "hter",
                   dev_fraction: float = 0.2, out_dir=None,
                   protocol: str = "predefined") -> MetricsReport:
    """One train/test run on a published split.

    ``metric="hter"`` trains on all but a held-out development split of the
    training videos and fixes the threshold at the development EER.
    ``metric="eer"`` trains on all training data and reports the test EER.
    """
    if metric not in ("hter", "eer"):
        raise ValueError(f"metric must be 'hter' or 'eer', got {metric!r}")
    check_subject_disjoint(train, test)
    fold_dir = _fold_dir(out_dir, protocol, 0)
    if metric == "hter":
        fit_on, dev = split_validation(train, dev_fraction, train_config.seed)
    else:
        fit_on, dev = train, train
    model = model_factory(fit_on, train_config.seed)
    seen = _fit(model, fit_on, train_config, fold_dir)
    if seen.intersection(r.sample_id for r in test.records):
        raise ProtocolError("test sample used in training")
    thr = fit_threshold(trainer.scored_samples(dev, score(model, dev)),
                        "dev" if metric == "hter" else "train")
    q = score(model, test)
    fs = FoldScores([], trainer.scored_samples(test, q), thr)
    report = evaluate_protocol([fs], "dev_split_eer" if metric == "hter" else "train_fold_eer")
    if fold_dir:
        write_scores(fold_dir / "scores.jsonl", test, q)
        _dump(fold_dir / "metrics.json", fold_metrics(0, fs, thr).__dict__)
        (fold_dir.parent / "metrics.json").write_text(report.to_json() + "\n")
    return report


# -- ablation -----------------------------------------------------------------------

@dataclass
class AblationResult:
    reports: dict[str, MetricsReport]
    table: str
    mixnet_wins: int
    attacks: list[str]

    @property
    def flagged(self) -> bool:
        """MixNet beat or tied independent-max on fewer than two attacks."""
        return self.mixnet_wins < min(2, len(self.attacks))


def run_ablation(manifest: DatasetManifest, train_config: trainer.TrainConfig,
                 backbone: BackboneSpec | None = None, out_dir=None,
                 mixnet_result: IntraResult | None = None,
                 alphas=None) -> tuple[AblationResult, IntraResult, IntraResult]:
    """Joint MixNet against independently trained specialists, combined by
    max and by average, under the same folds.

    Each pipeline's threshold comes from its own scores on the same training
    folds. A finished MixNet intra run may be passed in to avoid retraining.
    """
    if len(present_attacks(manifest)) < 2:
        raise ProtocolError("ablation needs at least two attack classes")
    if mixnet_result is None:
        mixnet_result = run_intra(manifest, mixnet_factory(backbone, alphas), train_config,
                                  out_dir, "ablate-mixnet")
    indep = run_intra(manifest, independent_factory(backbone, "max"), train_config, out_dir,
                      "ablate-independent-max")
    avg_folds = []
    for model, test in zip(indep.models, indep.test_manifests):
        avg = model.with_combine("average")
        train, _ = split_by_fold(manifest, test.records[0].fold)
        fit_s = trainer.scored_samples(train, score(avg, train))
        test_s = trainer.scored_samples(test, score(avg, test))
        avg_folds.append(FoldScores(fit_s, test_s, fit_threshold(fit_s, "train")))
    reports = {"mixnet": mixnet_result.report, "independent-max": indep.report,
               "independent-average": evaluate_protocol(avg_folds, "train_fold_eer",
                                                        by_subtype=False)}
    attacks = present_attacks(manifest)
    for r in reports.values():
        r.attack_wise_apcer = _by_class(r, attacks)
    wins = sum(reports["mixnet"].attack_wise_apcer[a] <= reports["independent-max"].attack_wise_apcer[a]
               for a in attacks)
    table = render_attack_table(reports, attacks)
    result = AblationResult(reports, table, wins, attacks)
    if out_dir is not None:
        d = Path(out_dir) / "runs" / "ablate"
        d.mkdir(parents=True, exist_ok=True)
        (d / "table.txt").write_text(table)
        _dump(d / "metrics.json", {k: v.to_dict() for k, v in reports.items()})
    return result, mixnet_result, indep


def _by_class(report: MetricsReport, attacks) -> dict[str, float]:
    """Attack-wise APCER keyed by attack class (mask subtypes folded into mask)."""
    out = {}
    for a in attacks:
        vals = []
        for f in report.folds:
            sub = [v for k, v in f.attack_wise_apcer.items()
                   if k == a or (a == Attack.MASK.value and k in DEFAULT_SCENARIO_TAGS)]
            if sub:
                vals.append(float(np.mean(sub)))
        out[a] = float(np.mean(vals)) if vals else float("nan")
    return out
