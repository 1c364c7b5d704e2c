"""SGD training loops: joint MixNet, vanilla fine-tuning, independent
specialists, and grid search over the loss coefficients."""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .datamodel import ATTACKS, Attack, DatasetManifest, label_for, split_validation
from .evalmetrics import ScoredSample, acer, apcer, bpcer, fit_threshold
from .imaging import load_batch
from .mixnet import (BackboneSpec, IndependentEnsemble, MixNetModel, VanillaNet, _ce,
                     breakdown, loss_terms, save_checkpoint)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    alphas: tuple[float, ...] | None = None
    momentum: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alphas is not None:
            object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list[dict] = field(default_factory=list)
    batch_log: list[list[str]] = field(default_factory=list)

    def seen_ids(self) -> set[str]:
        return {sid for batch in self.batch_log for sid in batch}


def _labels(manifest: DatasetManifest) -> np.ndarray:
    return np.asarray([label_for(r.attack_class) for r in manifest.records], dtype=np.int64)


def _loop(model, manifest, config: TrainConfig, step_loss, checkpoint_path=None, log_path=None,
          metadata=None) -> TrainResult:
    if len(manifest) == 0:
        raise TrainingError("cannot train on an empty manifest")
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    x = torch.from_numpy(load_batch(manifest))
    y = torch.from_numpy(_labels(manifest))
    ids = [r.sample_id for r in manifest.records]
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    result = TrainResult(model)
    log_fh = open(log_path, "w") if log_path else None
    model.train()
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(ids))
            sums: dict[str, float] = {}
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                result.batch_log.append([ids[i] for i in idx])
                terms = step_loss(model, x[idx], y[idx])
                total = terms["total"]
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch starting at {start}: "
                        + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()))
                opt.zero_grad()
                total.backward()
                opt.step()
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(idx)
            row = {"epoch": epoch, **breakdown({k: v / len(ids) for k, v in sums.items()}).as_dict(),
                   "learning_rate": config.learning_rate}
            result.log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path,
                                {**(metadata or {}), "epoch": epoch, "seed": config.seed})
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return result


def train_mixnet(model: MixNetModel, manifest: DatasetManifest, config: TrainConfig,
                 checkpoint_path=None, log_path=None) -> TrainResult:
    """Minimise the weighted four-term loss with plain SGD.

    ``config.alphas`` overrides the coefficients stored in the model config.
    Batch order is a function of ``(seed, epoch)``.
    """
    alphas = config.alphas or model.config.alphas
    if len(alphas) != len(model.branches) + 1:
        raise ValueError(f"{len(alphas)} alphas for a {len(model.branches)}-branch model")
    missing = {a.value for a in manifest.attack_values() if a is not Attack.GENUINE} \
        - set(model.branches)
    if missing:
        raise TrainingError(f"manifest has attack class(es) {sorted(missing)} with no branch")

    def step(m, xb, yb):
        return loss_terms(m(xb), yb, alphas)

    meta = {"alphas": list(alphas), "kind": "mixnet"}
    return _loop(model, manifest, config, step, checkpoint_path, log_path, meta)


def train_vanilla(model: VanillaNet, manifest: DatasetManifest, config: TrainConfig,
                  checkpoint_path=None, log_path=None) -> TrainResult:
    """Binary genuine/attack fine-tuning with the final cross-entropy only."""

    def step(m, xb, yb):
        loss = _ce(m(xb), yb[:, 3])
        return {"final": loss, "total": loss}

    return _loop(model, manifest, config, step, checkpoint_path, log_path, {"kind": "vanilla"})


def train_independent(backbones: Mapping[str, BackboneSpec] | IndependentEnsemble,
                      manifest: DatasetManifest, config: TrainConfig, combine: str = "max",
                      checkpoint_path=None) -> TrainResult:
    """Train one genuine-vs-attack specialist per entry of ``backbones``.

    Each specialist only sees genuine samples and samples of its own attack.
    Passing an existing ensemble trains it in place.
    """
    if isinstance(backbones, IndependentEnsemble):
        ensemble = backbones
    else:
        torch.manual_seed(config.seed)
        ensemble = IndependentEnsemble(backbones, combine)
    subsets = {}
    for name in ensemble.specialists:
        attack = Attack(name)
        sub = manifest.subset(lambda r: r.attack_class.value in (Attack.GENUINE, attack))
        if not any(r.attack_class.value is attack for r in sub.records):
            raise TrainingError(f"no {name!r} samples to train its specialist")
        subsets[name] = sub
    result = TrainResult(ensemble)
    for name, net in ensemble.specialists.items():
        r = train_vanilla(net, subsets[name], config)
        result.log.extend({"specialist": name, **row} for row in r.log)
        result.batch_log.extend(r.batch_log)
    if checkpoint_path:
        save_checkpoint(ensemble, checkpoint_path, {"kind": "independent", "seed": config.seed})
    return result


def fit(model: torch.nn.Module, manifest: DatasetManifest, config: TrainConfig,
        checkpoint_path=None, log_path=None) -> TrainResult:
    """Train any supported model type in place."""
    if isinstance(model, MixNetModel):
        return train_mixnet(model, manifest, config, checkpoint_path, log_path)
    if isinstance(model, VanillaNet):
        return train_vanilla(model, manifest, config, checkpoint_path, log_path)
    if isinstance(model, IndependentEnsemble):
        res = train_independent(model, manifest, config, checkpoint_path=checkpoint_path)
        if log_path:
            write_log(res.log, log_path)
        return res
    raise TypeError(f"don't know how to train {type(model).__name__}")


def score_manifest(model, manifest: DatasetManifest, batch_size: int = 128):
    """Score quadruples for every record, in manifest order."""
    out = []
    for start in range(0, len(manifest), batch_size):
        idx = range(start, min(start + batch_size, len(manifest)))
        out.extend(model.scores(load_batch(manifest, idx)))
    return out


def scored_samples(manifest: DatasetManifest, quads) -> list[ScoredSample]:
    return [ScoredSample(r.sample_id, min(max(q.final_score, 0.0), 1.0),
                         int(r.attack_class.is_attack), r.attack_class)
            for r, q in zip(manifest.records, quads)]


# -- grid search ----------------------------------------------------------------

@dataclass(frozen=True)
class GridSearchSpec:
    branch_alpha_grid: tuple[float, ...] = (0.0, 0.33, 0.5, 1.0)
    final_alpha_grid: tuple[float, ...] = (1.0, 5.0, 10.0)
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not self.branch_alpha_grid or not self.final_alpha_grid:
            raise ValueError("alpha grids must be nonempty")
        if any(not 0 <= a <= 1 for a in self.branch_alpha_grid):
            raise ValueError("branch alphas must lie in [0, 1]")
        if any(not 0 <= a <= 10 for a in self.final_alpha_grid):
            raise ValueError("final alphas must lie in [0, 10]")


@dataclass
class GridSearchResult:
    best: tuple[float, ...]
    table: list[dict]


def grid_search(spec: GridSearchSpec, manifest: DatasetManifest, config: TrainConfig,
                model_factory: Callable[[tuple[float, ...]], MixNetModel],
                n_branches: int = 3) -> GridSearchResult:
    """Exhaustive search over alphas, scored by ACER on an inner validation split.

    The split holds out ``validation_fraction`` of each class's training
    videos. The threshold comes from the inner-training scores. Ties go to the
    smaller branch-alpha sum, then the smaller final alpha.
    """
    inner, val = split_validation(manifest, spec.validation_fraction, config.seed)
    table = []
    for branch in itertools.product(spec.branch_alpha_grid, repeat=n_branches):
        for final in spec.final_alpha_grid:
            alphas = tuple(branch) + (final,)
            model = model_factory(alphas)
            fit(model, inner, TrainConfig(**{**asdict(config), "alphas": alphas}))
            thr = fit_threshold(scored_samples(inner, score_manifest(model, inner)), "train")
            test = scored_samples(val, score_manifest(model, val))
            thr.check_disjoint(s.sample_id for s in test)
            ap, bp = apcer(test, thr.value), bpcer(test, thr.value)
            table.append({"alphas": list(alphas), "apcer": ap, "bpcer": bp, "acer": acer(ap, bp),
                          "threshold": thr.value})
    best = min(table, key=lambda r: (r["acer"], sum(r["alphas"][:-1]), r["alphas"][-1], r["alphas"]))
    return GridSearchResult(tuple(best["alphas"]), table)


def write_log(rows: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def default_independent_backbones(manifest: DatasetManifest, backbone: BackboneSpec | None = None):
    backbone = backbone or BackboneSpec()
    present = manifest.attack_values()
    return {a.value: backbone for a in ATTACKS if a in present}


def is_finite_log(log: Sequence[dict]) -> bool:
    return all(math.isfinite(r["total_loss"]) for r in log)
