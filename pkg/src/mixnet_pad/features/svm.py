"""RBF-SVM classifier over handcrafted feature vectors."""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.svm import SVC

DEFAULT_GRID = {"C": [0.1, 1.0, 10.0, 100.0], "gamma": ["scale", 0.1, 1.0, 10.0]}
_FORMAT = "mixnet-pad/svm"


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    descriptor_id: str


@dataclass
class SvmModel:
    svc: SVC
    descriptor_id: str
    calibration: tuple[float, float]
    decision_threshold: float
    kernel: str = "rbf"
    params: dict = field(default_factory=dict)

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.svc.decision_function(np.atleast_2d(x))

    def scores(self, x: np.ndarray) -> np.ndarray:
        a, b = self.calibration
        return 1.0 / (1.0 + np.exp(-(a * self.decision(x) + b)))


def fit_calibration(decisions, labels) -> tuple[float, float]:
    """Platt-style logistic fit ``p = sigmoid(a*d + b)`` on 1-D decision values."""
    lr = LogisticRegression(C=1.0)
    lr.fit(np.asarray(decisions, dtype=np.float64).reshape(-1, 1), np.asarray(labels))
    return float(lr.coef_[0, 0]), float(lr.intercept_[0])


def _stack(features) -> tuple[np.ndarray, str]:
    ids = {f.descriptor_id for f in features}
    if len(ids) != 1:
        raise ValueError(f"features mix descriptors {sorted(ids)}")
    return np.stack([np.asarray(f.values, dtype=np.float64) for f in features]), ids.pop()


def train_svm(features, labels, config: dict | None = None, seed: int = 0) -> SvmModel:
    """Fit an RBF SVM; C and gamma are chosen by 3-fold grid search when every
    class has at least three samples, otherwise the first grid point is used.

    Raises:
        ValueError: a single class, or fewer than two samples of a class.
    """
    from ..evalmetrics import ScoredSample, roc_and_eer

    x, descriptor_id = _stack(features)
    y = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) != 2:
        raise ValueError("SVM training needs both genuine (0) and attack (1) samples")
    if counts.min() < 2:
        raise ValueError("SVM training needs at least two samples per class")
    grid = dict(DEFAULT_GRID if config is None else config)
    if counts.min() >= 3 and any(len(v) > 1 for v in grid.values()):
        search = GridSearchCV(SVC(kernel="rbf"), grid,
                              cv=StratifiedKFold(3, shuffle=True, random_state=seed))
        search.fit(x, y)
        params = search.best_params_
    else:
        params = {k: v[0] for k, v in grid.items()}
    svc = SVC(kernel="rbf", **params).fit(x, y)
    d = svc.decision_function(x)
    cal = fit_calibration(d, y)
    model = SvmModel(svc, descriptor_id, cal, 0.5, params=dict(params))
    s = model.scores(x)
    samples = [ScoredSample(str(i), float(v), int(t)) for i, (v, t) in enumerate(zip(s, y))]
    model.decision_threshold = roc_and_eer(samples).eer_threshold
    return model


def predict_score(model: SvmModel, feature: FeatureVector) -> float:
    """Attack probability in [0, 1] from the calibrated decision value."""
    if feature.descriptor_id != model.descriptor_id:
        raise ValueError(f"descriptor mismatch: model {model.descriptor_id!r}, "
                         f"feature {feature.descriptor_id!r}")
    return float(model.scores(np.asarray(feature.values))[0])


def save_svm(model: SvmModel, path: str | os.PathLike) -> None:
    payload = {"format": _FORMAT, "version": 1, "kernel": model.kernel,
               "descriptor_id": model.descriptor_id, "params": model.params,
               "calibration": model.calibration,
               "decision_threshold": model.decision_threshold, "svc": model.svc}
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_svm(path: str | os.PathLike) -> SvmModel:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if not isinstance(payload, dict) or payload.get("format") != _FORMAT:
        raise ValueError(f"{path} is not an SVM model file")
    return SvmModel(payload["svc"], payload["descriptor_id"], tuple(payload["calibration"]),
                    payload["decision_threshold"], payload["kernel"], payload["params"])
