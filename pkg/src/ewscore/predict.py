"""Feature fusion, standardization, model fitting and ensembling."""

from __future__ import annotations

import csv
import enum
import logging
import math
import pickle
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.model_selection import GridSearchCV, GroupKFold, KFold, StratifiedKFold
from sklearn.neural_network import MLPClassifier, MLPRegressor
from sklearn.svm import SVC, SVR

from .datamodel import FEATURE_NAMES, ScoreEstimate, Source
from .errors import (
    ConstantInput,
    DegenerateLabels,
    DimensionMismatch,
    InsufficientData,
    MissingTrainPerformance,
    OutOfRange,
)

log = logging.getLogger(__name__)

N_FEATURES = len(FEATURE_NAMES)
MIN_TRAIN_ROWS = 10
INNER_FOLDS = 3
ENSEMBLE_EPS = 0.01
MODEL_FORMAT = 1


class Family(str, enum.Enum):
    RANDOM_FOREST = "random_forest"
    SUPPORT_VECTOR = "support_vector"
    TWO_LAYER_FEEDFORWARD = "two_layer_feedforward"


class Task(str, enum.Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


SHORT_NAMES = {
    Family.RANDOM_FOREST: "rf",
    Family.SUPPORT_VECTOR: "svm",
    Family.TWO_LAYER_FEEDFORWARD: "mlp",
}


def fuse(visual, audio, text) -> np.ndarray:
    """Concatenate (visual, audio, text) into the canonical 18D row."""
    parts = [np.asarray(p, dtype=float).ravel() for p in (visual, audio, text)]
    for name, part, n in zip(("visual", "audio", "text"), parts, (7, 7, 4)):
        if part.shape != (n,):
            raise DimensionMismatch(f"{name} block has {part.size} values, expected {n}")
    return np.concatenate(parts)


def feature_index(name: str) -> int:
    return FEATURE_NAMES.index(name)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows) -> "Standardizer":
        X = np.asarray(rows, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # relative cutoff: float noise in the mean of a constant column is not variance
        constant = (np.ptp(X, axis=0) == 0) | (std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
        if constant.any():
            mean = np.where(np.ptp(X, axis=0) == 0, X[0], mean)
            names = [FEATURE_NAMES[i] if X.shape[1] == N_FEATURES else str(i) for i in np.flatnonzero(constant)]
            log.warning("constant training features, std set to 1: %s", ", ".join(names))
            std = np.where(constant, 1.0, std)
        return cls(mean, std)

    def transform(self, rows) -> np.ndarray:
        X = np.asarray(rows, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise DimensionMismatch(f"rows have {X.shape[-1]} features, standardizer expects {self.mean.shape[0]}")
        return (X - self.mean) / self.std


def round_score(value: float) -> int:
    """Nearest integer in 1..4, halves rounding up."""
    if not (1.0 - 1e-9 <= value <= 4.0 + 1e-9) or math.isnan(value):
        raise OutOfRange(f"score {value} outside [1, 4]")
    return int(min(4, max(1, math.floor(value + 0.5))))


def default_grid(family: Family) -> dict:
    if family is Family.RANDOM_FOREST:
        return {"n_estimators": [100, 300], "max_depth": [None, 10]}
    if family is Family.SUPPORT_VECTOR:
        return {"kernel": ["rbf", "linear"], "C": [0.1, 1.0, 10.0]}
    return {"hidden_layer_sizes": [(32,), (64,)], "alpha": [1e-4, 1e-3]}


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    task: Task
    grid: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "task", Task(self.task))

    @property
    def name(self) -> str:
        return f"{SHORT_NAMES[self.family]}_{'clf' if self.task is Task.CLASSIFICATION else 'reg'}"

    def param_grid(self) -> dict:
        return dict(self.grid) if self.grid is not None else default_grid(self.family)

    def to_dict(self):
        grid = {k: [list(v) if isinstance(v, tuple) else v for v in vals] for k, vals in self.param_grid().items()}
        return {"family": self.family.value, "task": self.task.value, "grid": grid, "seed": self.seed}


def build_estimator(family: Family, task: Task, seed: int):
    reg = task is Task.REGRESSION
    if family is Family.RANDOM_FOREST:
        cls = RandomForestRegressor if reg else RandomForestClassifier
        return cls(random_state=seed, n_jobs=1)
    if family is Family.SUPPORT_VECTOR:
        return SVR() if reg else SVC(random_state=seed)
    cls = MLPRegressor if reg else MLPClassifier
    # lbfgs converges reliably on a few hundred rows
    return cls(solver="lbfgs", max_iter=2000, random_state=seed)


def _pearson_scorer(estimator, X, y):
    from .evalharness import pearson

    try:
        return pearson(estimator.predict(X), y)
    except ConstantInput:
        return float("nan")


@dataclass
class TrainedModel:
    spec: ModelSpec
    standardizer: Standardizer
    estimator: object
    best_params: dict
    inner_score: float
    fold: Optional[int] = None

    @property
    def name(self) -> str:
        return self.spec.name

    def predict_values(self, rows) -> np.ndarray:
        X = np.atleast_2d(np.asarray(rows, dtype=float))
        if X.shape[1] != self.standardizer.mean.shape[0]:
            raise DimensionMismatch(f"rows have {X.shape[1]} features, model expects {self.standardizer.mean.shape[0]}")
        raw = np.asarray(self.estimator.predict(self.standardizer.transform(X)), dtype=float)
        return np.clip(raw, 1.0, 4.0)

    def save(self, path):
        with open(path, "wb") as fh:
            pickle.dump({"format": MODEL_FORMAT, "model": self}, fh)

    @staticmethod
    def load(path) -> "TrainedModel":
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
        if payload.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: unsupported model format")
        return payload["model"]


def _inner_cv(groups, labels, task: Task, seed: int):
    if groups is not None and len(set(groups)) >= INNER_FOLDS:
        return GroupKFold(n_splits=INNER_FOLDS)
    if task is Task.CLASSIFICATION and np.min(np.unique(labels, return_counts=True)[1]) >= INNER_FOLDS:
        return StratifiedKFold(n_splits=INNER_FOLDS, shuffle=True, random_state=seed)
    return KFold(n_splits=INNER_FOLDS, shuffle=True, random_state=seed)


def fit_model(spec: ModelSpec, train_rows, train_labels, groups: Optional[Sequence] = None,
              fold: Optional[int] = None) -> TrainedModel:
    """Standardize, grid-search on an inner grouped 3-fold split, refit on all rows.

    Regression selects by Pearson r, classification by accuracy; classification
    labels are rounded with :func:`round_score` first.
    """
    X = np.asarray(train_rows, dtype=float)
    y = np.asarray(train_labels, dtype=float)
    if len(X) < MIN_TRAIN_ROWS:
        raise InsufficientData(f"{len(X)} training rows, need >= {MIN_TRAIN_ROWS}")
    if spec.task is Task.CLASSIFICATION:
        y = np.array([round_score(v) for v in y])
    if np.all(y == y[0]):
        raise DegenerateLabels("all training labels are identical")
    standardizer = Standardizer.fit(X)
    Xs = standardizer.transform(X)
    scoring = _pearson_scorer if spec.task is Task.REGRESSION else "accuracy"
    search = GridSearchCV(
        build_estimator(spec.family, spec.task, spec.seed),
        spec.param_grid(),
        scoring=scoring,
        cv=_inner_cv(groups, y, spec.task, spec.seed),
        refit=True,
        n_jobs=1,
        error_score=float("nan"),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.filterwarnings("ignore", message=".*least populated class.*")
        warnings.filterwarnings("ignore", message=".*test scores are non-finite.*")
        search.fit(Xs, y, groups=groups)
    return TrainedModel(
        spec=spec,
        standardizer=standardizer,
        estimator=search.best_estimator_,
        best_params=dict(search.best_params_),
        inner_score=float(search.best_score_),
        fold=fold,
    )


def predict_score(model: TrainedModel, row, segment: str = "") -> ScoreEstimate:
    row = np.asarray(row, dtype=float)
    if row.shape != (model.standardizer.mean.shape[0],):
        raise DimensionMismatch(f"row shape {row.shape}")
    value = float(model.predict_values(row)[0])
    if model.spec.task is Task.CLASSIFICATION:
        rounded = int(round(value))
        value = float(rounded)
    else:
        rounded = round_score(value)
    return ScoreEstimate(segment, value, Source.TRAINED_MODEL, rounded=rounded, name=model.name)


class EnsembleMode(str, enum.Enum):
    UNWEIGHTED = "unweighted"
    WEIGHTED = "weighted"


@dataclass
class EnsembleSpec:
    """How to average base estimates.

    ``train_r`` maps a base estimate's ``name`` to its Pearson r against the
    human means on the fold's training segments (weighted mode only).
    """

    mode: EnsembleMode = EnsembleMode.UNWEIGHTED
    train_r: dict = field(default_factory=dict)
    epsilon: float = ENSEMBLE_EPS
    name: str = ""

    def __post_init__(self):
        self.mode = EnsembleMode(self.mode)

    def weights(self, names: Sequence[str]) -> np.ndarray:
        n = len(names)
        if self.mode is EnsembleMode.UNWEIGHTED:
            return np.full(n, 1.0 / n)
        missing = [nm for nm in names if self.train_r.get(nm) is None]
        if missing:
            raise MissingTrainPerformance(f"no training r recorded for {missing}")
        raw = np.array([max(float(self.train_r[nm]), self.epsilon) for nm in names])
        return raw / raw.sum()


def combine(estimates: Sequence[ScoreEstimate], spec: EnsembleSpec) -> ScoreEstimate:
    if len(estimates) < 2:
        raise ValueError("an ensemble needs at least two base estimates")
    segments = {e.segment for e in estimates}
    if len(segments) != 1:
        raise ValueError(f"estimates span several segments: {sorted(segments)}")
    w = spec.weights([e.name for e in estimates])
    values = np.array([e.value for e in estimates])
    # keep the convex combination inside [min, max] against rounding drift
    value = float(min(values.max(), max(values.min(), float(np.dot(w, values)))))
    return ScoreEstimate(
        segment=estimates[0].segment,
        value=value,
        source=Source.ENSEMBLE,
        rounded=round_score(value),
        name=spec.name or f"ensemble_{spec.mode.value}",
    )


ESTIMATE_FIELDS = ["segment_id", "source", "name", "value", "rounded"]


def write_estimates(path, estimates: Sequence[ScoreEstimate], fold_of: Optional[dict] = None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMATE_FIELDS + (["fold"] if fold_of is not None else []))
        for e in estimates:
            row = [e.segment, e.source.value, e.name, repr(e.value), "" if e.rounded is None else e.rounded]
            if fold_of is not None:
                row.append(fold_of.get(e.segment, ""))
            writer.writerow(row)


def read_estimates(path) -> list[ScoreEstimate]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ScoreEstimate.from_dict(row) for row in csv.DictReader(fh)]
