"""
T-Learner teacher: one regressor per (arm, outcome), fitted only on that arm's rows.

Predictions can also come from any external HTE model through load_predictions().
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.tree import DecisionTreeRegressor

import store
from core import (
    ConfigurationError,
    DimensionError,
    ExperimentTable,
    InsufficientOverlapError,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    ValidationError,
    check_features,
    column_arm_count,
    prediction_column,
)

log = logging.getLogger(__name__)

BASE_LEARNERS = ("gbdt", "tree")


@dataclass(frozen=True)
class TLearnerConfig:
    n_estimators: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    seed: int = 0
    min_arm_rows: int = 20
    base_learner: str = "gbdt"

    def __post_init__(self):
        if self.base_learner not in BASE_LEARNERS:
            raise ConfigurationError(f"base_learner must be one of {BASE_LEARNERS}, got {self.base_learner!r}")
        if self.n_estimators < 1 or self.max_depth < 1 or self.min_arm_rows < 1:
            raise ConfigurationError("n_estimators, max_depth and min_arm_rows must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")

    def make_regressor(self):
        if self.base_learner == "tree":
            return DecisionTreeRegressor(max_depth=self.max_depth, random_state=self.seed)
        return GradientBoostingRegressor(
            loss="squared_error",
            n_estimators=self.n_estimators,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            subsample=1.0,
            random_state=self.seed,
        )


@dataclass(frozen=True, eq=False)
class TLearnerModel:
    """regressors[k][j] predicts outcome j under arm k."""

    regressors: tuple[tuple[object, ...], ...]
    config: TLearnerConfig
    n_features: int
    feature_names: tuple[str, ...]

    @property
    def arm_count(self) -> int:
        return len(self.regressors)

    @property
    def outcome_count(self) -> int:
        return len(self.regressors[0])


def _fit_one(template, X: np.ndarray, y: np.ndarray):
    model = clone(template)
    model.fit(X, y)
    return model


def fit_tlearner(train: ExperimentTable, config: Optional[TLearnerConfig] = None, n_jobs: int = 1) -> TLearnerModel:
    """Fit every (arm, outcome) regressor; `n_jobs` threads share the work and never change the result."""
    config = config or TLearnerConfig()
    sizes = train.arm_sizes()
    for arm, size in enumerate(sizes):
        if size < config.min_arm_rows:
            raise InsufficientOverlapError(
                f"arm {arm} has {size} training rows; at least {config.min_arm_rows} are needed", arm=arm)

    template = config.make_regressor()
    jobs = [(k, j) for k in range(train.n_arms) for j in range(train.n_outcomes)]
    log.info("Fitting %d %s regressors (arms=%d, outcomes=%d, rows=%d)",
             len(jobs), config.base_learner, train.n_arms, train.n_outcomes, train.n_rows)
    fitted = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fit_one)(template, train.features[train.treatment == k], train.outcomes[train.treatment == k, j])
        for k, j in jobs
    )
    by_arm = tuple(
        tuple(fitted[k * train.n_outcomes + j] for j in range(train.n_outcomes))
        for k in range(train.n_arms)
    )
    return TLearnerModel(by_arm, config, train.n_features, train.feature_names)


def predict_potential(model: TLearnerModel, X: np.ndarray) -> PotentialPredictionMatrix:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and X.shape[0] == 0:
        if X.shape[1] != model.n_features:
            raise DimensionError(f"expected {model.n_features} features, got {X.shape[1]}")
        return PotentialPredictionMatrix(np.empty((0, model.arm_count, model.outcome_count)))
    X = check_features(X, model.n_features)
    values = np.empty((X.shape[0], model.arm_count, model.outcome_count))
    for k, per_outcome in enumerate(model.regressors):
        for j, regressor in enumerate(per_outcome):
            values[:, k, j] = regressor.predict(X)
    return PotentialPredictionMatrix(values)


def load_predictions(path, table: ExperimentTable) -> PotentialPredictionMatrix:
    """Read a yhat_<j>_<k> CSV whose rows follow the order of `table`."""
    frame = store.read_frame(path)
    if len(frame) != table.n_rows:
        raise DimensionError(f"{path} has {len(frame)} prediction rows but the table has {table.n_rows}")
    covered = column_arm_count(frame.columns, "yhat")
    if covered is not None and covered > table.n_arms:
        raise DimensionError(f"{path} has predictions for {covered} arms but the table has {table.n_arms}; "
                             "read the table with the full arm count")
    values = np.empty((table.n_rows, table.n_arms, table.n_outcomes))
    for k in range(table.n_arms):
        for j in range(table.n_outcomes):
            column = prediction_column(j, k)
            if column not in frame.columns:
                raise ValidationError(f"{path} is missing a prediction column", column=column)
            values[:, k, j] = frame[column].apply(_to_float).to_numpy(dtype=float)
    return PotentialPredictionMatrix(values)


def _to_float(value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return float("nan")


def save_predictions(preds: PotentialPredictionMatrix, path):
    return store.write_frame(preds.to_frame(), path)


def naive_hte_policy(preds: PotentialPredictionMatrix,
                     weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
    """Per-row argmax of the scalarized predicted outcome; ties go to the lowest arm."""
    return np.argmax(preds.scalarized(weights), axis=1).astype(np.int64)
