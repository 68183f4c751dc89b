"""
Synthetic experiments with known potential outcomes, and k-NN semi-synthetic oracles.

Every generator draws features, a uniformly randomised arm per row and one
shared noise term, so Y^(k) = baseline(X) + effect(X, k) + ε for all arms k.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from sklearn.neighbors import NearestNeighbors
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from core import (
    ConfigurationError,
    ExperimentTable,
    InsufficientDataError,
)
from evaluation import OracleOutcomes
from utils import progress_enabled

log = logging.getLogger(__name__)

COVID_FEATURES = ("days_to_trial", "ast", "ldh")
AST_NORMAL_MAX = 40.0
LDH_NORMAL_MAX = 280.0


# ---------------- registries ----------------

def _normal_features(rng: np.random.Generator, n: int, p: int) -> tuple[np.ndarray, tuple[str, ...]]:
    return rng.standard_normal((n, p)), tuple(f"feature{i}" for i in range(p))


def _covid_features(rng: np.random.Generator, n: int, p: int) -> tuple[np.ndarray, tuple[str, ...]]:
    if p < 3:
        raise ConfigurationError(f"covid_like features need p >= 3, got {p}")
    days = rng.uniform(0.0, 20.0, n)
    ast = rng.uniform(10.0, 80.0, n)
    ldh = rng.uniform(100.0, 400.0, n)
    extra = rng.standard_normal((n, p - 3))
    names = COVID_FEATURES + tuple(f"feature{i}" for i in range(3, p))
    return np.column_stack([days, ast, ldh, extra]), names


def _covid_effect(X: np.ndarray) -> np.ndarray:
    """+1 early; mid-window benefit −1.5 with normal labs, −0.25 otherwise; −0.5 late."""
    days, ast, ldh = X[:, 0], X[:, 1], X[:, 2]
    normal_labs = (ast <= AST_NORMAL_MAX) & (ldh <= LDH_NORMAL_MAX)
    mid = np.where(normal_labs, -1.5, -0.25)
    return np.where(days < 4.5, 1.0, np.where(days < 10.5, mid, -0.5))


FEATURES: dict[str, Callable] = {
    "normal": _normal_features,
    "covid_like": _covid_features,
}

BASELINES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "athey_imbens_a": lambda X: X[:, 0] / 2.0 + X[:, 1],
    "covid_like": lambda X: 10.0 - 0.05 * X[:, 0] - 0.01 * (X[:, 1] - 40.0),
    "zero": lambda X: np.zeros(X.shape[0]),
    "linear": lambda X: X.sum(axis=1),
}

# effect(X, k): shift of arm k's potential outcome
EFFECTS: dict[str, Callable[[np.ndarray, int], np.ndarray]] = {
    "athey_imbens_a": lambda X, k: (k - 0.5) * X[:, 0] / 2.0,
    "covid_like": lambda X, k: k * _covid_effect(X),
    "zero": lambda X, k: np.zeros(X.shape[0]),
    "linear": lambda X, k: k * X[:, 0],
}


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 1000
    p: int = 2
    k_arms: int = 1
    noise_sd: float = 0.1
    features: str = "normal"
    baseline_fn: str = "athey_imbens_a"
    effect_fn: str = "athey_imbens_a"
    baseline_scale: float = 1.0
    effect_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"n must be >= 1, got {self.n}")
        if self.p < 1 or self.k_arms < 1:
            raise ConfigurationError("p and k_arms must be >= 1")
        if not self.noise_sd >= 0:
            raise ConfigurationError(f"noise_sd must be >= 0, got {self.noise_sd}")
        for registry, key in ((FEATURES, self.features), (BASELINES, self.baseline_fn), (EFFECTS, self.effect_fn)):
            if key not in registry:
                raise ConfigurationError(f"unknown generator function {key!r}; known: {sorted(registry)}")


def generate(spec: SyntheticSpec) -> tuple[ExperimentTable, OracleOutcomes]:
    rng = np.random.default_rng(spec.seed)
    X, names = FEATURES[spec.features](rng, spec.n, spec.p)
    arm_count = spec.k_arms + 1
    w = rng.integers(0, arm_count, size=spec.n)
    noise = rng.normal(0.0, spec.noise_sd, size=spec.n) if spec.noise_sd > 0 else np.zeros(spec.n)

    base = spec.baseline_scale * BASELINES[spec.baseline_fn](X)
    potential = np.stack(
        [base + spec.effect_scale * EFFECTS[spec.effect_fn](X, k) + noise for k in range(arm_count)], axis=1)
    potential = potential[:, :, None]

    table = ExperimentTable(
        features=X,
        treatment=w,
        outcomes=potential[np.arange(spec.n), w],
        propensity=np.full(spec.n, 1.0 / arm_count),
        feature_names=names,
        arm_count=arm_count,
    )
    log.info("Generated %d rows (%s/%s, K=%d, seed=%d)", spec.n, spec.baseline_fn, spec.effect_fn, spec.k_arms, spec.seed)
    return table, OracleOutcomes(potential)


def gen_synthetic_a(n: int, seed: int = 0, noise_sd: float = 0.1) -> tuple[ExperimentTable, OracleOutcomes]:
    """Two N(0,1) features; Y = x0/2 + x1 + (W − 1/2)·x0/2 + ε, W ~ Bernoulli(1/2)."""
    return generate(SyntheticSpec(n=n, p=2, k_arms=1, noise_sd=noise_sd, seed=seed))


def gen_covid_like(n: int, seed: int = 0, noise_sd: float = 0.5) -> tuple[ExperimentTable, OracleOutcomes]:
    """Days-to-trial, AST and LDH; treatment helps before day 4.5 and hurts afterwards."""
    return generate(SyntheticSpec(n=n, p=3, k_arms=1, noise_sd=noise_sd, features="covid_like",
                                  baseline_fn="covid_like", effect_fn="covid_like", seed=seed))


# ---------------- k-NN oracle ----------------

# extra neighbours fetched beyond k so tied distances can be resolved exactly
_TIE_MARGIN = 8
_DIST_RTOL = 1e-9


def _nearest(points: np.ndarray, donors: np.ndarray, queries: np.ndarray, k: int, n_jobs: Optional[int]) -> np.ndarray:
    """Positions (into `donors`) of the k nearest donors per query; ties by lower row index."""
    index = NearestNeighbors(n_neighbors=min(donors.size, k + _TIE_MARGIN), n_jobs=n_jobs).fit(points[donors])
    dist, cand = index.kneighbors(points[queries])
    kth = dist[:, k - 1]
    settled = (cand.shape[1] == donors.size) | (dist[:, -1] > kth * (1 + _DIST_RTOL) + 1e-12)

    out = np.empty((queries.size, k), dtype=np.int64)
    exact = ((points[donors[cand]] - points[queries][:, None, :]) ** 2).sum(axis=2)
    order = np.lexsort((donors[cand], exact), axis=-1)
    out[settled] = np.take_along_axis(cand, order, axis=1)[settled, :k]

    for i in tqdm(np.flatnonzero(~settled), desc="ties", disable=not progress_enabled(log)):
        d2 = ((points[donors] - points[queries[i]]) ** 2).sum(axis=1)
        out[i] = np.lexsort((donors, d2))[:k]
    return out


def knn_potential_outcomes(table: ExperimentTable, k_neighbors: int = 5, standardize: bool = False,
                           n_jobs: Optional[int] = None) -> OracleOutcomes:
    """Own arm keeps the observed outcome; other arms average the k nearest rows of that arm."""
    if k_neighbors < 1:
        raise ConfigurationError(f"k_neighbors must be >= 1, got {k_neighbors}")
    sizes = table.arm_sizes()
    for arm, size in enumerate(sizes):
        if size < k_neighbors:
            raise InsufficientDataError(f"arm {arm} has {size} rows; {k_neighbors} neighbours are needed", arm=arm)

    points = StandardScaler().fit_transform(table.features) if standardize else table.features
    potential = np.repeat(table.outcomes[:, None, :], table.n_arms, axis=1)
    for arm in tqdm(range(table.n_arms), desc="knn arms", disable=not progress_enabled(log)):
        donors = np.flatnonzero(table.treatment == arm)
        queries = np.flatnonzero(table.treatment != arm)
        if queries.size == 0:
            continue
        picks = _nearest(points, donors, queries, k_neighbors, n_jobs)
        potential[queries, arm, :] = table.outcomes[donors[picks]].mean(axis=1)
    log.info("k-NN potential outcomes for %d rows (k=%d, standardize=%s)", table.n_rows, k_neighbors, standardize)
    return OracleOutcomes(potential)
