"""
Ground-truth metrics for policies and explanation trees.

regret / true_policy_value need oracle potential outcomes (synthetic or
k-NN semi-synthetic data); pehe and subgroup_variances compare effect
estimates. MetricsReport is the per-run JSON record and aggregate_reports
turns many of them into mean ± sd per method.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from core import (
    DimensionError,
    ExperimentTable,
    Policy,
    ScalarizationWeights,
    Segment,
    ValidationError,
    assign,
    check_finite,
    scalarize_array,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("regret", "regret_per_capita", "value", "pehe", "within_var", "between_var")


def oracle_column(outcome: int, arm: int) -> str:
    return f"ystar_{outcome}_{arm}"


@dataclass(frozen=True, eq=False)
class OracleOutcomes:
    """True potential outcomes, indexed [row, arm, outcome]."""

    potential: np.ndarray

    def __post_init__(self):
        v = np.array(self.potential, dtype=float)
        if v.ndim != 3:
            raise DimensionError(f"oracle outcomes must be N x (K+1) x J, got shape {v.shape}")
        columns = [oracle_column(j, k) for k in range(v.shape[1]) for j in range(v.shape[2])]
        check_finite(v, columns, "oracle outcomes")
        v.setflags(write=False)
        object.__setattr__(self, "potential", v)

    @property
    def n_rows(self) -> int:
        return self.potential.shape[0]

    @property
    def arm_count(self) -> int:
        return self.potential.shape[1]

    @property
    def outcome_count(self) -> int:
        return self.potential.shape[2]

    def scalarized(self, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
        return scalarize_array(self.potential, weights)

    def true_effects(self, k: int, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
        s = self.scalarized(weights)
        return s[:, k] - s[:, 0]

    def best_arms(self, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
        return np.argmax(self.scalarized(weights), axis=1)

    def take(self, rows: np.ndarray) -> "OracleOutcomes":
        return OracleOutcomes(self.potential[np.asarray(rows, dtype=np.int64)])

    def check_compatible(self, table: ExperimentTable) -> "OracleOutcomes":
        if self.n_rows != table.n_rows:
            raise DimensionError(f"oracle has {self.n_rows} rows but the table has {table.n_rows}")
        if self.arm_count != table.n_arms:
            raise DimensionError(f"oracle covers {self.arm_count} arms but the table has {table.n_arms}")
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            oracle_column(j, k): self.potential[:, k, j]
            for j in range(self.outcome_count) for k in range(self.arm_count)
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "OracleOutcomes":
        found = {}
        for column in frame.columns:
            m = re.fullmatch(r"ystar_(\d+)_(\d+)", str(column))
            if m:
                found[(int(m.group(1)), int(m.group(2)))] = column
        if not found:
            raise ValidationError("no oracle columns (expected ystar_<j>_<k>)")
        n_outcomes = 1 + max(j for j, _ in found)
        n_arms = 1 + max(k for _, k in found)
        values = np.empty((len(frame), n_arms, n_outcomes))
        for k in range(n_arms):
            for j in range(n_outcomes):
                column = found.get((j, k))
                if column is None:
                    raise ValidationError("missing oracle column", column=oracle_column(j, k))
                values[:, k, j] = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=float)
        return cls(values)


# ---------------- metrics ----------------

def regret_of_assignment(arms: np.ndarray, oracle: OracleOutcomes,
                         weights: Optional[ScalarizationWeights] = None) -> float:
    """Σ_i (max_k Y_i^(k) − Y_i^(arm_i)) on scalarized oracle outcomes."""
    arms = np.asarray(arms, dtype=np.int64)
    if arms.shape != (oracle.n_rows,):
        raise DimensionError(f"{arms.shape[0]} assignments for {oracle.n_rows} oracle rows")
    s = oracle.scalarized(weights)
    return float(np.sum(s.max(axis=1) - s[np.arange(oracle.n_rows), arms]))


def regret(policy: Policy, table: ExperimentTable, oracle: OracleOutcomes,
           weights: Optional[ScalarizationWeights] = None) -> float:
    oracle.check_compatible(table)
    return regret_of_assignment(assign(policy, table.features), oracle, weights)


def regret_per_capita(policy: Policy, table: ExperimentTable, oracle: OracleOutcomes,
                      weights: Optional[ScalarizationWeights] = None) -> float:
    return regret(policy, table, oracle, weights) / table.n_rows


def value_of_assignment(arms: np.ndarray, oracle: OracleOutcomes,
                        weights: Optional[ScalarizationWeights] = None) -> float:
    arms = np.asarray(arms, dtype=np.int64)
    if arms.shape != (oracle.n_rows,):
        raise DimensionError(f"{arms.shape[0]} assignments for {oracle.n_rows} oracle rows")
    return float(oracle.scalarized(weights)[np.arange(oracle.n_rows), arms].mean())


def true_policy_value(policy: Policy, table: ExperimentTable, oracle: OracleOutcomes,
                      weights: Optional[ScalarizationWeights] = None) -> float:
    """(1/N)·Σ_i scalarized Y_i^(Π(X_i))."""
    oracle.check_compatible(table)
    return value_of_assignment(assign(policy, table.features), oracle, weights)


def pehe(predicted_effects: Sequence[float], true_effects: Sequence[float]) -> float:
    """Root-mean-square error between predicted and true individual effects."""
    p = np.asarray(predicted_effects, dtype=float)
    t = np.asarray(true_effects, dtype=float)
    if p.shape != t.shape or p.ndim != 1:
        raise DimensionError(f"predicted effects {p.shape} and true effects {t.shape} are not aligned")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def subgroup_variances(segment_effects: Sequence[Sequence[float]]) -> tuple[float, float]:
    """(size-weighted mean within-segment variance, variance of segment means), both divide-by-n."""
    groups = [np.asarray(g, dtype=float) for g in segment_effects]
    if not groups:
        raise ValidationError("at least one segment is required")
    if any(g.size == 0 for g in groups):
        raise ValidationError("segments must be nonempty")
    sizes = np.array([g.size for g in groups], dtype=float)
    within = float(np.sum(sizes * np.array([g.var() for g in groups])) / sizes.sum())
    between = float(np.var([g.mean() for g in groups]))
    return within, between


def segment_effects(segments: Iterable[Segment], effects: np.ndarray) -> list[np.ndarray]:
    return [np.asarray(effects)[s.row_indices] for s in segments]


def random_assignment(n: int, arm_count: int, seed: int = 0) -> np.ndarray:
    """Uniform random arms, the comparison point for learned policies."""
    return np.random.default_rng(seed).integers(0, arm_count, size=n)


# ---------------- reports ----------------

@dataclass(frozen=True)
class MetricsReport:
    method: str
    seed: Optional[int]
    regret: float
    regret_per_capita: float
    value: float
    pehe: Optional[float] = None
    within_var: Optional[float] = None
    between_var: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(**{k: data.get(k) for k in ("method", "seed", *METRIC_FIELDS)})


def evaluate_assignment(method: str, seed: Optional[int], arms: np.ndarray, oracle: OracleOutcomes,
                        weights: Optional[ScalarizationWeights] = None,
                        predicted_effects: Optional[np.ndarray] = None,
                        segments: Optional[Sequence[Segment]] = None,
                        contrast_arm: int = 1) -> MetricsReport:
    """Regret and value of an assignment; PEHE and subgroup variances when effect estimates are given."""
    total = regret_of_assignment(arms, oracle, weights)
    pehe_value = within = between = None
    if predicted_effects is not None:
        truth = oracle.true_effects(contrast_arm, weights)
        pehe_value = pehe(predicted_effects, truth)
        if segments:
            within, between = subgroup_variances(segment_effects(segments, truth))
    report = MetricsReport(
        method=method,
        seed=seed,
        regret=total,
        regret_per_capita=total / oracle.n_rows,
        value=value_of_assignment(arms, oracle, weights),
        pehe=pehe_value,
        within_var=within,
        between_var=between,
    )
    log.info("%s (seed=%s): regret=%.6g, per-capita=%.6g, value=%.6g",
             method, seed, report.regret, report.regret_per_capita, report.value)
    return report


def evaluate_policy(method: str, seed: Optional[int], policy: Policy, table: ExperimentTable,
                    oracle: OracleOutcomes, weights: Optional[ScalarizationWeights] = None,
                    **effects) -> MetricsReport:
    oracle.check_compatible(table)
    return evaluate_assignment(method, seed, assign(policy, table.features), oracle, weights, **effects)


def aggregate_reports(reports: Iterable[MetricsReport | Mapping]) -> pd.DataFrame:
    """Mean and sd of every metric per method, one row per method."""
    rows = [r.to_dict() if isinstance(r, MetricsReport) else dict(r) for r in reports]
    if not rows:
        raise ValidationError("no metric reports to aggregate")
    frame = pd.DataFrame(rows)
    if "method" not in frame.columns:
        raise ValidationError("metric reports need a method", column="method")
    for name in METRIC_FIELDS:
        frame[name] = pd.to_numeric(frame[name], errors="coerce") if name in frame.columns else np.nan
    grouped = frame.groupby("method", sort=True)
    summary = grouped[list(METRIC_FIELDS)].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary.insert(0, "n_seeds", grouped.size())
    return summary.reset_index()


def format_report_table(summary: pd.DataFrame) -> str:
    """Text table of 'mean ± sd' cells."""
    out = pd.DataFrame({"method": summary["method"], "n": summary["n_seeds"]})
    for name in METRIC_FIELDS:
        mean, sd = summary[f"{name}_mean"], summary[f"{name}_std"].fillna(0.0)
        if mean.notna().any():
            out[name] = [f"{m:.3f} ± {s:.3f}" if pd.notna(m) else "-" for m, s in zip(mean, sd)]
    return out.to_string(index=False)
