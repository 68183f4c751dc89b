"""
Policies learned straight from experiment rows, without an HTE model.

A segment's metric is its largest average treatment effect A_j(S) over arms
with enough rows in both the arm and control (A_0 = 0 is always a candidate).
The greedy variant accepts a split when both children beat the parent; the
iterative variant accepts it when either child does, harvests the best leaf,
drops its rows and repeats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import ClassVar, Mapping, Optional

import numpy as np

from core import (
    MAX_CANDIDATES,
    Clause,
    ConfigurationError,
    ExperimentTable,
    InsufficientOverlapError,
    Node,
    PolicyTree,
    ScalarizationWeights,
    Segment,
    arm_label,
    best_split,
    check_features,
    describe_predicate,
    grow_tree,
    improves,
    make_segment,
    predicate_mask,
    prefix_sums,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentAte:
    """A_j(S) per arm (None where arm j or control has too few rows), the metric and its arm."""

    values: tuple[Optional[float], ...]
    counts: tuple[int, ...]
    metric: float
    best_arm: int

    @property
    def eligible(self) -> tuple[bool, ...]:
        return tuple(v is not None for v in self.values)

    def to_dict(self) -> dict:
        return {"ate": list(self.values), "counts": list(self.counts), "metric": self.metric, "best_arm": self.best_arm}


def _arm_totals(w: np.ndarray, y: np.ndarray, n_arms: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row one-hot counts and outcome sums, shape (n, n_arms)."""
    counts = np.zeros((w.size, n_arms))
    counts[np.arange(w.size), w] = 1.0
    return counts, counts * y[:, None]


def _ates(counts: np.ndarray, sums: np.ndarray, min_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised A_j over the last axis; returns (values with -inf where ineligible, admissible)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    control_ok = counts[..., 0] >= min_count
    arm_ok = (counts >= min_count) & control_ok[..., None]
    values = np.where(arm_ok, means - means[..., :1], -np.inf)
    values[..., 0] = np.where(control_ok, 0.0, -np.inf)
    admissible = control_ok & arm_ok[..., 1:].any(axis=-1)
    return values, admissible


def _segment_ate(w: np.ndarray, y: np.ndarray, n_arms: int, min_count: int) -> Optional[SegmentAte]:
    counts = np.bincount(w, minlength=n_arms).astype(float)
    sums = np.bincount(w, weights=y, minlength=n_arms)
    values, admissible = _ates(counts, sums, min_count)
    if not admissible:
        return None
    best = int(np.argmax(values))
    return SegmentAte(
        values=tuple(float(v) if np.isfinite(v) else None for v in values),
        counts=tuple(int(c) for c in counts),
        metric=float(values[best]),
        best_arm=best,
    )


def segment_ate(table: ExperimentTable, rows: np.ndarray, j: int,
                weights: Optional[ScalarizationWeights] = None) -> Optional[float]:
    """Mean scalarized outcome of arm j minus control within `rows`; None if either is empty."""
    rows = np.asarray(rows, dtype=np.int64)
    y = table.scalarized_outcomes(weights)[rows]
    w = table.treatment[rows]
    if not np.any(w == 0) or not np.any(w == j):
        return None
    return float(y[w == j].mean() - y[w == 0].mean())


@dataclass(frozen=True)
class NoHteConfig:
    max_depth: int = 2
    min_arm_per_child: int = 25
    max_candidates: int = MAX_CANDIDATES

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigurationError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_arm_per_child < 1:
            raise ConfigurationError(f"min_arm_per_child must be >= 1, got {self.min_arm_per_child}")


@dataclass(frozen=True)
class IterativeConfig(NoHteConfig):
    iterations: int = 3
    default_arm: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True, eq=False)
class PolicySegment:
    """A learned segment with its action and the ATE table it was chosen from."""

    segment: Segment
    action: int
    ate: SegmentAte

    def to_dict(self) -> dict:
        return {**self.segment.to_dict(), "action": self.action, **self.ate.to_dict()}


class _AteSearch:
    def __init__(self, table: ExperimentTable, weights, config: NoHteConfig, relaxed: bool):
        self.X = table.features
        self.w = table.treatment
        self.n_arms = table.n_arms
        self.y = table.scalarized_outcomes(weights)
        self.counts, self.sums = _arm_totals(self.w, self.y, self.n_arms)
        self.config = config
        self.relaxed = relaxed

    def ate(self, rows: np.ndarray, min_count: Optional[int] = None) -> Optional[SegmentAte]:
        m = self.config.min_arm_per_child if min_count is None else min_count
        return _segment_ate(self.w[rows], self.y[rows], self.n_arms, m)

    def choose(self, rows: np.ndarray):
        parent = self.ate(rows)
        if parent is None:
            return None
        m = self.config.min_arm_per_child
        combine = np.maximum if self.relaxed else np.minimum

        def score(sorted_rows: np.ndarray, left_counts: np.ndarray) -> np.ndarray:
            pc = prefix_sums(self.counts[sorted_rows])
            ps = prefix_sums(self.sums[sorted_rows])
            left_c, left_s = pc[left_counts], ps[left_counts]
            lv, la = _ates(left_c, left_s, m)
            rv, ra = _ates(pc[-1] - left_c, ps[-1] - left_s, m)
            return np.where(la & ra, combine(lv.max(axis=1), rv.max(axis=1)), -np.inf)

        choice = best_split(self.X, rows, score, 1, self.config.max_candidates)
        if choice is None or not improves(choice.score, parent.metric):
            return None
        return choice

    def grow(self, rows: np.ndarray) -> Node:
        return grow_tree(rows, self.config.max_depth, self.choose, lambda leaf_rows: leaf_rows)


def _whole_table_ate(search: _AteSearch, rows: np.ndarray) -> Optional[SegmentAte]:
    return search.ate(rows) or search.ate(rows, min_count=1)


def _check_overlap(table: ExperimentTable) -> None:
    sizes = table.arm_sizes()
    if sizes[0] == 0:
        raise InsufficientOverlapError("no control rows", arm=0)
    if sizes[1:].sum() == 0:
        raise InsufficientOverlapError("no treated rows in any arm")


def fit_no_hte_greedy(table: ExperimentTable, config: Optional[NoHteConfig] = None,
                      weights: Optional[ScalarizationWeights] = None) -> tuple[list[PolicySegment], PolicyTree]:
    config = config or NoHteConfig()
    _check_overlap(table)
    search = _AteSearch(table, weights, config, relaxed=False)
    root = search.grow(np.arange(table.n_rows))

    segments: list[PolicySegment] = []
    if root.is_leaf:
        ate = _whole_table_ate(search, root.value)
        segments.append(PolicySegment(make_segment(table, root.value, (), weights), ate.best_arm, ate))
        policy_root = Node.leaf(ate.best_arm)
    else:
        for clauses, leaf in root.paths():
            ate = search.ate(leaf.value)
            segments.append(PolicySegment(make_segment(table, leaf.value, clauses, weights), ate.best_arm, ate))
        actions = iter([s.action for s in segments])
        policy_root = root.map_leaves(lambda rows: next(actions))
    tree = PolicyTree(policy_root, table.n_features, table.feature_names, arm_count=table.n_arms)
    log.info("No-HTE greedy policy: %d segments, depth=%d", len(segments), tree.depth)
    return segments, tree


@dataclass(frozen=True)
class Rule:
    clauses: tuple[Clause, ...]
    arm: int

    def to_dict(self) -> dict:
        return {"clauses": [c.to_dict() for c in self.clauses], "arm": self.arm}


@dataclass(frozen=True, eq=False)
class RuleListPolicy:
    """First-match rule list; rows matching no rule get `default_arm`."""

    rules: tuple[Rule, ...]
    default_arm: int
    n_features: int
    feature_names: tuple[str, ...] = ()

    kind: ClassVar[str] = "rule_list"

    def __post_init__(self):
        names = tuple(self.feature_names) or tuple(f"feature{i}" for i in range(self.n_features))
        object.__setattr__(self, "feature_names", names)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = check_features(X, self.n_features)
        arms = np.full(X.shape[0], self.default_arm, dtype=np.int64)
        assigned = np.zeros(X.shape[0], dtype=bool)
        for rule in self.rules:
            hit = predicate_mask(rule.clauses, X) & ~assigned
            arms[hit] = rule.arm
            assigned |= hit
        return arms

    def render_text(self) -> str:
        lines = []
        for i, rule in enumerate(self.rules):
            lead = "If" if i == 0 else "Else if"
            lines.append(f"{lead} {describe_predicate(rule.clauses, self.feature_names)}, assign {arm_label(rule.arm)}.")
        if lines:
            lines.append(f"Otherwise, assign {arm_label(self.default_arm)}.")
        else:
            lines.append(f"Assign {arm_label(self.default_arm)} for everyone.")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "version": 1,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "rules": [r.to_dict() for r in self.rules],
            "default_arm": self.default_arm,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RuleListPolicy":
        rules = tuple(Rule(tuple(Clause.from_dict(c) for c in r["clauses"]), int(r["arm"])) for r in data["rules"])
        return cls(rules, int(data["default_arm"]), int(data["n_features"]), tuple(data.get("feature_names") or ()))


@dataclass
class IterativeResult:
    segments: list[PolicySegment] = field(default_factory=list)
    rounds: int = 0


def fit_no_hte_iterative(table: ExperimentTable, config: Optional[IterativeConfig] = None,
                         weights: Optional[ScalarizationWeights] = None) -> tuple[list[PolicySegment], RuleListPolicy]:
    """Harvest up to `iterations` segments, best A(S) first; returns them with the first-match policy."""
    config = config or IterativeConfig()
    _check_overlap(table)
    if not 0 <= config.default_arm < table.n_arms:
        raise ConfigurationError(f"default arm must lie in 0..{table.n_arms - 1}, got {config.default_arm}")
    search = _AteSearch(table, weights, config, relaxed=True)
    remaining = np.arange(table.n_rows)
    result = IterativeResult()

    while result.rounds < config.iterations:
        if remaining.size == 0 or search.ate(remaining) is None:
            log.info("Stopping after %d rounds: remaining rows lack overlap", result.rounds)
            break
        result.rounds += 1
        root = search.grow(remaining)
        if root.is_leaf:
            log.info("Round %d found no improving split", result.rounds)
            break
        best = None
        for clauses, leaf in root.paths():
            ate = search.ate(leaf.value)
            if best is None or ate.metric > best[2].metric:
                best = (clauses, leaf.value, ate)
        clauses, rows, ate = best
        result.segments.append(PolicySegment(make_segment(table, rows, clauses, weights), ate.best_arm, ate))
        remaining = np.setdiff1d(remaining, rows)
        log.info("Round %d harvested %d rows: %s -> %s (A=%.4g)",
                 result.rounds, rows.size, describe_predicate(clauses, table.feature_names),
                 arm_label(ate.best_arm), ate.metric)

    rules = tuple(Rule(s.segment.predicate, s.action) for s in result.segments)
    return result.segments, RuleListPolicy(rules, config.default_arm, table.n_features, table.feature_names)
