"""
Policy trees learned from HTE-model predictions.

greedy_tree_search grows a tree breadth-wise, splitting a node only when the
children's best-arm sums strictly beat the parent's. distill_policy fits a
Gini classification tree to the per-row best arms and converts it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from core import (
    MAX_CANDIDATES,
    ConfigurationError,
    DimensionError,
    ExperimentTable,
    Node,
    PolicyTree,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    ValidationError,
    best_split,
    grow_tree,
    improves,
    prefix_sums,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NodeValue:
    """Per-arm sums of scalarized predictions over a segment, and the best of them."""

    arm_sums: tuple[float, ...]
    best_value: float
    best_arm: int


def node_value(pseudo: np.ndarray, rows: np.ndarray) -> NodeValue:
    sums = pseudo[rows].sum(axis=0)
    best = int(np.argmax(sums))
    return NodeValue(tuple(float(s) for s in sums), float(sums[best]), best)


@dataclass(frozen=True)
class GreedyConfig:
    max_depth: int = 2
    min_leaf: int = 1
    max_candidates: int = MAX_CANDIDATES

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigurationError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ConfigurationError(f"min_leaf must be >= 1, got {self.min_leaf}")


def search_tree(X: np.ndarray, pseudo: np.ndarray, config: GreedyConfig) -> Node:
    """Greedy best-column tree over any (N, A) value matrix; leaves hold column indices."""
    if X.shape[0] == 0:
        raise ValidationError("cannot search a policy on an empty table")

    def choose(rows: np.ndarray):
        parent = node_value(pseudo, rows).best_value

        def score(sorted_rows: np.ndarray, left_counts: np.ndarray) -> np.ndarray:
            pre = prefix_sums(pseudo[sorted_rows])
            left = pre[left_counts]
            right = pre[-1] - left
            return left.max(axis=1) + right.max(axis=1)

        choice = best_split(X, rows, score, config.min_leaf, config.max_candidates)
        if choice is None or not improves(choice.score, parent):
            return None
        return choice

    return grow_tree(np.arange(X.shape[0]), config.max_depth, choose,
                     lambda rows: node_value(pseudo, rows).best_arm)


def greedy_tree_search(table: ExperimentTable, preds: PotentialPredictionMatrix,
                       weights: Optional[ScalarizationWeights] = None,
                       config: Optional[GreedyConfig] = None) -> PolicyTree:
    config = config or GreedyConfig()
    preds.check_compatible(table)
    root = search_tree(table.features, preds.scalarized(weights), config)
    tree = PolicyTree(root, table.n_features, table.feature_names, arm_count=table.n_arms)
    log.info("Greedy policy tree: depth=%d, leaves=%d", tree.depth, len(tree.leaves()))
    return tree


@dataclass(frozen=True)
class DistillConfig:
    max_depth: int = 2
    min_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigurationError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ConfigurationError(f"min_leaf must be >= 1, got {self.min_leaf}")


def _majority(labels: np.ndarray) -> int:
    return int(np.argmax(np.bincount(labels)))


def _convert(estimator: DecisionTreeClassifier, X: np.ndarray) -> Node:
    """Rebuild a fitted sklearn tree with float64 midpoint thresholds."""
    t = estimator.tree_
    paths = estimator.decision_path(X).tocsc()

    def rows_at(node_id: int) -> np.ndarray:
        return paths[:, node_id].nonzero()[0]

    def build(node_id: int) -> Node:
        left_id, right_id = t.children_left[node_id], t.children_right[node_id]
        if left_id == right_id:
            counts = t.value[node_id][0]
            return Node.leaf(int(estimator.classes_[int(np.argmax(counts))]))
        f = int(t.feature[node_id])
        upper_left = X[rows_at(left_id), f].max()
        lower_right = X[rows_at(right_id), f].min()
        return Node.split(f, (upper_left + lower_right) / 2.0, build(left_id), build(right_id))

    return build(0)


def distill_policy(table: ExperimentTable, labels: np.ndarray,
                   config: Optional[DistillConfig] = None) -> PolicyTree:
    """Gini classification tree on (X, labels), each leaf assigning its majority arm."""
    config = config or DistillConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (table.n_rows,):
        raise DimensionError(f"{labels.shape[0]} labels for {table.n_rows} rows")
    if labels.min() < 0 or labels.max() >= table.n_arms:
        raise ValidationError(f"labels must be arms in 0..{table.n_arms - 1}")

    if config.max_depth == 0 or np.unique(labels).size == 1:
        root = Node.leaf(_majority(labels))
    else:
        estimator = DecisionTreeClassifier(
            criterion="gini",
            max_depth=config.max_depth,
            min_samples_leaf=config.min_leaf,
            random_state=config.seed,
        )
        estimator.fit(table.features, labels)
        root = _convert(estimator, table.features)
    tree = PolicyTree(root, table.n_features, table.feature_names, arm_count=table.n_arms)
    log.info("Distilled policy tree: depth=%d, leaves=%d", tree.depth, len(tree.leaves()))
    return tree
