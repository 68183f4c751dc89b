"""
Shared data model for experiment tables, HTE predictions and tree policies.

This module:
 - Defines the error hierarchy every other module raises
 - Holds ExperimentTable, PotentialPredictionMatrix and ScalarizationWeights
 - Implements the binary tree shared by policy, explanation and guidance trees
 - Provides scalarize, apply_policy, split_three_way and unroll_tree
 - Provides the split-candidate scan and breadth-wise growth used by every learner

Routing rule for every tree: x[feature] < threshold goes left, anything else
(ties included) goes right.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Iterator, Mapping, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

log = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
MAX_CANDIDATES = 256
IMPROVEMENT_RTOL = 1e-10
TREE_FORMAT_VERSION = 1


# ---------------- errors ----------------

class HtePolicyError(Exception):
    """Base class for every input, configuration or data failure in this package."""


class DimensionError(HtePolicyError, ValueError):
    pass


class ConfigurationError(HtePolicyError, ValueError):
    pass


class ValidationError(HtePolicyError, ValueError):
    """Bad input value. Names the offending row and column when known."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if column is not None:
            where.append(f"column {column!r}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(HtePolicyError):
    def __init__(self, message: str, arm: Optional[int] = None):
        super().__init__(message)
        self.arm = arm


class InsufficientOverlapError(InsufficientDataError):
    pass


class InvalidContrastError(HtePolicyError, ValueError):
    pass


class UndefinedVarianceError(HtePolicyError, ValueError):
    pass


# ---------------- helpers ----------------

def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def check_finite(values: np.ndarray, columns: Sequence[str], what: str) -> None:
    """Raise ValidationError naming the first non-finite cell of a row-major array."""
    flat = values.reshape(values.shape[0], -1)
    bad = ~np.isfinite(flat)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(f"non-finite value in {what}", row=int(row), column=columns[int(col)])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def improves(candidate: float, current: float) -> bool:
    """Strict improvement, with a relative slack for summation-order rounding."""
    return candidate > current + IMPROVEMENT_RTOL * max(1.0, abs(current))


def arm_label(arm: int) -> str:
    return "control" if arm == 0 else f"treatment {arm}"


def format_threshold(value: float) -> str:
    return f"{value:.6g}"


# ---------------- scalarization ----------------

@dataclass(frozen=True)
class ScalarizationWeights:
    """Linear weights c_1..c_J collapsing J outcomes into one."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(c) for c in self.weights)
        if not w:
            raise ConfigurationError("at least one scalarization weight is required")
        if not all(math.isfinite(c) for c in w):
            raise ConfigurationError(f"scalarization weights must be finite, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def ones(cls, n_outcomes: int) -> "ScalarizationWeights":
        return cls((1.0,) * n_outcomes)

    @classmethod
    def parse(cls, text: str) -> "ScalarizationWeights":
        try:
            return cls(tuple(float(part) for part in text.split(",") if part.strip()))
        except ValueError as e:
            raise ConfigurationError(f"cannot parse weights {text!r}: {e}") from e

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def __len__(self) -> int:
        return len(self.weights)

    def check(self, n_outcomes: int) -> "ScalarizationWeights":
        if len(self) != n_outcomes:
            raise DimensionError(f"{len(self)} weights given for {n_outcomes} outcomes")
        return self


def resolve_weights(weights: Optional[ScalarizationWeights], n_outcomes: int) -> ScalarizationWeights:
    if weights is None:
        return ScalarizationWeights.ones(n_outcomes)
    return weights.check(n_outcomes)


def scalarize(outcomes_row: Sequence[float], weights: Optional[ScalarizationWeights] = None) -> float:
    """Weighted sum of one row of outcomes."""
    y = np.asarray(outcomes_row, dtype=float)
    if y.ndim != 1:
        raise DimensionError(f"expected one row of outcomes, got shape {y.shape}")
    return float(y @ resolve_weights(weights, y.shape[0]).vector)


def scalarize_array(values: np.ndarray, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
    """Scalarize the last axis of any (..., J) array."""
    values = np.asarray(values, dtype=float)
    return values @ resolve_weights(weights, values.shape[-1]).vector


# ---------------- experiment table ----------------

@dataclass(frozen=True, eq=False)
class ExperimentTable:
    """Rows of (features, arm, outcomes, optional propensity). Arm 0 is control."""

    features: np.ndarray
    treatment: np.ndarray
    outcomes: np.ndarray
    propensity: Optional[np.ndarray] = None
    feature_names: tuple[str, ...] = ()
    arm_count: Optional[int] = None

    def __post_init__(self):
        X = np.array(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DimensionError(f"features must be an N x P matrix, got shape {X.shape}")
        n = X.shape[0]
        if n < 1:
            raise ValidationError("an experiment table needs at least one row")

        names = tuple(self.feature_names) or tuple(f"feature{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DimensionError(f"{len(names)} feature names for {X.shape[1]} features")
        if len(set(names)) != len(names):
            raise ValidationError("feature names must be distinct")
        check_finite(X, names, "features")

        w_raw = np.asarray(self.treatment, dtype=float)
        if w_raw.shape != (n,):
            raise DimensionError(f"treatment has shape {w_raw.shape}, expected ({n},)")
        bad = ~np.isfinite(w_raw) | (w_raw < 0) | (w_raw != np.round(w_raw))
        if bad.any():
            raise ValidationError("arm indices must be non-negative integers",
                                  row=int(np.flatnonzero(bad)[0]), column="w")
        w = w_raw.astype(np.int64)

        Y = np.array(self.outcomes, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        if Y.ndim != 2 or Y.shape[0] != n:
            raise DimensionError(f"outcomes have shape {Y.shape}, expected ({n}, J)")
        check_finite(Y, [f"y{j}" for j in range(Y.shape[1])], "outcomes")

        arm_count = int(w.max()) + 1 if self.arm_count is None else int(self.arm_count)
        if w.max() >= arm_count:
            raise ValidationError(f"arm index exceeds K={arm_count - 1}",
                                  row=int(np.argmax(w >= arm_count)), column="w")

        p = None
        if self.propensity is not None:
            p = np.array(self.propensity, dtype=float)
            if p.shape != (n,):
                raise DimensionError(f"propensity has shape {p.shape}, expected ({n},)")
            bad = ~np.isfinite(p) | (p <= 0) | (p > 1)
            if bad.any():
                raise ValidationError("propensity must lie in (0, 1]",
                                      row=int(np.flatnonzero(bad)[0]), column="p")
            p = _readonly(p)

        object.__setattr__(self, "features", _readonly(X))
        object.__setattr__(self, "treatment", _readonly(w))
        object.__setattr__(self, "outcomes", _readonly(Y))
        object.__setattr__(self, "propensity", p)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "arm_count", arm_count)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_outcomes(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_arms(self) -> int:
        return self.arm_count

    def arm_sizes(self) -> np.ndarray:
        return np.bincount(self.treatment, minlength=self.arm_count)

    def scalarized_outcomes(self, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
        return scalarize_array(self.outcomes, weights)

    def subset(self, rows: np.ndarray) -> "ExperimentTable":
        rows = np.asarray(rows, dtype=np.int64)
        return ExperimentTable(
            features=self.features[rows],
            treatment=self.treatment[rows],
            outcomes=self.outcomes[rows],
            propensity=None if self.propensity is None else self.propensity[rows],
            feature_names=self.feature_names,
            arm_count=self.arm_count,
        )

    def to_frame(self) -> pd.DataFrame:
        data = {f"f_{name}": self.features[:, i] for i, name in enumerate(self.feature_names)}
        data["w"] = self.treatment
        for j in range(self.n_outcomes):
            data[f"y{j}"] = self.outcomes[:, j]
        if self.propensity is not None:
            data["p"] = self.propensity
        return pd.DataFrame(data)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, arm_count: Optional[int] = None) -> "ExperimentTable":
        feature_cols = [c for c in frame.columns if str(c).startswith("f_")]
        if not feature_cols:
            raise ValidationError("no feature columns (expected f_<name>)")
        if "w" not in frame.columns:
            raise ValidationError("missing arm column", column="w")
        outcome_cols = sorted((c for c in frame.columns if re.fullmatch(r"y\d+", str(c))),
                              key=lambda c: int(c[1:]))
        if not outcome_cols:
            raise ValidationError("missing outcome column", column="y0")
        for j, c in enumerate(outcome_cols):
            if c != f"y{j}":
                raise ValidationError("outcome columns must be y0..y{J-1}", column=f"y{j}")

        def numeric(cols):
            return frame[cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)

        return cls(
            features=numeric(feature_cols),
            treatment=numeric(["w"])[:, 0],
            outcomes=numeric(outcome_cols),
            propensity=numeric(["p"])[:, 0] if "p" in frame.columns else None,
            feature_names=tuple(str(c)[2:] for c in feature_cols),
            arm_count=arm_count,
        )


# ---------------- predictions ----------------

def prediction_column(outcome: int, arm: int) -> str:
    return f"yhat_{outcome}_{arm}"


def column_arm_count(columns: Sequence[Any], prefix: str) -> Optional[int]:
    """1 + the largest arm k among `<prefix>_<j>_<k>` columns; None when there are none."""
    pattern = re.compile(rf"{prefix}_(\d+)_(\d+)")
    arms = [int(m.group(2)) for m in map(pattern.fullmatch, map(str, columns)) if m]
    return 1 + max(arms) if arms else None


@dataclass(frozen=True, eq=False)
class PotentialPredictionMatrix:
    """Predicted potential outcomes, indexed [row, arm, outcome]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3:
            raise DimensionError(f"predictions must be N x (K+1) x J, got shape {v.shape}")
        columns = [prediction_column(j, k) for k in range(v.shape[1]) for j in range(v.shape[2])]
        if v.shape[0]:
            check_finite(v, columns, "predictions")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def arm_count(self) -> int:
        return self.values.shape[1]

    @property
    def outcome_count(self) -> int:
        return self.values.shape[2]

    def scalarized(self, weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
        """(N, K+1) matrix of scalarized predicted outcomes."""
        return scalarize_array(self.values, weights)

    def take(self, rows: np.ndarray) -> "PotentialPredictionMatrix":
        return PotentialPredictionMatrix(self.values[np.asarray(rows, dtype=np.int64)])

    def check_compatible(self, table: ExperimentTable) -> "PotentialPredictionMatrix":
        if self.n_rows != table.n_rows:
            raise DimensionError(f"predictions have {self.n_rows} rows but the table has {table.n_rows}")
        if self.arm_count != table.n_arms:
            raise DimensionError(f"predictions cover {self.arm_count} arms but the table has {table.n_arms}")
        if self.outcome_count != table.n_outcomes:
            raise DimensionError(
                f"predictions cover {self.outcome_count} outcomes but the table has {table.n_outcomes}")
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            prediction_column(j, k): self.values[:, k, j]
            for j in range(self.outcome_count) for k in range(self.arm_count)
        })


# ---------------- trees ----------------

@dataclass(frozen=True)
class Clause:
    feature: int
    op: str
    threshold: float

    def holds(self, X: np.ndarray) -> np.ndarray:
        below = X[:, self.feature] < self.threshold
        return below if self.op == "<" else ~below

    def describe(self, names: Sequence[str]) -> str:
        return f"{names[self.feature]} {self.op} {format_threshold(self.threshold)}"

    def to_dict(self) -> dict:
        return {"feature": self.feature, "op": self.op, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Clause":
        if data["op"] not in ("<", ">="):
            raise ValidationError(f"unknown clause operator {data['op']!r}")
        return cls(int(data["feature"]), data["op"], float(data["threshold"]))


def describe_predicate(clauses: Sequence[Clause], names: Sequence[str]) -> str:
    if not clauses:
        return "all rows"
    return " and ".join(c.describe(names) for c in clauses)


def describe_ranges(clauses: Sequence[Clause], names: Sequence[str]) -> str:
    """Merge a path's clauses into one range per feature, e.g. '4.5 <= days < 10.5'."""
    if not clauses:
        return "all rows"
    bounds: dict[int, list[Optional[float]]] = {}
    for c in clauses:
        low, high = bounds.setdefault(c.feature, [None, None])
        if c.op == "<":
            bounds[c.feature][1] = c.threshold if high is None else min(high, c.threshold)
        else:
            bounds[c.feature][0] = c.threshold if low is None else max(low, c.threshold)
    parts = []
    for f in sorted(bounds):
        low, high = bounds[f]
        text = names[f]
        if low is not None:
            text = f"{format_threshold(low)} <= {text}"
        if high is not None:
            text = f"{text} < {format_threshold(high)}"
        parts.append(text)
    return " and ".join(parts)


def predicate_mask(clauses: Sequence[Clause], X: np.ndarray) -> np.ndarray:
    mask = np.ones(X.shape[0], dtype=bool)
    for c in clauses:
        mask &= c.holds(X)
    return mask


@dataclass(frozen=True)
class Node:
    """Internal node (feature, threshold, left, right) or leaf (value)."""

    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    value: Any = None

    @classmethod
    def leaf(cls, value: Any) -> "Node":
        return cls(value=value)

    @classmethod
    def split(cls, feature: int, threshold: float, left: "Node", right: "Node") -> "Node":
        return cls(feature=int(feature), threshold=float(threshold), left=left, right=right)

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def iter_leaves(self) -> Iterator["Node"]:
        if self.is_leaf:
            yield self
        else:
            yield from self.left.iter_leaves()
            yield from self.right.iter_leaves()

    def iter_internal(self) -> Iterator["Node"]:
        if not self.is_leaf:
            yield self
            yield from self.left.iter_internal()
            yield from self.right.iter_internal()

    def paths(self, prefix: tuple[Clause, ...] = ()) -> Iterator[tuple[tuple[Clause, ...], "Node"]]:
        """(root-to-leaf clauses, leaf) in left-to-right leaf order."""
        if self.is_leaf:
            yield prefix, self
            return
        yield from self.left.paths(prefix + (Clause(self.feature, "<", self.threshold),))
        yield from self.right.paths(prefix + (Clause(self.feature, ">=", self.threshold),))

    def route(self, x: np.ndarray) -> "Node":
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] < node.threshold else node.right
        return node

    def map_leaves(self, fn: Callable[[Any], Any]) -> "Node":
        if self.is_leaf:
            return Node.leaf(fn(self.value))
        return Node.split(self.feature, self.threshold, self.left.map_leaves(fn), self.right.map_leaves(fn))


class Policy(Protocol):
    """Anything that maps an N x P feature matrix to N arm indices."""

    n_features: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        ...


def check_features(X: np.ndarray, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionError(f"expected {n_features} features, got shape {X.shape}")
    return X


def assign(policy: Policy, X: np.ndarray) -> np.ndarray:
    """Arm chosen by `policy` for every row of X."""
    X = check_features(X, policy.n_features)
    return np.asarray(policy.predict(X), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class BinaryTree:
    """Axis-aligned binary tree over P features; subclasses define the leaf payload."""

    root: Node
    n_features: int
    feature_names: tuple[str, ...] = ()

    kind: ClassVar[str] = "tree"

    def __post_init__(self):
        names = tuple(self.feature_names) or tuple(f"feature{i}" for i in range(self.n_features))
        if len(names) != self.n_features:
            raise DimensionError(f"{len(names)} feature names for {self.n_features} features")
        object.__setattr__(self, "feature_names", names)
        for node in self.root.iter_internal():
            if not 0 <= node.feature < self.n_features:
                raise ValidationError(f"split feature {node.feature} outside 0..{self.n_features - 1}")
            if not math.isfinite(node.threshold):
                raise ValidationError(f"non-finite split threshold on feature {node.feature}")
        for leaf in self.root.iter_leaves():
            self._check_leaf(leaf.value)

    def _check_leaf(self, value: Any) -> None:
        pass

    @property
    def depth(self) -> int:
        return self.root.depth()

    def leaves(self) -> list[Node]:
        return list(self.root.iter_leaves())

    def paths(self) -> list[tuple[tuple[Clause, ...], Node]]:
        return list(self.root.paths())

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        """Left-to-right ordinal of the leaf every row of X lands in."""
        X = check_features(X, self.n_features)
        out = np.empty(X.shape[0], dtype=np.int64)
        counter = itertools.count()

        def walk(node: Node, rows: np.ndarray) -> None:
            if node.is_leaf:
                out[rows] = next(counter)
                return
            go_left = X[rows, node.feature] < node.threshold
            walk(node.left, rows[go_left])
            walk(node.right, rows[~go_left])

        walk(self.root, np.arange(X.shape[0]))
        return out

    def leaf_values(self, X: np.ndarray) -> list:
        values = [leaf.value for leaf in self.root.iter_leaves()]
        return [values[i] for i in self.leaf_index(X)]

    # ---- text rendering ----

    def _leaf_text(self, value: Any) -> str:
        return str(value)

    def render_text(self) -> str:
        """Plain if-else rendering, e.g. 'If feature0 < -0.019, assign control. Otherwise, ...'."""
        return "\n".join(self._render(self.root, 0))

    def _render(self, node: Node, indent: int) -> list[str]:
        pad = "  " * indent
        if node.is_leaf:
            text = self._leaf_text(node.value)
            return [pad + text[:1].upper() + text[1:] + (" for everyone." if indent == 0 else ".")]
        cond = f"{self.feature_names[node.feature]} < {format_threshold(node.threshold)}"
        if node.left.is_leaf and node.right.is_leaf:
            return [pad + f"If {cond}, {self._leaf_text(node.left.value)}. "
                          f"Otherwise, {self._leaf_text(node.right.value)}."]
        return ([pad + f"If {cond}:"] + self._render(node.left, indent + 1)
                + [pad + "Otherwise:"] + self._render(node.right, indent + 1))

    # ---- serialization ----

    def _leaf_to_dict(self, value: Any) -> dict:
        raise NotImplementedError

    @classmethod
    def _leaf_from_dict(cls, data: Mapping) -> Any:
        raise NotImplementedError

    def _node_to_dict(self, node: Node) -> dict:
        if node.is_leaf:
            return {"leaf": self._leaf_to_dict(node.value)}
        return {
            "feature": node.feature,
            "feature_name": self.feature_names[node.feature],
            "threshold": node.threshold,
            "left": self._node_to_dict(node.left),
            "right": self._node_to_dict(node.right),
        }

    @classmethod
    def _node_from_dict(cls, data: Mapping, leaf_from_dict: Callable[[Mapping], Any]) -> Node:
        if "leaf" in data:
            return Node.leaf(leaf_from_dict(data["leaf"]))
        try:
            return Node.split(
                data["feature"], data["threshold"],
                cls._node_from_dict(data["left"], leaf_from_dict),
                cls._node_from_dict(data["right"], leaf_from_dict),
            )
        except KeyError as e:
            raise ValidationError(f"tree node is missing field {e.args[0]!r}") from e

    def _extra_dict(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "version": TREE_FORMAT_VERSION,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "root": self._node_to_dict(self.root),
            **self._extra_dict(),
        }

    @staticmethod
    def _check_kind(data: Mapping, kind: str) -> None:
        if data.get("kind") != kind:
            raise ValidationError(f"expected a {kind} document, got {data.get('kind')!r}")


@dataclass(frozen=True, eq=False)
class PolicyTree(BinaryTree):
    """Deterministic policy: every leaf names an arm in {0..K}."""

    arm_count: Optional[int] = None

    kind: ClassVar[str] = "policy_tree"

    def _check_leaf(self, value: Any) -> None:
        if not isinstance(value, (int, np.integer)) or value < 0:
            raise ValidationError(f"policy leaf must be an arm index, got {value!r}")
        if self.arm_count is not None and value >= self.arm_count:
            raise ValidationError(f"policy leaf arm {value} exceeds K={self.arm_count - 1}")

    def predict(self, X: np.ndarray) -> np.ndarray:
        arms = np.array([leaf.value for leaf in self.root.iter_leaves()], dtype=np.int64)
        return arms[self.leaf_index(X)]

    def _leaf_text(self, value: Any) -> str:
        return f"assign {arm_label(value)}"

    def _leaf_to_dict(self, value: Any) -> dict:
        return {"arm": int(value)}

    def _extra_dict(self) -> dict:
        return {"arm_count": self.arm_count}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicyTree":
        cls._check_kind(data, cls.kind)
        return cls(
            root=cls._node_from_dict(data["root"], lambda leaf: int(leaf["arm"])),
            n_features=int(data["n_features"]),
            feature_names=tuple(data.get("feature_names") or ()),
            arm_count=data.get("arm_count"),
        )


@dataclass(frozen=True, eq=False)
class ConstantPolicy:
    """'Assign all to treatment k' baseline."""

    arm: int
    n_features: int

    kind: ClassVar[str] = "constant_policy"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.arm, dtype=np.int64)

    def render_text(self) -> str:
        return f"Assign {arm_label(self.arm)} for everyone."

    def to_dict(self) -> dict:
        return {"kind": self.kind, "version": TREE_FORMAT_VERSION, "arm": self.arm, "n_features": self.n_features}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConstantPolicy":
        BinaryTree._check_kind(data, cls.kind)
        return cls(int(data["arm"]), int(data["n_features"]))


def apply_policy(policy: Policy, x: Sequence[float]) -> int:
    """Arm for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != policy.n_features:
        raise DimensionError(f"expected {policy.n_features} features, got shape {x.shape}")
    if isinstance(policy, PolicyTree):
        return int(policy.root.route(x).value)
    return int(policy.predict(x.reshape(1, -1))[0])


# ---------------- segments ----------------

@dataclass(frozen=True, eq=False)
class Segment:
    """A tree leaf unrolled against a table: its rows, its path and per-arm statistics."""

    row_indices: np.ndarray
    predicate: tuple[Clause, ...]
    arm_counts: tuple[int, ...]
    arm_means: tuple[Optional[float], ...]
    feature_names: tuple[str, ...]
    leaf: Any = None

    @property
    def size(self) -> int:
        return int(self.row_indices.size)

    def describe(self) -> str:
        return describe_predicate(self.predicate, self.feature_names)

    def describe_ranges(self) -> str:
        return describe_ranges(self.predicate, self.feature_names)

    def contains(self, X: np.ndarray) -> np.ndarray:
        return predicate_mask(self.predicate, X)

    def to_dict(self) -> dict:
        return {
            "predicate": [c.to_dict() for c in self.predicate],
            "description": self.describe(),
            "ranges": self.describe_ranges(),
            "size": self.size,
            "arm_counts": list(self.arm_counts),
            "arm_means": list(self.arm_means),
        }


def make_segment(table: ExperimentTable, rows: np.ndarray, predicate: tuple[Clause, ...],
                 weights: Optional[ScalarizationWeights] = None, leaf: Any = None) -> Segment:
    rows = _readonly(np.sort(np.asarray(rows, dtype=np.int64)))
    if rows.size == 0:
        raise ValidationError("a segment needs at least one row")
    y = table.scalarized_outcomes(weights)[rows]
    w = table.treatment[rows]
    counts = np.bincount(w, minlength=table.n_arms)
    sums = np.bincount(w, weights=y, minlength=table.n_arms)
    means = tuple(float(s / c) if c else None for s, c in zip(sums, counts))
    return Segment(rows, predicate, tuple(int(c) for c in counts), means, table.feature_names, leaf)


def unroll_tree(tree: BinaryTree, table: ExperimentTable,
                weights: Optional[ScalarizationWeights] = None) -> list[Segment]:
    """One segment per leaf holding rows of `table`, in left-to-right leaf order."""
    if tree.n_features != table.n_features:
        raise DimensionError(f"tree expects {tree.n_features} features but the table has {table.n_features}")
    ids = tree.leaf_index(table.features)
    segments = []
    for ordinal, (clauses, leaf) in enumerate(tree.paths()):
        rows = np.flatnonzero(ids == ordinal)
        if rows.size:
            segments.append(make_segment(table, rows, clauses, weights, leaf.value))
    return segments


# ---------------- splitting ----------------

@dataclass(frozen=True, eq=False)
class SplitBundle:
    train: ExperimentTable
    validation: ExperimentTable
    test: ExperimentTable
    train_index: np.ndarray
    validation_index: np.ndarray
    test_index: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return self.train_index.size, self.validation_index.size, self.test_index.size


def split_three_way(table: ExperimentTable, test_frac: float = 0.4, val_frac_of_rest: float = 0.3,
                    seed: int = 0) -> SplitBundle:
    """Seeded train/validation/test partition: test = round(N*test_frac), validation = round(rest*val_frac)."""
    for name, frac in (("test_frac", test_frac), ("val_frac_of_rest", val_frac_of_rest)):
        if not 0 < frac < 1:
            raise ConfigurationError(f"{name} must lie in (0, 1), got {frac}")
    n = table.n_rows
    n_test = round_half_up(n * test_frac)
    n_val = round_half_up((n - n_test) * val_frac_of_rest)
    n_train = n - n_test - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigurationError(
            f"splitting {n} rows leaves an empty part (train={n_train}, validation={n_val}, test={n_test})")

    rest, test = train_test_split(np.arange(n), test_size=n_test, random_state=seed, shuffle=True)
    train, val = train_test_split(rest, test_size=n_val, random_state=seed, shuffle=True)
    train, val, test = (_readonly(np.sort(part)) for part in (train, val, test))
    log.debug("split %d rows into train=%d validation=%d test=%d (seed=%s)", n, train.size, val.size, test.size, seed)
    return SplitBundle(table.subset(train), table.subset(val), table.subset(test), train, val, test)


# ---------------- split search ----------------

def candidate_thresholds(values: np.ndarray, max_candidates: int = MAX_CANDIDATES) -> np.ndarray:
    """Midpoints between consecutive distinct values, thinned to row quantiles above the cap."""
    uniq, counts = np.unique(values, return_counts=True)
    if uniq.size < 2:
        return np.empty(0)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    if mids.size > max_candidates:
        rows_below = np.cumsum(counts)[:-1]
        targets = values.size * np.arange(1, max_candidates + 1) / (max_candidates + 1)
        picks = np.unique(np.minimum(np.searchsorted(rows_below, targets), mids.size - 1))
        mids = mids[picks]
    return mids


@dataclass(frozen=True, eq=False)
class FeatureScan:
    """Rows of a node sorted by one feature, with the candidate cuts over them."""

    feature: int
    sorted_rows: np.ndarray
    thresholds: np.ndarray
    left_counts: np.ndarray


def scan_features(X: np.ndarray, rows: np.ndarray, max_candidates: int = MAX_CANDIDATES) -> Iterator[FeatureScan]:
    for f in range(X.shape[1]):
        vals = X[rows, f]
        order = np.argsort(vals, kind="stable")
        sorted_vals = vals[order]
        thresholds = candidate_thresholds(sorted_vals, max_candidates)
        if thresholds.size == 0:
            continue
        left_counts = np.searchsorted(sorted_vals, thresholds, side="left")
        yield FeatureScan(f, rows[order], thresholds, left_counts)


def prefix_sums(stats: np.ndarray) -> np.ndarray:
    """Cumulative sums along axis 0 with a leading zero row."""
    stats = np.asarray(stats, dtype=float)
    out = np.zeros((stats.shape[0] + 1,) + stats.shape[1:])
    np.cumsum(stats, axis=0, out=out[1:])
    return out


@dataclass(frozen=True, eq=False)
class SplitChoice:
    feature: int
    threshold: float
    score: float
    left_rows: np.ndarray
    right_rows: np.ndarray


SplitScorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def best_split(X: np.ndarray, rows: np.ndarray, score_fn: SplitScorer, min_leaf: int = 1,
               max_candidates: int = MAX_CANDIDATES) -> Optional[SplitChoice]:
    """Highest-scoring (feature, threshold); ties go to the lowest feature, then lowest threshold.

    `score_fn(sorted_rows, left_counts)` scores every cut of one feature and
    returns -inf for cuts it deems ineligible.
    """
    best: Optional[SplitChoice] = None
    n = rows.size
    for scan in scan_features(X, rows, max_candidates):
        valid = (scan.left_counts >= min_leaf) & (n - scan.left_counts >= min_leaf)
        if not valid.any():
            continue
        scores = np.where(valid, score_fn(scan.sorted_rows, scan.left_counts), -np.inf)
        i = int(np.argmax(scores))
        if not np.isfinite(scores[i]):
            continue
        if best is None or scores[i] > best.score:
            cut = int(scan.left_counts[i])
            best = SplitChoice(scan.feature, float(scan.thresholds[i]), float(scores[i]),
                               np.sort(scan.sorted_rows[:cut]), np.sort(scan.sorted_rows[cut:]))
    return best


@dataclass
class _Pending:
    rows: np.ndarray
    depth: int
    choice: Optional[SplitChoice] = None
    children: list = field(default_factory=list)


def grow_tree(rows: np.ndarray, max_depth: Optional[int],
              choose_split: Callable[[np.ndarray], Optional[SplitChoice]],
              make_leaf: Callable[[np.ndarray], Any]) -> Node:
    """Breadth-wise greedy growth: every node of one depth is settled before the next depth."""
    if max_depth is not None and max_depth < 0:
        raise ConfigurationError(f"max depth must be >= 0, got {max_depth}")
    root = _Pending(np.asarray(rows, dtype=np.int64), 0)
    frontier = [root]
    while frontier:
        nxt = []
        for item in frontier:
            if max_depth is not None and item.depth >= max_depth:
                continue
            item.choice = choose_split(item.rows)
            if item.choice is not None:
                item.children = [_Pending(item.choice.left_rows, item.depth + 1),
                                 _Pending(item.choice.right_rows, item.depth + 1)]
                nxt.extend(item.children)
        frontier = nxt

    def assemble(item: _Pending) -> Node:
        if item.choice is None:
            return Node.leaf(make_leaf(item.rows))
        return Node.split(item.choice.feature, item.choice.threshold,
                          assemble(item.children[0]), assemble(item.children[1]))

    return assemble(root)
