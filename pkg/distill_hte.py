"""
Distill-HTE: multitask explanation trees fitted to predicted treatment effects.

Splits minimise the weighted per-outcome squared error of the predicted
effects around node means. With honesty, splits come from one half of the
rows and leaf estimates from the other. Leaves without enough treated and
control estimation rows are pruned by collapsing their parent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, ClassVar, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm

from core import (
    MAX_CANDIDATES,
    BinaryTree,
    ConfigurationError,
    DimensionError,
    ExperimentTable,
    InsufficientOverlapError,
    InvalidContrastError,
    Node,
    PolicyTree,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    Segment,
    UndefinedVarianceError,
    ValidationError,
    best_split,
    format_threshold,
    grow_tree,
    improves,
    prefix_sums,
    resolve_weights,
    unroll_tree,
)

log = logging.getLogger(__name__)

LOSSES = ("weighted", "literal")


@dataclass(frozen=True, eq=False)
class EffectMatrix:
    """Predicted effects of arm `contrast_arm` over control, indexed [row, outcome]."""

    values: np.ndarray
    contrast_arm: int

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def pairwise_effects(preds: PotentialPredictionMatrix, k: int) -> EffectMatrix:
    if not 1 <= k < preds.arm_count:
        raise InvalidContrastError(f"contrast arm must lie in 1..{preds.arm_count - 1}, got {k}")
    values = preds.values[:, k, :] - preds.values[:, 0, :]
    values.setflags(write=False)
    return EffectMatrix(values, k)


def leaf_confidence_interval(samples: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval mean ± z·sd/√m (sample sd)."""
    low, high = _intervals(np.asarray(samples, dtype=float).reshape(-1, 1), level)
    return float(low[0]), float(high[0])


def _intervals(samples: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    m = samples.shape[0]
    if m < 2:
        raise UndefinedVarianceError(f"a confidence interval needs at least 2 samples, got {m}")
    if not 0 < level < 1:
        raise ConfigurationError(f"confidence level must lie in (0, 1), got {level}")
    mean = samples.mean(axis=0)
    half = norm.ppf(0.5 + level / 2.0) * samples.std(axis=0, ddof=1) / math.sqrt(m)
    return mean - half, mean + half


@dataclass(frozen=True)
class MtdtConfig:
    max_depth: Optional[int] = 3
    n_min: int = 10
    honest: bool = True
    seed: int = 0
    level: float = 0.95
    min_leaf: int = 1
    loss: str = "weighted"
    max_candidates: int = MAX_CANDIDATES

    def __post_init__(self):
        if self.n_min < 1:
            raise ConfigurationError(f"n_min must be >= 1, got {self.n_min}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigurationError(f"max_depth must be >= 0, got {self.max_depth}")


@dataclass(frozen=True)
class EffectLeaf:
    estimate: tuple[float, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    control_count: int
    treated_count: int
    n_rows: int
    pruned: bool = False

    def to_dict(self) -> dict:
        return {
            "estimate": list(self.estimate),
            "ci_low": list(self.ci_low),
            "ci_high": list(self.ci_high),
            "control_count": self.control_count,
            "treated_count": self.treated_count,
            "n_rows": self.n_rows,
            "pruned": self.pruned,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EffectLeaf":
        return cls(
            estimate=tuple(float(v) for v in data["estimate"]),
            ci_low=tuple(float(v) for v in data["ci_low"]),
            ci_high=tuple(float(v) for v in data["ci_high"]),
            control_count=int(data["control_count"]),
            treated_count=int(data["treated_count"]),
            n_rows=int(data["n_rows"]),
            pruned=bool(data.get("pruned", False)),
        )


@dataclass(frozen=True, eq=False)
class ExplanationTree(BinaryTree):
    """MTDT for one contrast; leaves carry per-outcome effect estimates and intervals."""

    contrast_arm: int = 1
    weights: tuple[float, ...] = ()
    level: float = 0.95
    honest: bool = True

    kind: ClassVar[str] = "explanation_tree"

    def _check_leaf(self, value: Any) -> None:
        if not isinstance(value, EffectLeaf):
            raise ValidationError(f"explanation leaf must carry effect estimates, got {value!r}")

    def scalarized_effect(self, leaf: EffectLeaf) -> float:
        return float(np.dot(leaf.estimate, self.weights or np.ones(len(leaf.estimate))))

    def predict(self, X: np.ndarray) -> np.ndarray:
        """(N, J) effect estimates of the leaf each row falls in."""
        estimates = np.array([leaf.value.estimate for leaf in self.root.iter_leaves()], dtype=float)
        return estimates[self.leaf_index(X)]

    def predict_scalarized(self, X: np.ndarray) -> np.ndarray:
        estimates = self.predict(X)
        c = np.asarray(self.weights, dtype=float) if self.weights else np.ones(estimates.shape[1])
        return estimates @ c

    def to_policy(self) -> PolicyTree:
        """Treat with the contrast arm where the scalarized leaf estimate is positive."""
        root = self.root.map_leaves(lambda leaf: self.contrast_arm if self.scalarized_effect(leaf) > 0 else 0)
        return PolicyTree(root, self.n_features, self.feature_names)

    def _leaf_text(self, value: Any) -> str:
        parts = ", ".join(
            f"{format_threshold(e)} [{format_threshold(lo)}, {format_threshold(hi)}]"
            for e, lo, hi in zip(value.estimate, value.ci_low, value.ci_high))
        return f"effect {parts}"

    def _leaf_to_dict(self, value: Any) -> dict:
        return value.to_dict()

    def _extra_dict(self) -> dict:
        return {
            "contrast_arm": self.contrast_arm,
            "weights": list(self.weights),
            "level": self.level,
            "honest": self.honest,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExplanationTree":
        cls._check_kind(data, cls.kind)
        return cls(
            root=cls._node_from_dict(data["root"], EffectLeaf.from_dict),
            n_features=int(data["n_features"]),
            feature_names=tuple(data.get("feature_names") or ()),
            contrast_arm=int(data.get("contrast_arm", 1)),
            weights=tuple(float(c) for c in data.get("weights", ())),
            level=float(data.get("level", 0.95)),
            honest=bool(data.get("honest", True)),
        )


# ---------------- fitting ----------------

def _sse(sums: np.ndarray, sumsq: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return sumsq - sums ** 2 / counts


class _MtdtFitter:
    def __init__(self, X, effects, c, config):
        self.X = X
        self.effects = effects
        self.c = c
        self.config = config

    def targets(self, rows: np.ndarray) -> np.ndarray:
        """Per-row regression targets: (n, J) weighted losses or (n, 1) scalarized."""
        t = self.effects[rows]
        if self.config.loss == "literal":
            return (t @ self.c).reshape(-1, 1)
        return t

    def loss_weights(self) -> np.ndarray:
        return np.ones(1) if self.config.loss == "literal" else self.c

    def node_loss(self, rows: np.ndarray) -> float:
        t = self.targets(rows)
        resid = t - t.mean(axis=0)
        return float(((resid ** 2).sum(axis=0) * self.loss_weights()).sum())

    def choose_split(self, rows: np.ndarray):
        if rows.size < 2:
            return None
        parent = self.node_loss(rows)
        centre = self.targets(rows).mean(axis=0)
        cw = self.loss_weights()

        def score(sorted_rows: np.ndarray, left_counts: np.ndarray) -> np.ndarray:
            t = self.targets(sorted_rows) - centre
            s = prefix_sums(t)
            q = prefix_sums(t ** 2)
            n = sorted_rows.size
            nl = left_counts.astype(float)[:, None]
            nr = n - nl
            with np.errstate(invalid="ignore", divide="ignore"):
                left = _sse(s[left_counts], q[left_counts], nl)
                right = _sse(s[-1] - s[left_counts], q[-1] - q[left_counts], nr)
            return -((left + right) @ cw)

        choice = best_split(self.X, rows, score, self.config.min_leaf, self.config.max_candidates)
        if choice is None or not improves(choice.score, -parent):
            return None
        return choice


def fit_mtdt(features: np.ndarray, effects: EffectMatrix, weights: Optional[ScalarizationWeights],
             table: ExperimentTable, config: Optional[MtdtConfig] = None) -> ExplanationTree:
    config = config or MtdtConfig()
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] != table.n_rows or effects.n_rows != table.n_rows:
        raise DimensionError(
            f"features ({X.shape}), effects ({effects.n_rows} rows) and table ({table.n_rows} rows) are not aligned")
    if X.shape[1] != table.n_features:
        raise DimensionError(f"features have {X.shape[1]} columns but the table has {table.n_features}")
    n = table.n_rows
    k = effects.contrast_arm
    c = resolve_weights(weights, effects.values.shape[1]).vector

    if config.n_min > n / 2:
        raise ConfigurationError(f"n_min={config.n_min} exceeds half of the {n} rows")
    for arm in (0, k):
        if not np.any(table.treatment == arm):
            raise InsufficientOverlapError(f"no rows in arm {arm}; effects cannot be explained", arm=arm)

    if config.honest:
        perm = np.random.default_rng(config.seed).permutation(n)
        half = n // 2
        structure, estimation = np.sort(perm[:n - half]), np.sort(perm[n - half:])
    else:
        structure = estimation = np.arange(n)

    fitter = _MtdtFitter(X, effects.values, c, config)
    shape = grow_tree(structure, config.max_depth, fitter.choose_split, lambda rows: None)

    treatment = table.treatment
    values = effects.values

    def overlaps(rows: np.ndarray) -> bool:
        w = treatment[rows]
        return int(np.sum(w == 0)) >= config.n_min and int(np.sum(w == k)) >= config.n_min

    def make_leaf(rows: np.ndarray, pruned: bool) -> Node:
        low, high = _intervals(values[rows], config.level)
        w = treatment[rows]
        return Node.leaf(EffectLeaf(
            estimate=tuple(float(v) for v in values[rows].mean(axis=0)),
            ci_low=tuple(float(v) for v in low),
            ci_high=tuple(float(v) for v in high),
            control_count=int(np.sum(w == 0)),
            treated_count=int(np.sum(w == k)),
            n_rows=int(rows.size),
            pruned=pruned,
        ))

    def settle(node: Node, rows: np.ndarray) -> Optional[Node]:
        # None marks a subtree whose rows lack overlap
        if node.is_leaf:
            return make_leaf(rows, pruned=False) if overlaps(rows) else None
        go_left = X[rows, node.feature] < node.threshold
        left = settle(node.left, rows[go_left])
        right = settle(node.right, rows[~go_left])
        if left is None or right is None:
            return make_leaf(rows, pruned=True) if overlaps(rows) else None
        return Node.split(node.feature, node.threshold, left, right)

    root = settle(shape, estimation)
    if root is None:
        raise InsufficientOverlapError(
            f"fewer than {config.n_min} control or arm-{k} estimation rows in the whole table", arm=k)
    tree = ExplanationTree(root, table.n_features, table.feature_names,
                           contrast_arm=k, weights=tuple(c), level=config.level, honest=config.honest)
    log.info("Explanation tree for arm %d: depth=%d, leaves=%d (structure rows=%d, estimation rows=%d)",
             k, tree.depth, len(tree.leaves()), structure.size, estimation.size)
    return tree


def explain_all(table: ExperimentTable, preds: PotentialPredictionMatrix,
                weights: Optional[ScalarizationWeights] = None,
                config: Optional[MtdtConfig] = None) -> list[ExplanationTree]:
    """One explanation tree per contrast k = 1..K."""
    preds.check_compatible(table)
    return [fit_mtdt(table.features, pairwise_effects(preds, k), weights, table, config)
            for k in range(1, table.n_arms)]


def distillation_loss(tree: ExplanationTree, X: np.ndarray, effects: EffectMatrix,
                      weights: Optional[ScalarizationWeights] = None) -> float:
    """(1/N)·Σ_i Σ_j c_j (T_ij − F_j(X_i))²."""
    c = resolve_weights(weights, effects.values.shape[1]).vector
    resid = effects.values - tree.predict(X)
    return float(((resid ** 2) @ c).mean())


# ---------------- reporting ----------------

@dataclass(frozen=True, eq=False)
class EffectSegment:
    segment: Segment
    leaf: EffectLeaf
    scalarized_effect: float

    def to_dict(self) -> dict:
        return {**self.segment.to_dict(), **self.leaf.to_dict(), "scalarized_effect": self.scalarized_effect}


def segment_report(tree: ExplanationTree, table: ExperimentTable) -> list[EffectSegment]:
    """Leaves holding rows of `table`, ascending by scalarized effect."""
    out = [EffectSegment(s, s.leaf, tree.scalarized_effect(s.leaf)) for s in unroll_tree(tree, table)]
    return sorted(out, key=lambda e: e.scalarized_effect)


def render_barplot(report: Sequence[EffectSegment], width: int = 30) -> str:
    """Horizontal ASCII bars of scalarized effect per segment, zero in the middle."""
    if not report:
        return ""
    scale = max(abs(e.scalarized_effect) for e in report) or 1.0
    labels = [e.segment.describe_ranges() for e in report]
    pad = max(len(label) for label in labels)
    lines = []
    for label, e in zip(labels, report):
        n_chars = int(round(width * abs(e.scalarized_effect) / scale))
        if e.scalarized_effect < 0:
            bar = " " * (width - n_chars) + "#" * n_chars + "|" + " " * width
        else:
            bar = " " * width + "|" + "#" * n_chars + " " * (width - n_chars)
        ci = ", ".join(f"[{format_threshold(lo)}, {format_threshold(hi)}]"
                       for lo, hi in zip(e.leaf.ci_low, e.leaf.ci_high))
        lines.append(f"{label.ljust(pad)}  {bar}  {format_threshold(e.scalarized_effect)} "
                     f"CI {ci} (n={e.segment.size})")
    return "\n".join(lines)
