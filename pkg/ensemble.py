"""
Interpretable ensembles: shallow guidance trees whose leaves pick a constituent policy.

guide_uniform_explore scores policies on a simulated uniform exploration of
the constituents; guide_ope scores them with inverse propensity weighting.
Both then run the greedy policy-tree search over per-row policy values, so a
leaf names the policy with the best summed value inside it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, ClassVar, Mapping, Optional, Sequence, Union

import numpy as np

from core import (
    MAX_CANDIDATES,
    BinaryTree,
    ConfigurationError,
    DimensionError,
    ExperimentTable,
    Policy,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    ValidationError,
    apply_policy,
    assign,
    check_features,
)
from policy_greedy import GreedyConfig, search_tree

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GuidanceTree(BinaryTree):
    """Leaves hold 0-based positions into `policies`."""

    policies: tuple = ()
    policy_names: tuple[str, ...] = ()

    kind: ClassVar[str] = "guidance_tree"

    def __post_init__(self):
        names = tuple(self.policy_names) or tuple(f"policy{q}" for q in range(len(self.policies)))
        if len(names) != len(self.policies):
            raise DimensionError(f"{len(names)} names for {len(self.policies)} policies")
        object.__setattr__(self, "policy_names", names)
        for q, policy in enumerate(self.policies):
            if policy.n_features != self.n_features:
                raise DimensionError(
                    f"policy {names[q]} expects {policy.n_features} features, guidance tree has {self.n_features}")
        super().__post_init__()

    def _check_leaf(self, value: Any) -> None:
        if not isinstance(value, (int, np.integer)) or not 0 <= value < len(self.policies):
            raise ValidationError(f"guidance leaf {value!r} does not name one of {len(self.policies)} policies")

    def choose(self, X: np.ndarray) -> np.ndarray:
        """Constituent index per row."""
        picks = np.array([leaf.value for leaf in self.root.iter_leaves()], dtype=np.int64)
        return picks[self.leaf_index(X)]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = check_features(X, self.n_features)
        chosen = self.choose(X)
        arms = np.empty(X.shape[0], dtype=np.int64)
        for q in np.unique(chosen):
            rows = chosen == q
            arms[rows] = assign(self.policies[q], X[rows])
        return arms

    def _leaf_text(self, value: Any) -> str:
        return f"follow {self.policy_names[value]}"

    def _leaf_to_dict(self, value: Any) -> dict:
        return {"policy": f"policy{int(value)}"}

    def _extra_dict(self) -> dict:
        return {
            "policies": [
                {"id": f"policy{q}", "name": name, "policy": policy.to_dict()}
                for q, (name, policy) in enumerate(zip(self.policy_names, self.policies))
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping, policy_from_dict: Callable[[Mapping], Any]) -> "GuidanceTree":
        cls._check_kind(data, cls.kind)
        entries = data.get("policies") or []
        ids = {entry["id"]: q for q, entry in enumerate(entries)}

        def leaf(payload: Mapping) -> int:
            if payload.get("policy") not in ids:
                raise ValidationError(f"guidance leaf references unknown policy {payload.get('policy')!r}")
            return ids[payload["policy"]]

        return cls(
            root=cls._node_from_dict(data["root"], leaf),
            n_features=int(data["n_features"]),
            feature_names=tuple(data.get("feature_names") or ()),
            policies=tuple(policy_from_dict(entry["policy"]) for entry in entries),
            policy_names=tuple(entry.get("name", entry["id"]) for entry in entries),
        )


def apply_ensemble(gt: GuidanceTree, x: Sequence[float]) -> int:
    """Route x to a constituent policy and return that policy's arm."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != gt.n_features:
        raise DimensionError(f"expected {gt.n_features} features, got shape {x.shape}")
    return apply_policy(gt.policies[int(gt.root.route(x).value)], x)


# ---------------- off-policy evaluation ----------------

def resolve_propensities(table: ExperimentTable,
                         propensities: Union[None, float, Sequence[float]] = None) -> np.ndarray:
    """Argument, else the table's p column, else uniform 1/(K+1)."""
    if propensities is None:
        if table.propensity is not None:
            return np.asarray(table.propensity)
        return np.full(table.n_rows, 1.0 / table.n_arms)
    p = np.broadcast_to(np.asarray(propensities, dtype=float), (table.n_rows,)).copy()
    bad = ~np.isfinite(p) | (p <= 0) | (p > 1)
    if bad.any():
        raise ValidationError("propensity must lie in (0, 1]", row=int(np.flatnonzero(bad)[0]), column="p")
    return p


def ips_contributions(arms: np.ndarray, table: ExperimentTable, propensities: np.ndarray,
                      weights: Optional[ScalarizationWeights] = None) -> np.ndarray:
    """y_i / p_i on rows whose logged arm matches `arms`, 0 elsewhere."""
    y = table.scalarized_outcomes(weights)
    return np.where(np.asarray(arms) == table.treatment, y / propensities, 0.0)


def ope_ips(policy: Policy, table: ExperimentTable,
            propensities: Union[None, float, Sequence[float]] = None,
            weights: Optional[ScalarizationWeights] = None) -> float:
    """(1/N)·Σ_{i: W_i = Π(X_i)} y_i / p_i."""
    p = resolve_propensities(table, propensities)
    arms = assign(policy, table.features)
    return float(ips_contributions(arms, table, p, weights).sum() / table.n_rows)


# ---------------- guidance trees ----------------

@dataclass(frozen=True)
class ExploreConfig:
    guide_depth: int = 1
    seed: int = 0
    min_leaf: int = 1
    max_candidates: int = MAX_CANDIDATES


@dataclass(frozen=True)
class OpeEnsembleConfig:
    guide_depth: int = 1
    min_leaf: int = 1
    max_candidates: int = MAX_CANDIDATES


@dataclass(frozen=True, eq=False)
class ExploreRecord:
    """Per row: the explored policy, the outcome vector O_i and whether Y_i was revealed in it."""

    chosen: np.ndarray
    outcomes: np.ndarray
    revealed: np.ndarray


def _check_policies(policies: Sequence[Policy], table: ExperimentTable) -> np.ndarray:
    """(N, Q) arm chosen by every constituent for every row; each must be an arm of `table`."""
    if len(policies) < 2:
        raise ConfigurationError(f"an ensemble needs at least 2 policies, got {len(policies)}")
    for q, policy in enumerate(policies):
        if policy.n_features != table.n_features:
            raise DimensionError(f"policy {q} expects {policy.n_features} features, table has {table.n_features}")
    arms = np.column_stack([assign(policy, table.features) for policy in policies])
    bad = arms >= table.n_arms
    if bad.any():
        row, q = np.argwhere(bad)[0]
        raise ValidationError(f"policy {q} assigns arm {arms[row, q]} but the table only has arms 0..{table.n_arms - 1}",
                              row=int(row))
    return arms


def explore(table: ExperimentTable, preds: PotentialPredictionMatrix, policies: Sequence[Policy],
            seed: int = 0, weights: Optional[ScalarizationWeights] = None) -> ExploreRecord:
    """Simulated uniform exploration: O_i starts as predictions and reveals Y_i at W_i
    when the randomly explored policy picks the logged arm."""
    arms = _check_policies(policies, table)
    preds.check_compatible(table)
    chosen = np.random.default_rng(seed).integers(0, len(policies), size=table.n_rows)
    rows = np.arange(table.n_rows)
    revealed = arms[rows, chosen] == table.treatment
    outcomes = preds.scalarized(weights).copy()
    outcomes[rows[revealed], table.treatment[revealed]] = table.scalarized_outcomes(weights)[revealed]
    for values in (chosen, outcomes, revealed):
        values.setflags(write=False)
    return ExploreRecord(chosen, outcomes, revealed)


def _names(policies: Sequence[Policy], policy_names: Optional[Sequence[str]]) -> tuple[str, ...]:
    return tuple(policy_names) if policy_names else tuple(f"policy{q}" for q in range(len(policies)))


def guide_uniform_explore(table: ExperimentTable, preds: PotentialPredictionMatrix, policies: Sequence[Policy],
                          config: Optional[ExploreConfig] = None,
                          weights: Optional[ScalarizationWeights] = None,
                          policy_names: Optional[Sequence[str]] = None) -> GuidanceTree:
    config = config or ExploreConfig()
    record = explore(table, preds, policies, config.seed, weights)
    arms = _check_policies(policies, table)
    values = record.outcomes[np.arange(table.n_rows)[:, None], arms]
    root = search_tree(table.features, values, GreedyConfig(config.guide_depth, config.min_leaf, config.max_candidates))
    tree = GuidanceTree(root, table.n_features, table.feature_names, tuple(policies), _names(policies, policy_names))
    log.info("Uniform-explore guidance tree: depth=%d, revealed rows=%d/%d",
             tree.depth, int(record.revealed.sum()), table.n_rows)
    return tree


def guide_ope(table: ExperimentTable, policies: Sequence[Policy],
              propensities: Union[None, float, Sequence[float]] = None,
              config: Optional[OpeEnsembleConfig] = None,
              weights: Optional[ScalarizationWeights] = None,
              policy_names: Optional[Sequence[str]] = None) -> GuidanceTree:
    """Guidance tree maximising the IPS value; single policies compete as unsplit trees."""
    config = config or OpeEnsembleConfig()
    arms = _check_policies(policies, table)
    p = resolve_propensities(table, propensities)
    contributions = np.column_stack([ips_contributions(arms[:, q], table, p, weights) for q in range(len(policies))])
    root = search_tree(table.features, contributions,
                       GreedyConfig(config.guide_depth, config.min_leaf, config.max_candidates))
    tree = GuidanceTree(root, table.n_features, table.feature_names, tuple(policies), _names(policies, policy_names))
    log.info("OPE guidance tree: depth=%d, IPS value=%.6g", tree.depth, ope_ips(tree, table, p, weights))
    return tree
