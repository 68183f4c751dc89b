# ============================================================
# test_distill_hte.py
# Pairwise effects, multitask explanation trees, intervals, segment reports
# ============================================================

import math

import numpy as np
import pytest

from core import (
    ConfigurationError,
    ExperimentTable,
    InsufficientOverlapError,
    InvalidContrastError,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    UndefinedVarianceError,
    improves,
)
from datagen import gen_covid_like, gen_synthetic_a
from distill_hte import (
    EffectMatrix,
    ExplanationTree,
    MtdtConfig,
    distillation_loss,
    explain_all,
    fit_mtdt,
    leaf_confidence_interval,
    pairwise_effects,
    render_barplot,
    segment_report,
)
from evaluation import pehe
from hte_teacher import TLearnerConfig, fit_tlearner, predict_potential

# ============================================================
# Helper utilities
# ============================================================

def balanced_table(X, arms=2, outcomes=1):
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    n = X.shape[0]
    return ExperimentTable(X, np.arange(n) % arms, np.zeros((n, outcomes)))


def effects_of(values, k=1):
    return EffectMatrix(np.asarray(values, dtype=float).reshape(len(values), -1), k)


def brute_force_split(x, effects):
    """Lowest single-split SSE over all midpoints of one feature."""
    order = np.sort(np.unique(x))
    best = (math.inf, None)
    for t in (order[:-1] + order[1:]) / 2:
        left, right = effects[x < t], effects[x >= t]
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if sse < best[0]:
            best = (sse, t)
    return best


def weighted_sse(effects, c):
    return float((((effects - effects.mean(axis=0)) ** 2).sum(axis=0) * c).sum()) if len(effects) else 0.0


def assert_internal_splits_exhaustive(node, rows, X, effects, c):
    """Every kept split is an argmax of -(SSE_L + SSE_R).c over all cuts and beats the parent's -SSE.c."""
    if node.is_leaf:
        return
    scores = {}
    for f in range(X.shape[1]):
        vals = np.unique(X[rows, f])
        for t in (vals[:-1] + vals[1:]) / 2.0:
            go_left = X[rows, f] < t
            scores[(f, float(t))] = -(weighted_sse(effects[rows[go_left]], c) + weighted_sse(effects[rows[~go_left]], c))
    best = max(scores.values())
    tol = 1e-9 * max(1.0, abs(best))
    assert scores[(node.feature, node.threshold)] >= best - tol
    assert improves(best, -weighted_sse(effects[rows], c))
    go_left = X[rows, node.feature] < node.threshold
    assert_internal_splits_exhaustive(node.left, rows[go_left], X, effects, c)
    assert_internal_splits_exhaustive(node.right, rows[~go_left], X, effects, c)

# ============================================================
# Pairwise effects
# ============================================================

def test_pairwise_effects():
    preds = PotentialPredictionMatrix(np.array([[[1.0], [3.0]]]))
    assert pairwise_effects(preds, 1).values.tolist() == [[2.0]]


def test_pairwise_effects_componentwise():
    preds = PotentialPredictionMatrix(np.array([[[1.0, 2.0], [9.0, 9.0], [4.0, 0.0]]]))
    assert pairwise_effects(preds, 2).values.tolist() == [[3.0, -2.0]]
    same = PotentialPredictionMatrix(np.ones((4, 2, 1)))
    assert not pairwise_effects(same, 1).values.any()


def test_invalid_contrast():
    preds = PotentialPredictionMatrix(np.zeros((2, 3, 1)))
    for k in (0, 3):
        with pytest.raises(InvalidContrastError):
            pairwise_effects(preds, k)

# ============================================================
# Confidence intervals
# ============================================================

def test_interval_zero_variance():
    low, high = leaf_confidence_interval([2.5] * 6)
    assert low == pytest.approx(2.5) and high == pytest.approx(2.5)


def test_interval_hand_computed():
    samples = [0.0, 0.0, 4.0, 4.0]
    sd = np.std(samples, ddof=1)
    low, high = leaf_confidence_interval(samples, 0.95)
    assert (low + high) / 2 == pytest.approx(2.0)
    assert (high - low) / 2 == pytest.approx(1.96 * sd / 2, rel=1e-3)


def test_interval_needs_two_samples():
    with pytest.raises(UndefinedVarianceError):
        leaf_confidence_interval([1.0])

# ============================================================
# fit_mtdt
# ============================================================

def test_constant_effects_give_a_single_leaf():
    table = balanced_table(np.linspace(-1, 1, 40))
    effects = effects_of(np.full(40, 0.7))
    tree = fit_mtdt(table.features, effects, None, table, MtdtConfig(n_min=2))
    assert tree.depth == 0
    assert tree.leaves()[0].value.estimate == pytest.approx((0.7,))
    assert distillation_loss(tree, table.features, effects) == pytest.approx(0.0)


def test_two_clusters_split_matches_brute_force():
    x = np.array([-3.0, -2.5, -2.0, -1.5, -1.0, 1.0, 1.5, 2.0, 2.5, 3.0] * 2)
    effects = np.where(x < 0, 1.0, -1.0)
    table = balanced_table(x)
    tree = fit_mtdt(table.features, effects_of(effects), None, table,
                    MtdtConfig(max_depth=1, n_min=2, honest=False))
    _, threshold = brute_force_split(x, effects)
    assert tree.root.threshold == threshold == 0.0
    left, right = tree.leaves()
    assert left.value.estimate == pytest.approx((1.0,)) and right.value.estimate == pytest.approx((-1.0,))


def test_honest_leaf_uses_estimation_half():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 200)
    effects = np.where(x < 0, 1.0, -1.0) + rng.normal(0, 0.3, 200)
    table = balanced_table(x)
    config = MtdtConfig(max_depth=1, n_min=5, honest=True, seed=3)
    tree = fit_mtdt(table.features, effects_of(effects), None, table, config)

    perm = np.random.default_rng(3).permutation(200)
    estimation = np.sort(perm[100:])
    structure = np.sort(perm[:100])
    leaf_ids = tree.leaf_index(table.features)
    for ordinal, leaf in enumerate(tree.leaves()):
        est_rows = estimation[leaf_ids[estimation] == ordinal]
        str_rows = structure[leaf_ids[structure] == ordinal]
        assert leaf.value.estimate[0] == pytest.approx(effects[est_rows].mean())
        assert leaf.value.estimate[0] != pytest.approx(effects[str_rows].mean())
        assert leaf.value.n_rows == est_rows.size


def test_overlap_pruning_collapses_parent():
    # the right cluster has only control rows, so its leaf cannot survive
    x = np.concatenate([np.linspace(-2, -1, 20), np.linspace(1, 2, 10)])
    w = np.concatenate([np.arange(20) % 2, np.zeros(10, dtype=int)])
    table = ExperimentTable(x.reshape(-1, 1), w, np.zeros(30))
    effects = effects_of(np.where(x < 0, 1.0, -1.0))
    tree = fit_mtdt(table.features, effects, None, table, MtdtConfig(max_depth=1, n_min=2, honest=False))
    assert tree.depth == 0
    assert tree.leaves()[0].value.pruned
    assert tree.leaves()[0].value.treated_count == 10


def test_surviving_leaves_hold_n_min_rows_of_both_arms():
    rng = np.random.default_rng(7)
    for seed in range(10):
        n = 300
        X = rng.normal(size=(n, 2))
        w = rng.integers(0, 2, n)
        table = ExperimentTable(X, w, np.zeros(n))
        effects = effects_of(X[:, 0] + rng.normal(0, 0.5, n))
        config = MtdtConfig(max_depth=4, n_min=15, honest=True, seed=seed)
        tree = fit_mtdt(table.features, effects, None, table, config)
        for leaf in tree.leaves():
            assert leaf.value.control_count >= 15 and leaf.value.treated_count >= 15
            assert all(lo <= e <= hi for lo, e, hi in zip(leaf.value.ci_low, leaf.value.estimate, leaf.value.ci_high))


def test_zero_training_loss_when_unrestricted():
    x = np.repeat(np.arange(6, dtype=float), 2)
    w = np.tile([0, 1], 6)
    effects = effects_of(np.repeat([3.0, -1.0, 0.5, 2.0, -2.0, 4.0], 2))
    table = ExperimentTable(x.reshape(-1, 1), w, np.zeros(12))
    tree = fit_mtdt(table.features, effects, None, table,
                    MtdtConfig(max_depth=None, n_min=1, honest=False))
    assert distillation_loss(tree, table.features, effects) == pytest.approx(0.0, abs=1e-12)


def test_random_instances_match_exhaustive_search():
    c = np.array([1.0, 0.5])
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, p = int(rng.integers(4, 31)), int(rng.integers(1, 3))
        X = rng.integers(0, 5, (n, p)).astype(float)
        w = rng.permutation(np.arange(n) % 2)
        table = ExperimentTable(X, w, np.zeros(n))
        values = np.zeros((n, 2, 2))
        values[:, 1, :] = rng.integers(-3, 4, (n, 2))
        effects = pairwise_effects(PotentialPredictionMatrix(values), 1)
        tree = fit_mtdt(X, effects, ScalarizationWeights(tuple(c)), table,
                        MtdtConfig(max_depth=2, n_min=1, honest=False))
        assert_internal_splits_exhaustive(tree.root, np.arange(n), X, effects.values, c)
    print("✅ 200 random explanation trees agree with exhaustive enumeration")


def test_weight_scaling_keeps_splits():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 2))
    table = ExperimentTable(X, rng.integers(0, 2, 200), np.zeros((200, 2)))
    effects = EffectMatrix(np.column_stack([X[:, 0] > 0, X[:, 1] > 0.5]).astype(float), 1)
    base = fit_mtdt(X, effects, ScalarizationWeights((1.0, 2.0)), table, MtdtConfig(n_min=5, honest=False))
    scaled = fit_mtdt(X, effects, ScalarizationWeights((2.0, 4.0)), table, MtdtConfig(n_min=5, honest=False))
    assert [(n.feature, n.threshold) for n in base.root.iter_internal()] == \
        [(n.feature, n.threshold) for n in scaled.root.iter_internal()]


def test_multitask_loss_uses_both_outcomes():
    x = np.repeat(np.arange(4, dtype=float), 4)
    table = ExperimentTable(x.reshape(-1, 1), np.tile([0, 1], 8), np.zeros((16, 2)))
    # outcome 0 varies between x<1.5 and x>=1.5, outcome 1 is its mirror image
    t0 = np.where(x < 1.5, 1.0, -1.0)
    effects = EffectMatrix(np.column_stack([t0, -t0]), 1)
    weighted = fit_mtdt(table.features, effects, None, table, MtdtConfig(max_depth=1, n_min=1, honest=False))
    literal = fit_mtdt(table.features, effects, None, table,
                       MtdtConfig(max_depth=1, n_min=1, honest=False, loss="literal"))
    assert weighted.root.threshold == 1.5
    # scalarized effects are all zero, so the literal loss sees nothing to split
    assert literal.depth == 0


def test_errors():
    table = ExperimentTable(np.zeros((10, 1)), np.zeros(10), np.zeros(10), arm_count=2)
    with pytest.raises(InsufficientOverlapError):
        fit_mtdt(table.features, effects_of(np.zeros(10)), None, table, MtdtConfig(n_min=1))
    ok = balanced_table(np.arange(10.0))
    with pytest.raises(ConfigurationError):
        fit_mtdt(ok.features, effects_of(np.zeros(10)), None, ok, MtdtConfig(n_min=6))
    with pytest.raises(ConfigurationError):
        MtdtConfig(n_min=0)


def test_explain_all_reads_only_its_contrast():
    rng = np.random.default_rng(1)
    n = 120
    X = rng.normal(size=(n, 1))
    table = ExperimentTable(X, np.arange(n) % 3, np.zeros(n))
    values = rng.normal(size=(n, 3, 1))
    trees = explain_all(table, PotentialPredictionMatrix(values), None, MtdtConfig(n_min=5))
    assert [t.contrast_arm for t in trees] == [1, 2]
    changed = values.copy()
    changed[:, 2, :] += 100.0
    again = explain_all(table, PotentialPredictionMatrix(changed), None, MtdtConfig(n_min=5))
    assert again[0].to_dict() == trees[0].to_dict()

# ============================================================
# Reports and policies
# ============================================================

@pytest.fixture(scope="module")
def two_leaf_tree():
    x = np.repeat(np.linspace(-1, 1, 10), 4)
    table = balanced_table(x)
    tree = fit_mtdt(table.features, effects_of(np.where(x < 0, 2.0, -3.0)), None, table,
                    MtdtConfig(max_depth=1, n_min=2, honest=False))
    return tree, table


def test_segment_report_is_ascending(two_leaf_tree):
    tree, table = two_leaf_tree
    report = segment_report(tree, table)
    assert [e.scalarized_effect for e in report] == pytest.approx([-3.0, 2.0])


def test_segment_report_predicates_replay(two_leaf_tree):
    tree, table = two_leaf_tree
    leaf_ids = tree.leaf_index(table.features)
    for entry in segment_report(tree, table):
        replay = np.flatnonzero(entry.segment.contains(table.features))
        assert np.array_equal(replay, entry.segment.row_indices)
        assert np.unique(leaf_ids[replay]).size == 1


def test_segment_report_depth_zero():
    table = balanced_table(np.linspace(0, 1, 20))
    tree = fit_mtdt(table.features, effects_of(np.full(20, 1.5)), None, table, MtdtConfig(n_min=2, honest=False))
    (entry,) = segment_report(tree, table)
    assert entry.scalarized_effect == pytest.approx(1.5)
    assert entry.segment.describe_ranges() == "all rows"


def test_barplot_and_policy(two_leaf_tree):
    tree, table = two_leaf_tree
    text = render_barplot(segment_report(tree, table))
    assert len(text.splitlines()) == 2 and "#" in text
    policy = tree.to_policy()
    assert policy.predict(np.array([[-0.5], [0.5]])).tolist() == [1, 0]


def test_explanation_tree_dict_roundtrip(two_leaf_tree):
    tree, _ = two_leaf_tree
    again = ExplanationTree.from_dict(tree.to_dict())
    assert again.to_dict() == tree.to_dict()

# ============================================================
# Synthetic data
# ============================================================

@pytest.mark.slow
def test_distilled_tree_beats_a_single_tree_tlearner():
    wins = 0
    for seed in range(10):
        train, _ = gen_synthetic_a(2000, seed=seed)
        test, oracle = gen_synthetic_a(2000, seed=seed + 100)
        truth = oracle.potential[:, 1, 0] - oracle.potential[:, 0, 0]

        teacher = predict_potential(fit_tlearner(train, TLearnerConfig(seed=seed)), train.features)
        tree = fit_mtdt(train.features, pairwise_effects(teacher, 1), None, train, MtdtConfig(seed=seed))
        distilled = pehe(tree.predict_scalarized(test.features), truth)

        single = predict_potential(fit_tlearner(train, TLearnerConfig(seed=seed, base_learner="tree")),
                                   test.features).scalarized()
        direct = pehe(single[:, 1] - single[:, 0], truth)
        wins += distilled < direct
    assert wins >= 8, f"❌ distilled tree had the lower PEHE on only {wins}/10 seeds"
    print(f"✅ distilled tree had the lower PEHE on {wins}/10 seeds")


@pytest.mark.slow
def test_covid_like_root_splits_on_days():
    hits = 0
    for seed in range(10):
        table, _ = gen_covid_like(20_000, seed=seed)
        preds = predict_potential(fit_tlearner(table, TLearnerConfig(seed=seed)), table.features)
        tree = fit_mtdt(table.features, pairwise_effects(preds, 1), None, table, MtdtConfig(seed=seed))
        hits += not tree.root.is_leaf and tree.root.feature == 0
    assert hits >= 9, f"❌ days was the top split on only {hits}/10 seeds"
    print(f"✅ days was the top split on {hits}/10 seeds")
