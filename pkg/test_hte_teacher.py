# ============================================================
# test_hte_teacher.py
# T-Learner fitting, prediction, external prediction files, naive HTE policy
# ============================================================

import numpy as np
import pandas as pd
import pytest

from core import (
    DimensionError,
    ExperimentTable,
    InsufficientOverlapError,
    PotentialPredictionMatrix,
    ScalarizationWeights,
    ValidationError,
)
from hte_teacher import (
    TLearnerConfig,
    fit_tlearner,
    load_predictions,
    naive_hte_policy,
    predict_potential,
    save_predictions,
)
from store import save_model

# ============================================================
# Helper utilities
# ============================================================

FAST = TLearnerConfig(n_estimators=30, max_depth=2)


def additive_table(n=400, seed=0):
    """Y = W exactly, one uniform feature."""
    rng = np.random.default_rng(seed)
    w = rng.integers(0, 2, n)
    return ExperimentTable(rng.uniform(-1, 1, (n, 1)), w, w.astype(float))


@pytest.fixture(scope="module")
def additive_model():
    return fit_tlearner(additive_table(), FAST)

# ============================================================
# Fitting / prediction
# ============================================================

def test_constant_outcomes_predict_constant():
    rng = np.random.default_rng(1)
    table = ExperimentTable(rng.normal(size=(60, 2)), np.arange(60) % 3, np.full(60, 4.25))
    preds = predict_potential(fit_tlearner(table, FAST), rng.normal(size=(7, 2)))
    assert np.allclose(preds.values, 4.25)


def test_known_additive_effect(additive_model):
    X = np.linspace(-0.9, 0.9, 25).reshape(-1, 1)
    preds = predict_potential(additive_model, X)
    effect = preds.values[:, 1, 0] - preds.values[:, 0, 0]
    assert np.all(np.abs(effect - 1.0) < 0.05)


def test_empty_arm_rejected():
    table = ExperimentTable(np.zeros((40, 1)), np.arange(40) % 2, np.zeros(40), arm_count=3)
    with pytest.raises(InsufficientOverlapError) as e:
        fit_tlearner(table, FAST)
    assert e.value.arm == 2


def test_undersized_arm_rejected():
    w = np.array([0] * 30 + [1] * 5)
    table = ExperimentTable(np.arange(35.0).reshape(-1, 1), w, np.zeros(35))
    with pytest.raises(InsufficientOverlapError) as e:
        fit_tlearner(table, FAST)
    assert e.value.arm == 1 and "arm 1" in str(e.value)


def test_predict_empty_and_shape(additive_model):
    empty = predict_potential(additive_model, np.zeros((0, 1)))
    assert empty.values.shape == (0, 2, 1)
    assert predict_potential(additive_model, np.zeros((3, 1))).values.shape == (3, 2, 1)
    with pytest.raises(DimensionError):
        predict_potential(additive_model, np.zeros((3, 2)))


def test_arm_isolation():
    table = additive_table(seed=3)
    base = fit_tlearner(table, FAST)
    # shuffle the arm-0 rows only; arm-1 regressors must not change
    rows = np.arange(table.n_rows)
    arm0 = rows[table.treatment == 0]
    shuffled = rows.copy()
    shuffled[arm0] = np.random.default_rng(9).permutation(arm0)
    other = fit_tlearner(table.subset(shuffled), FAST)
    X = np.linspace(-1, 1, 11).reshape(-1, 1)
    assert np.array_equal(predict_potential(base, X).values[:, 1], predict_potential(other, X).values[:, 1])


def test_single_tree_base_learner():
    model = fit_tlearner(additive_table(), TLearnerConfig(base_learner="tree", max_depth=2))
    preds = predict_potential(model, np.array([[0.0]]))
    assert preds.values[0, 1, 0] - preds.values[0, 0, 0] == pytest.approx(1.0)


def test_thread_count_does_not_change_the_model(tmp_path):
    table = additive_table(seed=4)
    config = TLearnerConfig(n_estimators=20)
    one = fit_tlearner(table, config, n_jobs=1)
    many = fit_tlearner(table, config, n_jobs=4)
    X = np.linspace(-1, 1, 9).reshape(-1, 1)
    assert np.array_equal(predict_potential(one, X).values, predict_potential(many, X).values)
    # the saved file carries no trace of the worker count
    a = save_model(one, tmp_path / "one.joblib").read_bytes()
    b = save_model(many, tmp_path / "many.joblib").read_bytes()
    assert a == b
    print("✅ model file identical for 1 and 4 threads")

# ============================================================
# Prediction files
# ============================================================

def test_load_predictions(tmp_path):
    table = ExperimentTable(np.zeros((2, 1)), [0, 1], np.zeros(2))
    path = tmp_path / "preds.csv"
    pd.DataFrame({"yhat_0_0": [1.0, 2.0], "yhat_0_1": [3.0, 4.0]}).to_csv(path, index=False)
    preds = load_predictions(path, table)
    assert preds.values.shape == (2, 2, 1)
    assert preds.values[1, 1, 0] == 4.0


def test_load_predictions_row_count(tmp_path):
    table = ExperimentTable(np.zeros((3, 1)), [0, 1, 0], np.zeros(3))
    path = tmp_path / "preds.csv"
    pd.DataFrame({"yhat_0_0": [1.0, 2.0], "yhat_0_1": [3.0, 4.0]}).to_csv(path, index=False)
    with pytest.raises(DimensionError):
        load_predictions(path, table)


def test_load_predictions_missing_column(tmp_path):
    table = ExperimentTable(np.zeros((2, 1)), [0, 1], np.zeros(2))
    path = tmp_path / "preds.csv"
    pd.DataFrame({"yhat_0_0": [1.0, 2.0]}).to_csv(path, index=False)
    with pytest.raises(ValidationError) as e:
        load_predictions(path, table)
    assert e.value.column == "yhat_0_1"


def test_load_predictions_rejects_extra_arms(tmp_path):
    # a split part that never saw arm 2 must not drop its prediction columns
    table = ExperimentTable(np.zeros((2, 1)), [0, 1], np.zeros(2))
    path = tmp_path / "preds.csv"
    pd.DataFrame({"yhat_0_0": [1.0, 2.0], "yhat_0_1": [3.0, 4.0], "yhat_0_2": [5.0, 6.0]}).to_csv(path, index=False)
    with pytest.raises(DimensionError, match="3 arms"):
        load_predictions(path, table)
    wide = ExperimentTable(np.zeros((2, 1)), [0, 1], np.zeros(2), arm_count=3)
    assert load_predictions(path, wide).values[:, 2, 0].tolist() == [5.0, 6.0]


def test_load_predictions_nan_names_row_and_column(tmp_path):
    table = ExperimentTable(np.zeros((2, 1)), [0, 1], np.zeros(2))
    path = tmp_path / "preds.csv"
    path.write_text("yhat_0_0,yhat_0_1\n1.0,2.0\n3.0,NaN\n", encoding="utf-8")
    with pytest.raises(ValidationError) as e:
        load_predictions(path, table)
    assert e.value.row == 1 and e.value.column == "yhat_0_1"


def test_save_then_load_predictions(tmp_path):
    table = ExperimentTable(np.zeros((3, 1)), [0, 1, 2], np.zeros((3, 2)))
    preds = PotentialPredictionMatrix(np.random.default_rng(0).normal(size=(3, 3, 2)))
    path = save_predictions(preds, tmp_path / "p.csv")
    assert np.array_equal(load_predictions(path, table).values, preds.values)

# ============================================================
# Naive HTE policy
# ============================================================

def test_naive_policy_argmax_and_ties():
    preds = PotentialPredictionMatrix(np.array([[[1.0], [3.0]], [[2.0], [2.0]]]))
    assert naive_hte_policy(preds).tolist() == [1, 0]


def test_naive_policy_scalarizes_first():
    preds = PotentialPredictionMatrix(np.array([[[1.0, 1.0], [0.0, 3.0]]]))
    assert naive_hte_policy(preds, ScalarizationWeights((1, 1))).tolist() == [1]


def test_naive_policy_shift_invariant():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(30, 3, 1))
    shifted = values + rng.normal(size=(30, 1, 1))
    assert np.array_equal(naive_hte_policy(PotentialPredictionMatrix(values)),
                          naive_hte_policy(PotentialPredictionMatrix(shifted)))
