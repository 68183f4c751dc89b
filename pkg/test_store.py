# ============================================================
# test_store.py
# Tests the artifact store: CSV/JSON files, saved models, configs, manifest
# ============================================================

import json
import os

import joblib
import numpy as np
import pytest

from core import (
    ConfigurationError,
    ConstantPolicy,
    ExperimentTable,
    Node,
    PolicyTree,
    ValidationError,
)
from distill_hte import MtdtConfig
from evaluation import OracleOutcomes
from hte_teacher import TLearnerConfig
from store import (
    append_manifest,
    build_config,
    check_store,
    header_arm_count,
    load_config,
    load_model,
    load_policy,
    oracle_path_for,
    policy_from_dict,
    read_json,
    read_oracle,
    read_table,
    save_model,
    write_json,
    write_oracle,
    write_table,
)


def save_store_error_snapshot(message: str):
    """Save store failure messages to a log file for debugging."""
    os.makedirs("test_artifacts", exist_ok=True)
    path = os.path.join("test_artifacts", "store_error.log")
    with open(path, "a", encoding="utf-8") as f:
        f.write(message + "\n")
    print(f"⚠️ Saved store error message to {path}")

# ============================================================
# Output directory checks
# ============================================================

def test_check_store(tmp_path):
    """Verify that a fresh output directory is writable."""
    ok, msg = check_store(tmp_path / "out")
    if not ok:
        save_store_error_snapshot(f"check_store failed: {msg}")
    assert ok, f"❌ Output directory not writable: {msg}"
    assert not any((tmp_path / "out").iterdir())


def test_check_store_on_a_file(tmp_path):
    blocker = tmp_path / "taken"
    blocker.write_text("x", encoding="utf-8")
    ok, msg = check_store(blocker)
    assert not ok and "not writable" in msg

# ============================================================
# CSV
# ============================================================

def test_table_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    table = ExperimentTable(rng.normal(size=(5, 2)), [0, 1, 2, 1, 0], rng.normal(size=(5, 2)),
                            propensity=np.full(5, 1 / 3), feature_names=("age", "dose"))
    path = write_table(table, tmp_path / "data.csv")
    back = read_table(path)
    assert back.feature_names == ("age", "dose")
    assert np.array_equal(back.features, table.features)
    assert np.array_equal(back.outcomes, table.outcomes)
    assert np.array_equal(back.propensity, table.propensity)


def test_read_table_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(ValidationError):
        read_table(empty)
    bad = tmp_path / "bad.csv"
    bad.write_text("f_a,w,y0\n1.0,0,2.0\nx,1,3.0\n", encoding="utf-8")
    with pytest.raises(ValidationError) as e:
        read_table(bad)
    assert e.value.row == 1


def test_oracle_sibling_path_and_roundtrip(tmp_path):
    assert oracle_path_for(tmp_path / "data.csv").name == "data.oracle.csv"
    oracle = OracleOutcomes(np.random.default_rng(1).normal(size=(4, 2, 1)))
    path = write_oracle(oracle, oracle_path_for(tmp_path / "data.csv"))
    assert np.array_equal(read_oracle(path).potential, oracle.potential)


def test_header_arm_count_reads_only_column_names(tmp_path):
    oracle = OracleOutcomes(np.zeros((5, 3, 2)))
    path = write_oracle(oracle, tmp_path / "data.oracle.csv")
    assert header_arm_count(path, "ystar") == 3
    table = ExperimentTable(np.zeros((4, 1)), [0, 1, 0, 1], np.zeros(4))
    assert header_arm_count(write_table(table, tmp_path / "data.csv"), "ystar") is None

# ============================================================
# JSON / policies
# ============================================================

def test_json_handles_numpy(tmp_path):
    path = write_json({"b": np.int64(3), "a": np.float64(0.5), "c": np.arange(2)}, tmp_path / "x.json")
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert read_json(path) == {"a": 0.5, "b": 3, "c": [0, 1]}


def test_read_json_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ValidationError):
        read_json(path)


def test_load_policy_by_kind(tmp_path):
    tree = PolicyTree(Node.split(0, 1.5, Node.leaf(0), Node.leaf(1)), 1, ("dose",))
    path = write_json(tree.to_dict(), tmp_path / "policy.json")
    loaded = load_policy(path)
    assert isinstance(loaded, PolicyTree) and loaded.root == tree.root
    assert isinstance(policy_from_dict(ConstantPolicy(1, 2).to_dict()), ConstantPolicy)
    with pytest.raises(ValidationError):
        policy_from_dict({"kind": "forest"})

# ============================================================
# Saved models
# ============================================================

def test_model_roundtrip(tmp_path):
    path = save_model({"weights": [1, 2, 3]}, tmp_path / "m.joblib")
    assert load_model(path) == {"weights": [1, 2, 3]}


def test_load_model_rejects_foreign_pickle(tmp_path):
    path = tmp_path / "other.joblib"
    joblib.dump([1, 2, 3], path)
    with pytest.raises(ValidationError):
        load_model(path)

# ============================================================
# Config files
# ============================================================

def test_build_config_coerces_strings():
    config = build_config(MtdtConfig, {"max_depth": "none", "honest": "false", "n_min": "5", "level": "0.9"})
    assert config.max_depth is None and config.honest is False
    assert config.n_min == 5 and config.level == 0.9


def test_build_config_overrides_and_errors():
    config = build_config(TLearnerConfig, {"n_estimators": "50"}, n_estimators=None, seed=4)
    assert config.n_estimators == 50 and config.seed == 4
    with pytest.raises(ConfigurationError):
        build_config(TLearnerConfig, {"trees": "5"})
    with pytest.raises(ConfigurationError):
        build_config(TLearnerConfig, {"n_estimators": "many"})
    with pytest.raises(ConfigurationError):
        build_config(MtdtConfig, {"honest": "maybe"})


def test_load_config_from_env_file(tmp_path):
    path = tmp_path / "mtdt.env"
    path.write_text("MAX_DEPTH=2\nLOSS=literal\n", encoding="utf-8")
    config = load_config(MtdtConfig, path, n_min=3)
    assert (config.max_depth, config.loss, config.n_min) == (2, "literal", 3)
    with pytest.raises(ConfigurationError):
        load_config(MtdtConfig, tmp_path / "missing.env")

# ============================================================
# Manifest
# ============================================================

def test_manifest_appends_lines(tmp_path):
    append_manifest(tmp_path, "learn", ["a.csv"], ["p.json"], 0, {"depth": 2})
    path = append_manifest(tmp_path, "learn", ["a.csv"], ["p.json"], 1, {"depth": 2})
    lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == 2
    assert lines[0]["config_hash"] == lines[1]["config_hash"]
    assert [line["seed"] for line in lines] == [0, 1]
    assert lines[0]["outputs"] == ["p.json"]
