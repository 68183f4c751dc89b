"""
File-based artifact handoff for the policy-learning pipeline.

This module:
 - Reads/writes experiment tables, prediction matrices and oracle outcomes as CSV
 - Reads/writes tree, segment and metric documents as JSON
 - Persists fitted T-Learners with joblib
 - Parses key-value config files (python-dotenv) onto frozen dataclass configs
 - Appends one manifest line per CLI run and provides check_store()
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import types
import typing
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import joblib
import numpy as np
import pandas as pd
from dotenv import dotenv_values

from core import (
    ConfigurationError,
    ConstantPolicy,
    ExperimentTable,
    PolicyTree,
    ScalarizationWeights,
    ValidationError,
    column_arm_count,
)
from distill_hte import ExplanationTree
from ensemble import GuidanceTree
from evaluation import OracleOutcomes
from policy_no_hte import RuleListPolicy
from utils import config_hash

log = logging.getLogger(__name__)

# ---------------- CONFIG ----------------
STORE_CONFIG = {
    "output_dir": os.getenv("HTEPOLICY_OUTPUT_DIR", "artifacts"),
    "manifest_name": os.getenv("HTEPOLICY_MANIFEST", "manifest.jsonl"),
    # round-trips every float64 exactly
    "float_format": "%.17g",
}

POLICY_KINDS = {
    PolicyTree.kind: PolicyTree,
    ConstantPolicy.kind: ConstantPolicy,
    RuleListPolicy.kind: RuleListPolicy,
    ExplanationTree.kind: ExplanationTree,
}


# ---------------- CSV ----------------

def read_frame(path, nrows: Optional[int] = None) -> pd.DataFrame:
    """Read a CSV into a DataFrame; empty or malformed files become ValidationError."""
    try:
        return pd.read_csv(path, nrows=nrows)
    except pd.errors.EmptyDataError as e:
        raise ValidationError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise ValidationError(f"{path} is not valid CSV: {e}") from e


def write_frame(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=STORE_CONFIG["float_format"])
    return path


def read_table(path, arm_count: Optional[int] = None) -> ExperimentTable:
    return ExperimentTable.from_frame(read_frame(path), arm_count=arm_count)


def write_table(table: ExperimentTable, path) -> Path:
    return write_frame(table.to_frame(), path)


def oracle_path_for(table_path) -> Path:
    """Sibling oracle file: data.csv -> data.oracle.csv."""
    p = Path(table_path)
    return p.with_name(f"{p.stem}.oracle{p.suffix or '.csv'}")


def header_arm_count(path, prefix: str) -> Optional[int]:
    """Arms covered by a prediction (`yhat`) or oracle (`ystar`) CSV, read from its header."""
    return column_arm_count(read_frame(path, nrows=0).columns, prefix)


def read_oracle(path) -> OracleOutcomes:
    return OracleOutcomes.from_frame(read_frame(path))


def write_oracle(oracle: OracleOutcomes, path) -> Path:
    return write_frame(oracle.to_frame(), path)


# ---------------- JSON ----------------

def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}") from e


def write_text(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return path


def policy_from_dict(data: Mapping):
    """Rebuild any serialized policy or tree from its `kind` field."""
    kind = data.get("kind")
    if kind == GuidanceTree.kind:
        return GuidanceTree.from_dict(data, policy_from_dict)
    cls = POLICY_KINDS.get(kind)
    if cls is None:
        raise ValidationError(f"unknown policy kind {kind!r}")
    return cls.from_dict(data)


def load_policy(path):
    return policy_from_dict(read_json(path))


# ---------------- models ----------------

def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({"model": model}, path)
    log.info("Saved model to %s", path)
    return path


def load_model(path):
    try:
        payload = joblib.load(path)
    except (EOFError, ValueError, KeyError) as e:
        raise ValidationError(f"{path} is not a saved model: {e}") from e
    if not isinstance(payload, dict) or "model" not in payload:
        raise ValidationError(f"{path} is not a saved model")
    return payload["model"]


# ---------------- key-value config ----------------

def load_key_values(path) -> dict[str, str]:
    if not Path(path).is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    values = dotenv_values(path)
    return {k.strip().lower(): v for k, v in values.items() if v is not None}


def _coerce(name: str, raw: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if isinstance(raw, str) and raw.strip().lower() in ("", "none", "null"):
            return None
        return _coerce(name, raw, args[0])
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is ScalarizationWeights:
            return ScalarizationWeights.parse(text)
        if origin is tuple:
            return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigurationError(f"config key {name!r}: {e}") from e
    return text


def build_config(cls, values: Optional[Mapping[str, Any]] = None, **overrides):
    """Coerce key-value pairs (file values, then non-None overrides) onto dataclass `cls`."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    merged = dict(values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in merged.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"invalid {cls.__name__}: {e}") from e


def load_config(cls, path=None, **overrides):
    return build_config(cls, load_key_values(path) if path else None, **overrides)


# ---------------- manifest ----------------

def append_manifest(out_dir, command: str, inputs, outputs, seed, config: Mapping) -> Path:
    """Append {command, inputs, outputs, seed, config_hash} to <out_dir>/manifest.jsonl."""
    path = Path(out_dir) / STORE_CONFIG["manifest_name"]
    path.parent.mkdir(parents=True, exist_ok=True)
    line = {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "config_hash": config_hash(dict(config)),
    }
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")
    return path


def check_store(out_dir=None):
    """Check that the output directory is writable. Returns (ok: bool, message: str)."""
    out_dir = Path(out_dir or STORE_CONFIG["output_dir"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("ok", encoding="utf-8")
        probe.unlink()
        return True, f"output directory {out_dir} OK"
    except OSError as e:
        return False, f"output directory {out_dir} is not writable: {e}"
