# cli.py
# Batch entry point for the policy-learning pipeline:
#   datagen -> split -> teach -> predict -> explain / learn -> ensemble -> evaluate / ope -> report
# Stages hand off through CSV/JSON files (see store.py).
#
# Then run: python cli.py <subcommand> --help

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

import store
from core import (
    ConfigurationError,
    ConstantPolicy,
    HtePolicyError,
    ScalarizationWeights,
    assign,
    scalarize_array,
    split_three_way,
    unroll_tree,
)
from datagen import SyntheticSpec, gen_covid_like, gen_synthetic_a, generate, knn_potential_outcomes
from distill_hte import ExplanationTree, MtdtConfig, explain_all, fit_mtdt, pairwise_effects, render_barplot, segment_report
from ensemble import ExploreConfig, OpeEnsembleConfig, guide_ope, guide_uniform_explore, ope_ips
from evaluation import aggregate_reports, evaluate_assignment, format_report_table, random_assignment, MetricsReport
from hte_teacher import TLearnerConfig, fit_tlearner, load_predictions, naive_hte_policy, predict_potential, save_predictions
from policy_greedy import DistillConfig, GreedyConfig, distill_policy, greedy_tree_search
from policy_no_hte import IterativeConfig, NoHteConfig, fit_no_hte_greedy, fit_no_hte_iterative
from utils import configure_logging, default_threads, sanitize_filename_component

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_USAGE = 64
EXIT_IO = 74

LEARN_METHODS = ("distill-hte", "greedy-hte", "distill-policy", "no-hte-greedy", "no-hte-iterative")
ENSEMBLE_METHODS = ("guide-explore", "guide-ope")
GENERATORS = ("synthetic-a", "covid-like", "spec", "knn")
# flags that never change an artifact, kept out of the manifest config hash
RUN_ONLY_ARGS = ("handler", "threads", "log_level")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunRecord:
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: Optional[int] = None


# ---------------- helpers ----------------

def _weights(args) -> Optional[ScalarizationWeights]:
    return ScalarizationWeights.parse(args.weights) if args.weights else None


def _with_suffix(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}{suffix}")


def _write_policy(policy, out: Path, record: RunRecord) -> None:
    record.outputs.append(store.write_json(policy.to_dict(), out))
    record.outputs.append(store.write_text(policy.render_text(), _with_suffix(out, ".txt")))


def _arm_count(args) -> Optional[int]:
    """--arms, else the prediction header, else the oracle header; None lets the table's own arms decide."""
    if args.arms is not None:
        return args.arms
    if getattr(args, "preds", None):
        return store.header_arm_count(args.preds, "yhat")
    oracle = getattr(args, "oracle", None) or store.oracle_path_for(args.table)
    if Path(oracle).is_file():
        return store.header_arm_count(oracle, "ystar")
    return None


def _read_table(args):
    return store.read_table(args.table, arm_count=_arm_count(args))


def _load_table_and_preds(args, record: RunRecord):
    table = _read_table(args)
    record.inputs.append(args.table)
    preds = None
    if getattr(args, "preds", None):
        preds = load_predictions(args.preds, table)
        record.inputs.append(args.preds)
    return table, preds


def _require_preds(preds, method: str):
    if preds is None:
        raise ConfigurationError(f"--preds is required for {method}")
    return preds


# ---------------- subcommands ----------------

def cmd_datagen(args) -> RunRecord:
    record = RunRecord(seed=args.seed)
    out = Path(args.out)
    if args.generator == "knn":
        if not args.table:
            raise ConfigurationError("--table is required for the knn generator")
        table = _read_table(args)
        record.inputs.append(args.table)
        oracle = knn_potential_outcomes(table, args.k_neighbors, args.standardize, n_jobs=args.threads)
    elif args.generator == "spec":
        spec = store.load_config(SyntheticSpec, args.config, n=args.n, seed=args.seed, noise_sd=args.noise_sd)
        if args.config:
            record.inputs.append(args.config)
        table, oracle = generate(spec)
    else:
        make = gen_covid_like if args.generator == "covid-like" else gen_synthetic_a
        noise = {} if args.noise_sd is None else {"noise_sd": args.noise_sd}
        table, oracle = make(args.n or 1000, args.seed, **noise)
    record.outputs.append(store.write_table(table, out))
    record.outputs.append(store.write_oracle(oracle, store.oracle_path_for(out)))
    return record


def cmd_split(args) -> RunRecord:
    record = RunRecord(inputs=[args.table], seed=args.seed)
    table = _read_table(args)
    bundle = split_three_way(table, args.test_frac, args.val_frac, args.seed)
    oracle_src = store.oracle_path_for(args.table)
    oracle = store.read_oracle(oracle_src) if oracle_src.is_file() else None
    if oracle is not None:
        record.inputs.append(oracle_src)
    out_dir = Path(args.out_dir)
    for name, part, index in (("train", bundle.train, bundle.train_index),
                              ("validation", bundle.validation, bundle.validation_index),
                              ("test", bundle.test, bundle.test_index)):
        path = out_dir / f"{name}.csv"
        record.outputs.append(store.write_table(part, path))
        if oracle is not None:
            record.outputs.append(store.write_oracle(oracle.take(index), store.oracle_path_for(path)))
    record.outputs.append(store.write_json({
        "train": bundle.train_index, "validation": bundle.validation_index, "test": bundle.test_index,
    }, out_dir / "split_index.json"))
    log.info("Split %d rows into train/validation/test = %s", table.n_rows, bundle.sizes())
    return record


def cmd_teach(args) -> RunRecord:
    record = RunRecord(inputs=[args.table], seed=args.seed)
    config = store.load_config(
        TLearnerConfig, args.config,
        n_estimators=args.n_estimators, max_depth=args.max_depth, learning_rate=args.learning_rate,
        seed=args.seed, min_arm_rows=args.min_arm_rows, base_learner=args.base_learner,
    )
    if args.config:
        record.inputs.append(args.config)
    record.seed = config.seed
    model = fit_tlearner(_read_table(args), config, n_jobs=args.threads)
    record.outputs.append(store.save_model(model, args.out))
    return record


def cmd_predict(args) -> RunRecord:
    record = RunRecord(inputs=[args.model, args.table])
    model = store.load_model(args.model)
    table = _read_table(args)
    record.outputs.append(save_predictions(predict_potential(model, table.features), args.out))
    return record


def _mtdt_config(args) -> MtdtConfig:
    return MtdtConfig(
        max_depth=args.depth if args.depth is not None else 3,
        n_min=args.n_min,
        honest=not args.no_honest,
        seed=args.seed,
        level=args.level,
        min_leaf=args.min_leaf,
        loss=args.loss,
    )


def cmd_explain(args) -> RunRecord:
    record = RunRecord(seed=args.seed)
    table, preds = _load_table_and_preds(args, record)
    preds = preds.check_compatible(table)
    weights = _weights(args)
    config = _mtdt_config(args)
    if args.contrast is not None:
        trees = [fit_mtdt(table.features, pairwise_effects(preds, args.contrast), weights, table, config)]
    else:
        trees = explain_all(table, preds, weights, config)
    out_dir = Path(args.out_dir)
    for tree in trees:
        k = tree.contrast_arm
        report = segment_report(tree, table)
        record.outputs.append(store.write_json(tree.to_dict(), out_dir / f"explanation_k{k}.json"))
        record.outputs.append(store.write_json([e.to_dict() for e in report], out_dir / f"segments_k{k}.json"))
        record.outputs.append(store.write_text(render_barplot(report), out_dir / f"segments_k{k}.txt"))
    return record


def cmd_learn(args) -> RunRecord:
    record = RunRecord(seed=args.seed)
    table, preds = _load_table_and_preds(args, record)
    weights = _weights(args)
    out = Path(args.out)
    depth = args.depth

    if args.method == "distill-hte":
        if table.n_arms != 2:
            raise ConfigurationError("distill-hte policies need exactly one treatment arm; merging contrasts is unsupported")
        preds = _require_preds(preds, args.method).check_compatible(table)
        tree = fit_mtdt(table.features, pairwise_effects(preds, 1), weights, table, _mtdt_config(args))
        policy = tree.to_policy()
    elif args.method == "greedy-hte":
        preds = _require_preds(preds, args.method)
        config = GreedyConfig(max_depth=2 if depth is None else depth, min_leaf=args.min_leaf)
        policy = greedy_tree_search(table, preds, weights, config)
    elif args.method == "distill-policy":
        preds = _require_preds(preds, args.method).check_compatible(table)
        config = DistillConfig(max_depth=2 if depth is None else depth, min_leaf=args.min_leaf, seed=args.seed)
        policy = distill_policy(table, naive_hte_policy(preds, weights), config)
    elif args.method == "no-hte-greedy":
        config = NoHteConfig(max_depth=2 if depth is None else depth, min_arm_per_child=args.min_arm)
        segments, policy = fit_no_hte_greedy(table, config, weights)
        record.outputs.append(store.write_json([s.to_dict() for s in segments], _with_suffix(out, ".segments.json")))
    else:
        config = IterativeConfig(max_depth=2 if depth is None else depth, min_arm_per_child=args.min_arm,
                                 iterations=args.iterations, default_arm=args.default_arm)
        segments, policy = fit_no_hte_iterative(table, config, weights)
        record.outputs.append(store.write_json([s.to_dict() for s in segments], _with_suffix(out, ".segments.json")))

    _write_policy(policy, out, record)
    log.info("%s policy:\n%s", args.method, policy.render_text())
    return record


def cmd_ensemble(args) -> RunRecord:
    record = RunRecord(seed=args.seed)
    table, preds = _load_table_and_preds(args, record)
    policies = [store.load_policy(p) for p in args.policies]
    record.inputs.extend(args.policies)
    names = args.names or [sanitize_filename_component(Path(p).stem) or f"policy{q}" for q, p in enumerate(args.policies)]
    if len(names) != len(policies):
        raise ConfigurationError(f"{len(names)} names given for {len(policies)} policies")
    weights = _weights(args)
    if args.method == "guide-explore":
        preds = _require_preds(preds, args.method)
        config = ExploreConfig(guide_depth=args.guide_depth, seed=args.seed, min_leaf=args.min_leaf)
        tree = guide_uniform_explore(table, preds, policies, config, weights, names)
    else:
        config = OpeEnsembleConfig(guide_depth=args.guide_depth, min_leaf=args.min_leaf)
        tree = guide_ope(table, policies, args.propensity, config, weights, names)
    _write_policy(tree, Path(args.out), record)
    return record


def cmd_evaluate(args) -> RunRecord:
    record = RunRecord(seed=args.seed)
    table, preds = _load_table_and_preds(args, record)
    oracle_path = args.oracle or store.oracle_path_for(args.table)
    oracle = store.read_oracle(oracle_path).check_compatible(table)
    record.inputs.append(oracle_path)
    weights = _weights(args)

    explanation = None
    if args.explanation:
        explanation = store.load_policy(args.explanation)
        if not isinstance(explanation, ExplanationTree):
            raise ConfigurationError(f"{args.explanation} is not an explanation tree")
        record.inputs.append(args.explanation)

    if args.policy:
        policy = store.load_policy(args.policy)
        record.inputs.append(args.policy)
        if isinstance(policy, ExplanationTree):
            policy = policy.to_policy()
        arms = assign(policy, table.features)
    elif args.constant_arm is not None:
        arms = ConstantPolicy(args.constant_arm, table.n_features).predict(table.features)
    elif args.random:
        arms = random_assignment(table.n_rows, table.n_arms, args.seed or 0)
    elif preds is not None:
        arms = naive_hte_policy(preds, weights)
    elif explanation is not None:
        arms = explanation.to_policy().predict(table.features)
    else:
        raise ConfigurationError("give one of --policy, --constant-arm, --random, --preds or --explanation")

    effects = {}
    if explanation is not None:
        effects = {
            "predicted_effects": explanation.predict_scalarized(table.features),
            "segments": unroll_tree(explanation, table, weights),
            "contrast_arm": explanation.contrast_arm,
        }
    elif preds is not None:
        contrast = pairwise_effects(preds, 1 if args.contrast is None else args.contrast)
        effects = {"predicted_effects": scalarize_array(contrast.values, weights), "contrast_arm": contrast.contrast_arm}

    report = evaluate_assignment(args.method_name, args.seed, arms, oracle, weights, **effects)
    record.outputs.append(store.write_json(report.to_dict(), args.out))
    return record


def cmd_ope(args) -> RunRecord:
    record = RunRecord(inputs=[args.policy, args.table])
    policy = store.load_policy(args.policy)
    table = _read_table(args)
    value = ope_ips(policy, table, args.propensity, _weights(args))
    log.info("IPS value of %s: %.6g", args.policy, value)
    record.outputs.append(store.write_json({"policy": str(args.policy), "ips_value": value}, args.out))
    return record


def cmd_report(args) -> RunRecord:
    record = RunRecord(inputs=list(args.inputs))
    reports = []
    for path in args.inputs:
        data = store.read_json(path)
        reports.extend(data if isinstance(data, list) else [data])
    summary = aggregate_reports(MetricsReport.from_dict(r) for r in reports)
    out = Path(args.out)
    record.outputs.append(store.write_frame(summary, out))
    text = format_report_table(summary)
    record.outputs.append(store.write_text(text, _with_suffix(out, ".txt")))
    print(text)
    return record


# ---------------- parser ----------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=default_threads(),
                        help="worker threads (env HTEPOLICY_THREADS); results do not depend on it")
    common.add_argument("--arms", type=int, default=None,
                        help="arm count K+1 including control (default: from predictions, oracle, then the table)")
    common.add_argument("--weights", help="comma-separated outcome weights c_1..c_J (default all ones)")
    common.add_argument("--log-level", default=None)

    parser = _Parser(prog="cli.py", description="Interpretable HTE policies, explanation trees and guidance trees.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic experiment or a k-NN oracle")
    p.add_argument("--generator", choices=GENERATORS, default="synthetic-a")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--config", help="SyntheticSpec key-value file (generator 'spec')")
    p.add_argument("--table", help="observed table (generator 'knn')")
    p.add_argument("--k-neighbors", type=int, default=5)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser("split", parents=[common], help="train/validation/test split")
    p.add_argument("--table", required=True)
    p.add_argument("--test-frac", type=float, default=0.4)
    p.add_argument("--val-frac", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("teach", parents=[common], help="fit the T-Learner teacher")
    p.add_argument("--table", required=True)
    p.add_argument("--config", help="TLearnerConfig key-value file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-estimators", type=int, default=None)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--min-arm-rows", type=int, default=None)
    p.add_argument("--base-learner", choices=("gbdt", "tree"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_teach)

    p = sub.add_parser("predict", parents=[common], help="write potential-outcome predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("explain", parents=[common], help="fit explanation trees (Distill-HTE)")
    _add_mtdt_args(p)
    p.add_argument("--contrast", type=int, default=None, help="single contrast arm (default: all)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("learn", parents=[common], help="learn a policy tree")
    _add_mtdt_args(p, preds_required=False)
    p.add_argument("--method", choices=LEARN_METHODS, required=True)
    p.add_argument("--min-arm", type=int, default=25, help="rows per arm per child (no-HTE methods)")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--default-arm", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_learn)

    p = sub.add_parser("ensemble", parents=[common], help="learn a guidance tree over policies")
    p.add_argument("--method", choices=ENSEMBLE_METHODS, required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--preds")
    p.add_argument("--policies", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--guide-depth", type=int, default=1)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--propensity", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="regret, value, PEHE against an oracle")
    p.add_argument("--table", required=True)
    p.add_argument("--oracle", help="default: <table>.oracle.csv")
    p.add_argument("--policy")
    p.add_argument("--constant-arm", type=int, default=None)
    p.add_argument("--random", action="store_true")
    p.add_argument("--preds")
    p.add_argument("--explanation")
    p.add_argument("--contrast", type=int, default=None)
    p.add_argument("--method-name", default="policy")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ope", parents=[common], help="IPS off-policy value of a policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--propensity", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ope)

    p = sub.add_parser("report", parents=[common], help="aggregate metric reports (mean ± sd per method)")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)
    return parser


def _add_mtdt_args(p: argparse.ArgumentParser, preds_required: bool = True) -> None:
    p.add_argument("--table", required=True)
    p.add_argument("--preds", required=preds_required)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--n-min", type=int, default=10)
    p.add_argument("--no-honest", action="store_true")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--loss", choices=("weighted", "literal"), default="weighted")
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


# -------------- run --------------

def _output_dir(args) -> Path:
    out_dir = getattr(args, "out_dir", None)
    return Path(out_dir) if out_dir else Path(args.out).parent


def run(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level)

    ok, msg = store.check_store(_output_dir(args))
    if not ok:
        log.error(msg)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_IO

    try:
        record = args.handler(args)
    except HtePolicyError as e:
        log.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        log.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    if record.outputs:
        config = {k: v for k, v in vars(args).items() if k not in RUN_ONLY_ARGS}
        try:
            store.append_manifest(Path(record.outputs[0]).parent, args.command, record.inputs,
                                  record.outputs, record.seed, config)
        except OSError as e:
            print(f"error: cannot append manifest: {e}", file=sys.stderr)
            return EXIT_IO
    for path in record.outputs:
        log.info("wrote %s", path)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(run())
