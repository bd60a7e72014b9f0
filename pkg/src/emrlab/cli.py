"""Command line entry point.

    emrlab run --config exp.json [--seeds 1,2,3] [--strategy emr:mas] [--out DIR]
    emrlab diagnose violations --config exp.json --lambdas 1,10,100
    emrlab diagnose layer-importance --config exp.json --estimator mas
    emrlab diagnose cka --config exp.json --strategy quadratic:ewc --lam 1
    emrlab diagnose negative-scores --config exp.json --estimator si --lambdas 0.01,0.1,1

Output directories default to ``$EMRLAB_RUNS_DIR`` (or ``./runs``).
Exit codes: 0 success, 2 unstable run, 3 configuration error.
"""

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .exceptions import ConfigError, DivergenceError
from .runner import (ExperimentConfig, GridSearchFailed, diagnose_cka, diagnose_layer_importance,
                     diagnose_negative_scores, diagnose_violations, run_experiment, runs_root)
from . import importance as imp

EXIT_OK, EXIT_UNSTABLE, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("emrlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON experiment config (default: built-in benchmark)")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds, overrides the config")
    p.add_argument("--strategy", help="MODE[:ESTIMATOR], e.g. emr:mas or plain")
    p.add_argument("--estimator", choices=imp.ESTIMATORS)
    p.add_argument("--eta", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--out", type=Path, help="output directory")


def build_parser():
    parser = _Parser(prog="emrlab", description="Quadratic regularization and EMR experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train a task sequence and write a run directory")
    _add_common(run)
    run.add_argument("--name", help="run name (default: config name)")
    run.add_argument("--jobs", type=int, help="parallel worker processes")

    diag = sub.add_parser("diagnose", help="stability and drift reports")
    dsub = diag.add_subparsers(dest="diagnostic", required=True, parser_class=_Parser)
    for name in ("violations", "negative-scores"):
        p = dsub.add_parser(name)
        _add_common(p)
        p.add_argument("--lambdas", type=_floats, required=True)
    for name in ("layer-importance", "cka"):
        _add_common(dsub.add_parser(name))
    return parser


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.strategy:
        mode, _, est = args.strategy.partition(":")
        changes["mode"] = mode
        if est:
            changes["estimator"] = est
    for flag, field in (("estimator", "estimator"), ("eta", "eta"), ("lam", "lam"),
                        ("momentum", "momentum")):
        if getattr(args, flag, None) is not None:
            changes[field] = getattr(args, flag)
    try:
        strategy = replace(cfg.strategy, **changes)
    except ValueError as exc:
        raise ConfigError(f"invalid strategy override: {exc}") from exc
    cfg = replace(cfg, strategy=strategy)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if getattr(args, "name", None):
        cfg = replace(cfg, name=args.name)
    if getattr(args, "jobs", None):
        cfg = replace(cfg, n_jobs=args.jobs)
    cfg.validate()
    return cfg


def _write_csv(rows, columns, path):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def cmd_run(args):
    cfg = load_config(args)
    run_dir, summary = run_experiment(cfg, args.out)
    print(json.dumps({"run_dir": str(run_dir), **summary["mean"]}, indent=2))
    return EXIT_OK


def cmd_diagnose(args):
    cfg = load_config(args)
    out = args.out if args.out is not None else runs_root() / f"diagnose-{args.diagnostic}"
    out.mkdir(parents=True, exist_ok=True)
    kind = args.diagnostic
    if kind == "violations":
        rows = diagnose_violations(cfg, args.lambdas)
        print(_write_csv(rows, ["lambda", "count", "fraction", "stable"], out / "violations.csv"), end="")
    elif kind == "negative-scores":
        rows = diagnose_negative_scores(cfg, args.lambdas)
        print(_write_csv(rows, ["variant", "lambda", "average_accuracy", "stable"],
                         out / "negative_scores.csv"), end="")
    elif kind == "layer-importance":
        means, scores, net = diagnose_layer_importance(cfg)
        imp.dump_scores(scores, net.layer_map, out / "importance.csv", out / "importance_summary.json")
        rows = [{"layer_id": n, "mean_abs_score": m} for n, m in means]
        print(_write_csv(rows, ["layer_id", "mean_abs_score"], out / "layer_importance.csv"), end="")
    elif kind == "cka":
        rows, _ = diagnose_cka(cfg)
        print(_write_csv(rows, ["layer", "cka"], out / "cka.csv"), end="")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_diagnose(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(json.dumps({"error": "unstable", **exc.report}, default=str), file=sys.stderr)
        return EXIT_UNSTABLE
    except GridSearchFailed as exc:
        print(json.dumps({"error": "all grid points unstable", "points": exc.points}, default=str),
              file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
