"""Experiment configuration, hyperparameter search, run artifacts and diagnostics.

Config files are JSON::

    {
      "name": "blobs-emr",
      "tasks": {"kind": "blobs", "num_tasks": 5, "classes_per_task": 2, "dim": 20,
                "samples_per_class": 125, "spread": 3.0, "seed": 0},
      "net": {"hidden": [100, 100]},
      "strategy": {"mode": "emr", "estimator": "vanilla", "eta": 0.07, "momentum": 0.9},
      "seeds": [1, 2, 3],
      "grid": {"eta": [0.03, 0.07], "lambda": [0.1, 1.0]},
      "search_tasks": 0,
      "n_jobs": 1
    }

``tasks.kind`` may also be ``"idx"`` (``images``, ``labels``, optional
``test_images``/``test_labels``) or ``"csv"`` (``path``, optional
``test_path`` and ``label_column``); both take ``classes_per_task`` and
``seed``. Every strategy field of :class:`emrlab.trainer.Strategy` is
accepted under ``strategy``.
"""

import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import importance as imp
from .exceptions import ConfigError, DivergenceError
from .metrics import (average_accuracy, average_forgetting, cka_profile, mean_matrix,
                      metrics_report)
from .regularizer import count_violations, stability_report
from .tasks import load_csv, load_idx, split_by_class, synth_blobs
from .trainer import Strategy, init_net, regularization_scores, run_single, shared_mask, train_task

RUNS_DIR_ENV = "EMRLAB_RUNS_DIR"
PROBE_SIZE = 256

DEFAULT_TASKS = {"kind": "blobs", "num_tasks": 5, "classes_per_task": 2, "dim": 20,
                 "samples_per_class": 125, "spread": 3.0, "seed": 0}
DEFAULT_STRATEGY = {"mode": "emr", "estimator": "vanilla", "eta": 0.07, "momentum": 0.9,
                    "batch_size": 10}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    tasks: dict = field(default_factory=lambda: dict(DEFAULT_TASKS))
    strategy: Strategy = field(default_factory=lambda: Strategy(**DEFAULT_STRATEGY))
    hidden: tuple = (100, 100)
    seeds: tuple = (1, 2, 3)
    grid: dict = field(default_factory=dict)
    search_tasks: int = 0
    n_jobs: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {"name", "tasks", "net", "strategy", "seeds", "grid", "search_tasks", "n_jobs"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            strategy = Strategy.from_dict({**DEFAULT_STRATEGY, **d.get("strategy", {})})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid strategy: {exc}") from exc
        cfg = cls(
            name=str(d.get("name", "experiment")),
            tasks={**DEFAULT_TASKS, **d["tasks"]} if d.get("tasks", {}).get("kind", "blobs") == "blobs"
            else dict(d["tasks"]),
            strategy=strategy,
            hidden=tuple(int(h) for h in d.get("net", {}).get("hidden", (100, 100))),
            seeds=tuple(int(s) for s in d.get("seeds", (1, 2, 3))),
            grid={k: [float(v) for v in vs] for k, vs in d.get("grid", {}).items()},
            search_tasks=int(d.get("search_tasks", 0)),
            n_jobs=int(d.get("n_jobs", 1)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if set(self.grid) - {"eta", "lambda"}:
            raise ConfigError("grid accepts only 'eta' and 'lambda'")
        if self.search_tasks < 0:
            raise ConfigError("search_tasks must be non-negative")
        if self.search_tasks and not any(self.grid.values()):
            raise ConfigError("search_tasks > 0 needs a non-empty grid")
        if any(v <= 0 for v in self.grid.get("eta", [])) or any(v < 0 for v in self.grid.get("lambda", [])):
            raise ConfigError("grid learning rates must be positive and lambdas non-negative")
        if self.tasks.get("kind") not in ("blobs", "idx", "csv"):
            raise ConfigError(f"unknown task kind {self.tasks.get('kind')!r}")

    def to_dict(self):
        return {
            "name": self.name,
            "tasks": self.tasks,
            "net": {"hidden": list(self.hidden)},
            "strategy": self.strategy.to_dict(),
            "seeds": list(self.seeds),
            "grid": self.grid,
            "search_tasks": self.search_tasks,
            "n_jobs": self.n_jobs,
        }


def build_stream(spec):
    spec = dict(spec)
    kind = spec.pop("kind", "blobs")
    try:
        if kind == "blobs":
            return synth_blobs(**spec)
        cpt, seed = spec.get("classes_per_task", 2), spec.get("seed", 0)
        if kind == "idx":
            train = load_idx(spec["images"], spec["labels"])
            test = (load_idx(spec["test_images"], spec["test_labels"])
                    if "test_images" in spec else None)
        elif kind == "csv":
            col = spec.get("label_column", "label")
            train = load_csv(spec["path"], col)
            test = load_csv(spec["test_path"], col) if "test_path" in spec else None
        else:
            raise ConfigError(f"unknown task kind {kind!r}")
        return split_by_class(train, cpt, seed=seed, test=test)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"cannot build task stream: {exc}") from exc


def runs_root():
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def probe_batch(task, seed=0, size=PROBE_SIZE):
    """Seeded sample (without replacement) of up to ``size`` test rows of ``task``."""
    n = task.X_test.shape[0]
    if n == 0:
        return task.X_train[:size]
    idx = np.sort(np.random.default_rng(seed).choice(n, size=min(size, n), replace=False))
    return task.X_test[idx]


# -- grid search -----------------------------------------------------------


class GridSearchFailed(RuntimeError):
    def __init__(self, points):
        super().__init__("every grid point was rejected or unstable")
        self.points = points


def first_task_scores(stream, strategy, seed, hidden):
    """Consolidated importance after the first task, as the regularizer would see it."""
    net = init_net(stream, hidden, seed)
    state = imp.ImportanceState.create(net.n_params, strategy.estimator, net.parameters(),
                                       strategy.damping)
    train_task(net, stream[0], strategy, state, None, seed=seed)
    return net, state, regularization_scores(state, strategy, shared_mask(net, strategy.regularize_heads),
                                             seed=seed + 1)


def _evaluate_point(args):
    stream, strategy, seed, hidden = args
    try:
        res = run_single(stream, strategy, seed, hidden)
    except DivergenceError as exc:
        return {"status": "unstable", "first_nonfinite_step": exc.report.get("first_nonfinite_step")}
    return {"status": "ok", "average_accuracy": average_accuracy(res.matrix),
            "average_forgetting": average_forgetting(res.matrix)}


def grid_search(stream, strategy, grid, seed, hidden, n_jobs=1):
    """Pick ``(eta, lambda)`` with the best average accuracy on ``stream``.

    Points whose first-task importance already violates ``eta*lam*|alpha| < 1``
    are skipped without training. Ties prefer the lower lambda, then the lower
    learning rate.
    """
    etas = sorted(grid.get("eta") or [strategy.eta])
    lams = sorted(grid.get("lambda") or [strategy.lam]) if strategy.mode == "quadratic" else [strategy.lam]
    points, jobs = [], []
    for eta in etas:
        probe = replace(strategy, eta=eta)
        _, _, alpha0 = first_task_scores(stream, probe, seed, hidden)
        for lam in lams:
            count, frac = count_violations(eta, lam, alpha0) if strategy.mode == "quadratic" else (0, 0.0)
            point = {"eta": eta, "lambda": lam, "violations": count, "fraction": frac}
            points.append(point)
            if count:
                point["status"] = "rejected"
            else:
                jobs.append((len(points) - 1, (stream, replace(strategy, eta=eta, lam=lam), seed, tuple(hidden))))
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_evaluate_point, [j for _, j in jobs]))
    else:
        outcomes = [_evaluate_point(j) for _, j in jobs]
    for (i, _), out in zip(jobs, outcomes):
        points[i].update(out)
    ok = [p for p in points if p.get("status") == "ok"]
    if not ok:
        raise GridSearchFailed(points)
    best = min(ok, key=lambda p: (-p["average_accuracy"], p["lambda"], p["eta"]))
    return best, points


# -- run -------------------------------------------------------------------


def _seed_outputs(res, strategy, stream, seed_dir):
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "accuracy_matrix.csv").write_text(res.matrix.to_csv())
    probe = probe_batch(stream[0], seed=res.seed)
    cka_values = cka_profile(res.first_task_net, res.net, probe) if res.net.depth else []
    report = metrics_report(res.matrix, cka_values)
    _dump_json(report, seed_dir / "metrics.json")
    alpha = res.state.alpha_prev
    imp.dump_scores(alpha, res.net.layer_map, seed_dir / "importance.csv",
                    seed_dir / "importance_summary.json")
    alpha_reg = regularization_scores(res.state, strategy, shared_mask(res.net, strategy.regularize_heads))
    _dump_json(stability_report(strategy.eta, strategy.lam, alpha_reg), seed_dir / "stability.json")
    return report


def _run_seed(args):
    stream, strategy, seed, hidden = args
    try:
        return run_single(stream, strategy, seed, hidden)
    except DivergenceError as exc:
        return exc


def run_experiment(config, out_dir=None):
    """Execute ``config`` and write the run directory; returns ``(run_dir, summary)``.

    Raises :class:`DivergenceError` (after writing ``stability.json``) when a
    seed diverges and :class:`GridSearchFailed` when no grid point survives.
    """
    run_dir = Path(out_dir) if out_dir is not None else runs_root() / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    stream = build_stream(config.tasks)
    if config.search_tasks >= len(stream):
        raise ConfigError(f"search_tasks ({config.search_tasks}) must be below the task count ({len(stream)})")
    stream.write_manifest(run_dir / "manifest.json")

    strategy = config.strategy
    search = None
    if config.search_tasks:
        try:
            best, points = grid_search(stream.subset(0, config.search_tasks), strategy, config.grid,
                                       config.seeds[0], config.hidden, config.n_jobs)
        except GridSearchFailed as exc:
            _dump_json({"selected": None, "points": exc.points}, run_dir / "search.json")
            raise
        strategy = replace(strategy, eta=best["eta"], lam=best["lambda"])
        search = {"selected": {"eta": best["eta"], "lambda": best["lambda"]}, "points": points}
        _dump_json(search, run_dir / "search.json")
        stream = stream.subset(config.search_tasks)

    resolved = replace(config, strategy=strategy)
    _dump_json(resolved.to_dict(), run_dir / "config.json")

    jobs = [(stream, strategy, s, tuple(config.hidden)) for s in config.seeds]
    if config.n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]

    per_seed = {}
    for seed, res in zip(config.seeds, results):
        if isinstance(res, DivergenceError):
            seed_dir = run_dir / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            _dump_json({**res.report, "seed": seed}, seed_dir / "stability.json")
            _dump_json(res.report, run_dir / "stability.json")
            raise res
        per_seed[str(seed)] = _seed_outputs(res, strategy, stream, run_dir / f"seed_{seed}")

    mean = mean_matrix([r.matrix for r in results])
    (run_dir / "accuracy_matrix.csv").write_text(mean.to_csv())
    cka_runs = [v["cka_profile"] for v in per_seed.values()]
    summary = {
        "per_seed": per_seed,
        "mean": {
            "average_accuracy": float(np.mean([v["average_accuracy"] for v in per_seed.values()])),
            "average_forgetting": float(np.mean([v["average_forgetting"] for v in per_seed.values()])),
            "per_task_forgetting": np.mean([v["per_task_forgetting"] for v in per_seed.values()],
                                           axis=0).tolist(),
            "cka_profile": _mean_ignoring_none(cka_runs),
        },
        "strategy": strategy.to_dict(),
        "search": search["selected"] if search else None,
    }
    _dump_json(summary, run_dir / "metrics.json")
    alpha_reg = regularization_scores(results[0].state, strategy,
                                      shared_mask(results[0].net, strategy.regularize_heads))
    _dump_json(stability_report(strategy.eta, strategy.lam, alpha_reg), run_dir / "stability.json")
    return run_dir, summary


def _mean_ignoring_none(rows):
    out = []
    for vals in zip(*rows):
        vals = [v for v in vals if v is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out


# -- diagnostics -------------------------------------------------------------

NEGATIVE_SCORE_VARIANTS = {
    "original": (),
    "all-pos": ("abs",),
    "0.1%-neg": ("keep_negative:0.001",),
}


def diagnose_violations(config, lambdas, seed=None):
    """Violation counts of first-task ``|alpha|`` across ``lambdas``, plus observed stability.

    Stability is checked by training the whole stream in quadratic mode.
    """
    seed = config.seeds[0] if seed is None else seed
    stream = build_stream(config.tasks)
    strategy = replace(config.strategy, mode="quadratic")
    _, _, alpha0 = first_task_scores(stream, replace(strategy, transforms=()), seed, config.hidden)
    alpha0 = np.abs(alpha0)
    rows = []
    for lam in sorted(lambdas):
        count, frac = count_violations(strategy.eta, lam, alpha0)
        out = _evaluate_point((stream, replace(strategy, lam=lam), seed, config.hidden))
        rows.append({"lambda": lam, "count": count, "fraction": frac, "stable": out["status"] == "ok"})
    return rows


def diagnose_layer_importance(config, seed=None):
    """Per-layer mean ``|alpha|`` after the first task; also returns the raw scores and net."""
    seed = config.seeds[0] if seed is None else seed
    stream = build_stream(config.tasks)
    net, state, _ = first_task_scores(stream, config.strategy, seed, config.hidden)
    return imp.layer_mean_importance(state.alpha_prev, net.layer_map), state.alpha_prev, net


def diagnose_cka(config, seed=None):
    """CKA per trunk layer between the first-task model and the final model."""
    seed = config.seeds[0] if seed is None else seed
    stream = build_stream(config.tasks)
    res = run_single(stream, config.strategy, seed, config.hidden)
    values = cka_profile(res.first_task_net, res.net, probe_batch(stream[0], seed=seed))
    return [{"layer": f"trunk.{i}", "cka": v} for i, v in enumerate(values)], res


def diagnose_negative_scores(config, lambdas, seed=None):
    """Quadratic-mode stability and accuracy for raw, all-positive and 0.1%-negative scores."""
    seed = config.seeds[0] if seed is None else seed
    stream = build_stream(config.tasks)
    base = replace(config.strategy, mode="quadratic")
    rows = []
    for variant, transforms in NEGATIVE_SCORE_VARIANTS.items():
        for lam in sorted(lambdas):
            out = _evaluate_point((stream, replace(base, lam=lam, transforms=transforms), seed,
                                   config.hidden))
            acc = out.get("average_accuracy")
            rows.append({"variant": variant, "lambda": lam,
                         "average_accuracy": acc if acc is not None else math.nan,
                         "stable": out["status"] == "ok"})
    return rows
