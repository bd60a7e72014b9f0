"""Per-parameter importance estimators and score transforms.

Estimators accumulate an in-task score (``alpha_task``) while a task is being
learned. At the task boundary the final in-task score is merged into the
consolidated score (``alpha_prev``) that regularizes the next task.

Supported estimators:

* ``ewc``     running mean of squared loss gradients (empirical Fisher diagonal)
* ``mas``     running mean of ``|d(0.5 ||logits||^2)/d theta|``
* ``si``      path integral of ``-grad * delta_theta``, normalized by total movement
* ``rwalk``   Fisher running mean plus the SI path score
* ``vanilla`` unit importance everywhere
* ``random``  uniform ``[0, 1]`` importance, redrawn per task
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_vector, check_same_length

ESTIMATORS = ("ewc", "mas", "si", "rwalk", "vanilla", "random")
DEFAULT_SI_DAMPING = 1e-3


@dataclass
class ImportanceState:
    """Importance bookkeeping for one continual-learning run."""

    estimator: str
    alpha_prev: np.ndarray
    alpha_task: np.ndarray
    si_path: np.ndarray
    theta_start: np.ndarray
    count: int = 0
    tasks_seen: int = 0
    damping: float = DEFAULT_SI_DAMPING
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, n_params, estimator, theta_start=None, damping=DEFAULT_SI_DAMPING):
        if estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
        if theta_start is None:
            theta_start = np.zeros(n_params)
        zeros = np.zeros(n_params)
        return cls(estimator, zeros.copy(), zeros.copy(), zeros.copy(),
                   as_vector(theta_start).copy(), damping=damping)

    @property
    def n_params(self):
        return self.alpha_prev.shape[0]

    def begin_task(self, theta_start):
        """Reset in-task buffers and snapshot the starting parameters."""
        theta_start = as_vector(theta_start, "theta_start")
        if theta_start.shape[0] != self.n_params:
            raise ValueError("theta_start length does not match the importance state")
        self.alpha_task = np.zeros(self.n_params)
        self.si_path = np.zeros(self.n_params)
        self.theta_start = theta_start.copy()
        self.count = 0
        return self


def vanilla_scores(length):
    if length <= 0:
        raise ValueError("length must be positive")
    return np.ones(length)


def random_scores(length, seed):
    if length <= 0:
        raise ValueError("length must be positive")
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=length)


def running_mean_update(state, sample):
    """``m <- (count * m + sample) / (count + 1)``, one call per batch."""
    sample = as_vector(sample, "sample")
    if sample.shape[0] != state.n_params:
        raise ValueError("sample length does not match the importance state")
    if not np.all(np.isfinite(sample)):
        raise ValueError("non-finite importance sample")
    n = state.count
    state.alpha_task = (n * state.alpha_task + sample) / (n + 1)
    state.count = n + 1
    return state


def ewc_accumulate(state, grad):
    """Fold one batch gradient into the empirical-Fisher running mean."""
    if state.estimator not in ("ewc", "rwalk"):
        raise ValueError(f"ewc_accumulate called on a {state.estimator!r} state")
    grad = as_vector(grad, "grad")
    return running_mean_update(state, grad * grad)


def mas_accumulate(state, net, batch, head):
    """Fold the output sensitivity of ``head`` on ``batch`` into the running mean."""
    if state.estimator != "mas":
        raise ValueError(f"mas_accumulate called on a {state.estimator!r} state")
    return running_mean_update(state, np.abs(net.output_sensitivity(batch, head)))


def si_accumulate(state, grad, delta_theta):
    """Add ``-grad * delta_theta`` to the path accumulator."""
    if state.estimator not in ("si", "rwalk"):
        raise ValueError(f"si_accumulate called on a {state.estimator!r} state")
    grad, delta_theta, _ = check_same_length(grad=grad, delta_theta=delta_theta,
                                             state=state.si_path)
    state.si_path = state.si_path - grad * delta_theta
    return state


def si_finalize(state, theta_end, damping=None):
    """Path score divided by squared total movement plus damping. Signs are kept."""
    damping = state.damping if damping is None else damping
    if not damping > 0:
        raise ValueError("SI damping must be positive")
    theta_end, start = check_same_length(theta_end=theta_end, theta_start=state.theta_start)
    return state.si_path / ((theta_end - start) ** 2 + damping)


def rwalk_scores(state, theta_end, damping=None):
    if state.estimator != "rwalk":
        raise ValueError(f"rwalk_scores called on a {state.estimator!r} state")
    return state.alpha_task + si_finalize(state, theta_end, damping)


def task_scores(state, theta):
    """Current in-task importance, evaluated at parameters ``theta``."""
    if state.estimator == "si":
        return si_finalize(state, theta)
    if state.estimator == "rwalk":
        return rwalk_scores(state, theta)
    return state.alpha_task


def consolidate(alpha_prev, alpha_task):
    """``(|alpha_task| + |alpha_prev|) / 2``, always non-negative."""
    alpha_prev, alpha_task = check_same_length(alpha_prev=alpha_prev, alpha_task=alpha_task)
    return (np.abs(alpha_task) + np.abs(alpha_prev)) / 2.0


def consolidate_signed(alpha_prev, alpha_task):
    """``(alpha_prev + alpha_task) / 2`` without taking magnitudes.

    Quadratic regularizers merge raw scores this way, which lets negative
    scores reach the penalty term.
    """
    alpha_prev, alpha_task = check_same_length(alpha_prev=alpha_prev, alpha_task=alpha_task)
    return (alpha_prev + alpha_task) / 2.0


def end_task(state, theta_end, signed=False):
    """Merge the final in-task scores into ``alpha_prev`` and return them.

    The first task has no previous scores to average with, so its scores are
    taken as they are (magnitudes unless ``signed``).
    """
    final = task_scores(state, theta_end).copy()
    if state.tasks_seen == 0:
        state.alpha_prev = final.copy() if signed else np.abs(final)
    elif signed:
        state.alpha_prev = consolidate_signed(state.alpha_prev, final)
    else:
        state.alpha_prev = consolidate(state.alpha_prev, final)
    state.tasks_seen += 1
    state.history.append(final)
    return final


def transform_abs(scores):
    return np.abs(as_vector(scores, "scores"))


def transform_keep_negative_fraction(scores, frac, seed):
    """Take magnitudes except for a seeded subset of the negative entries.

    ``round(frac * len(scores))`` negative entries (or all of them, if fewer)
    keep their sign.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError("frac must be in [0, 1]")
    scores = as_vector(scores, "scores")
    out = np.abs(scores)
    negatives = np.flatnonzero(scores < 0)
    keep = min(int(round(frac * scores.shape[0])), negatives.shape[0])
    if keep:
        chosen = np.random.default_rng(seed).choice(negatives, size=keep, replace=False)
        out[chosen] = scores[chosen]
    return out


def parse_transform(spec):
    """Parse ``"abs"`` or ``"keep_negative:<frac>"`` into ``fn(scores, seed)``."""
    if spec == "abs":
        return lambda scores, seed: transform_abs(scores)
    if spec.startswith("keep_negative:"):
        frac = float(spec.split(":", 1)[1])
        if not 0.0 <= frac <= 1.0:
            raise ValueError("frac must be in [0, 1]")
        return lambda scores, seed: transform_keep_negative_fraction(scores, frac, seed)
    raise ValueError(f"unknown importance transform {spec!r}")


def apply_transforms(scores, transforms, seed=0):
    for spec in transforms:
        scores = parse_transform(spec)(scores, seed)
    return scores


def layer_mean_importance(scores, layer_map):
    """Mean ``|score|`` per layer, in layer order (shallow to deep).

    Returns a list of ``(layer_name, mean)`` pairs.
    """
    scores = as_vector(scores, "scores")
    if scores.shape[0] != len(layer_map):
        raise ValueError(f"layer map covers {len(layer_map)} indices, scores have {scores.shape[0]}")
    counts = np.bincount(layer_map.index, minlength=len(layer_map.names))
    sums = np.bincount(layer_map.index, weights=np.abs(scores), minlength=len(layer_map.names))
    return [(name, float(s / c) if c else float("nan"))
            for name, s, c in zip(layer_map.names, sums, counts)]


def dump_scores(scores, layer_map, csv_path, summary_path):
    """Write ``param_index,layer_id,score`` rows and a JSON of per-layer means."""
    scores = as_vector(scores, "scores")
    with open(csv_path, "w", newline="") as fh:
        fh.write("param_index,layer_id,score\n")
        for k, (li, s) in enumerate(zip(layer_map.index, scores)):
            fh.write(f"{k},{layer_map.names[li]},{float(s)!r}\n")
    means = layer_mean_importance(scores, layer_map)
    with open(summary_path, "w") as fh:
        json.dump({"layers": [{"layer_id": n, "mean_abs_score": m} for n, m in means]},
                  fh, indent=2)
    return means
