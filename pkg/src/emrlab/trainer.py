"""Continual-learning training loops for plain, quadratic and EMR strategies.

Task ``n`` is trained for exactly one epoch. Each batch yields one update per
variant (the batch itself plus an optional augmented copy):

1. task gradient on the batch (``plain`` and ``emr``), or task gradient plus the
   quadratic penalty gradient (``quadratic``);
2. the in-task importance ``alpha_task`` is updated from that same batch;
3. ``emr`` only: parameters are averaged with the previous-task snapshot using
   the relative importance of ``alpha_prev`` versus ``alpha_task``.

At the end of the task the in-task scores are merged into ``alpha_prev``.
Head parameters are task-specific and excluded from regularization unless
``Strategy.regularize_heads`` is set.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import importance as imp
from .exceptions import DivergenceError
from .metrics import AccuracyMatrix
from .net import MultiHeadNet
from .regularizer import (MODES, RegConfig, emr_average, quad_reg_step, relative_importance,
                          stability_report)

AUGMENTATIONS = ("none", "flip", "noise")


@dataclass(frozen=True)
class Strategy:
    mode: str = "plain"
    estimator: str = "vanilla"
    eta: float = 0.05
    lam: float = 0.0
    momentum: float = 0.0
    batch_size: int = 10
    transforms: tuple = ()
    augmentation: str = "none"
    noise_sigma: float = 0.1
    damping: float = imp.DEFAULT_SI_DAMPING
    regularize_heads: bool = False
    forced_R: float = None
    divergence_threshold: float = 1e8

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        self.reg  # validates eta, lam, mode
        if self.estimator not in imp.ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.forced_R is not None and not 0.0 <= self.forced_R <= 1.0:
            raise ValueError("forced_R must be in [0, 1]")
        for spec in self.transforms:
            imp.parse_transform(spec)

    @property
    def reg(self):
        return RegConfig(self.eta, self.lam, self.mode)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown strategy fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {f: (list(v) if isinstance(v, tuple) else v)
                for f, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}


@dataclass(frozen=True)
class Snapshot:
    """Parameters at the end of a task; the array is read-only."""

    theta_star: np.ndarray
    task: int

    @classmethod
    def capture(cls, net, task):
        theta = net.parameters()
        theta.flags.writeable = False
        return cls(theta, task)


@dataclass
class TrainResult:
    net: MultiHeadNet
    state: imp.ImportanceState
    steps: int
    losses: list = field(default_factory=list)


def augment_batch(batch, kind, image_shape=None, rng=None, sigma=0.0):
    """Return an augmented copy of ``batch``; the input is never modified.

    ``flip`` mirrors the width axis of image-shaped rows (``image_shape`` is
    ``(height, width)`` or ``(height, width, channels)``); ``noise`` adds
    seeded Gaussian noise with standard deviation ``sigma``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if kind == "none":
        return batch.copy()
    if kind == "flip":
        if not image_shape:
            raise ValueError("flip augmentation needs image-shaped inputs")
        if int(np.prod(image_shape)) != batch.shape[1]:
            raise ValueError(f"image shape {image_shape} does not match width {batch.shape[1]}")
        imgs = batch.reshape(batch.shape[0], *image_shape)
        return np.ascontiguousarray(imgs[:, :, ::-1]).reshape(batch.shape)
    if kind == "noise":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        return batch + rng.normal(0.0, 1.0, size=batch.shape) * sigma
    raise ValueError(f"unknown augmentation {kind!r}")


def n_steps(n_samples, batch_size, augmentation="none"):
    """Optimizer steps in one epoch."""
    steps = math.ceil(n_samples / batch_size)
    return 2 * steps if augmentation != "none" else steps


def shared_mask(net, regularize_heads=False):
    if regularize_heads:
        return np.ones(net.n_params, dtype=bool)
    return net.layer_map.mask("trunk.")


def regularization_scores(state, strategy, mask, seed=0):
    """``alpha_prev`` after configured transforms, zeroed outside ``mask``."""
    alpha = imp.apply_transforms(state.alpha_prev, strategy.transforms, seed)
    return np.where(mask, alpha, 0.0)


def _diverged(message, strategy, alpha, step):
    return DivergenceError(message, stability_report(strategy.eta, strategy.lam, alpha,
                                                     first_nonfinite_step=step))


def train_task(net, task, strategy, state, snapshot=None, seed=0, step_offset=0, on_step=None):
    """Train ``net`` on one task for a single epoch.

    ``snapshot`` holds the previous-task parameters; without one the
    parameters at entry serve as the anchor. ``on_step(step, theta)`` is
    called after every update. Mutates and returns ``net`` and ``state``
    inside a :class:`TrainResult`.
    """
    rng = np.random.default_rng([seed, task.task_id, 0])
    aug_rng = np.random.default_rng([seed, task.task_id, 1])
    head = task.task_id
    theta_star = snapshot.theta_star if snapshot is not None else net.parameters()
    state.begin_task(net.parameters())

    mask = shared_mask(net, strategy.regularize_heads)
    alpha_reg = regularization_scores(state, strategy, mask, seed=seed + task.task_id)
    static_scores = None
    if strategy.estimator == "vanilla":
        static_scores = imp.vanilla_scores(net.n_params)
    elif strategy.estimator == "random":
        static_scores = imp.random_scores(net.n_params, [seed, task.task_id, 2])

    eta, lam, mode = strategy.eta, strategy.lam, strategy.mode
    velocity = np.zeros(net.n_params) if strategy.momentum else None
    forced = None if strategy.forced_R is None else np.full(net.n_params, strategy.forced_R)

    order = rng.permutation(task.y_train.shape[0])
    steps, losses = 0, []
    for start in range(0, order.shape[0], strategy.batch_size):
        idx = order[start:start + strategy.batch_size]
        xb, yb = task.X_train[idx], task.y_train[idx]
        variants = [xb]
        if strategy.augmentation != "none":
            variants.append(augment_batch(xb, strategy.augmentation, task.image_shape,
                                          aug_rng, strategy.noise_sigma))
        for x in variants:
            step_no = step_offset + steps
            theta = net.parameters()
            loss, grad = net.loss_and_grad(x, yb, head)
            if not (math.isfinite(loss) and loss < strategy.divergence_threshold):
                raise _diverged(f"loss diverged ({loss}) at step {step_no}", strategy, alpha_reg, step_no)
            if not np.all(np.isfinite(grad)):
                raise _diverged(f"non-finite gradient at step {step_no}", strategy, alpha_reg, step_no)
            if strategy.estimator == "mas":
                imp.mas_accumulate(state, net, x, head)

            try:
                if velocity is None:
                    if mode == "quadratic":
                        theta_hat = quad_reg_step(theta, theta_star, alpha_reg, grad, eta, lam)
                    else:
                        theta_hat = theta - eta * grad
                else:
                    total = grad + lam * alpha_reg * (theta - theta_star) if mode == "quadratic" else grad
                    velocity = strategy.momentum * velocity + total
                    theta_hat = theta - eta * velocity
            except DivergenceError:
                raise _diverged(f"parameters diverged at step {step_no}", strategy, alpha_reg, step_no)

            if strategy.estimator in ("ewc", "rwalk"):
                imp.ewc_accumulate(state, grad)
            if strategy.estimator in ("si", "rwalk"):
                imp.si_accumulate(state, grad, theta_hat - theta)
            if static_scores is not None:
                imp.running_mean_update(state, static_scores)

            theta_new = theta_hat
            if mode == "emr" or forced is not None:
                R = forced if forced is not None else relative_importance(
                    alpha_reg, imp.task_scores(state, theta_hat))
                theta_new = emr_average(theta_hat, theta_star, R)
                if strategy.estimator in ("si", "rwalk"):
                    imp.si_accumulate(state, grad, theta_new - theta_hat)

            if not np.all(np.isfinite(theta_new)):
                raise _diverged(f"parameters diverged at step {step_no}", strategy, alpha_reg, step_no)
            net.set_parameters(theta_new)
            losses.append(loss)
            steps += 1
            if on_step is not None:
                on_step(step_no, theta_new)

    imp.end_task(state, net.parameters(), signed=(mode == "quadratic"))
    return TrainResult(net, state, steps, losses)


def evaluate(net, stream, upto):
    """Test accuracy of tasks ``0..upto`` using their own heads."""
    return [net.accuracy(t.X_test, t.y_test, t.task_id) for t in stream.tasks[:upto + 1]]


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    net: MultiHeadNet
    first_task_net: MultiHeadNet
    state: imp.ImportanceState
    steps: list
    seed: int


def init_net(stream, hidden, seed):
    return MultiHeadNet(stream.n_features, hidden, stream.head_sizes, seed=seed)


def run_single(stream, strategy, seed, hidden=(100, 100), net=None, state=None):
    """Train on every task of ``stream`` in order and collect the accuracy matrix.

    Task ids must be ``0..len(stream)-1`` and index the network heads.
    """
    if not len(stream):
        raise ValueError("task stream is empty")
    net = net if net is not None else init_net(stream, hidden, seed)
    if state is None:
        state = imp.ImportanceState.create(net.n_params, strategy.estimator,
                                           net.parameters(), strategy.damping)
    matrix = AccuracyMatrix()
    snapshot, first, steps = None, None, []
    offset = 0
    for n, task in enumerate(stream.tasks):
        res = train_task(net, task, strategy, state, snapshot, seed=seed, step_offset=offset)
        offset += res.steps
        steps.append(res.steps)
        snapshot = Snapshot.capture(net, n)
        if first is None:
            first = net.copy()
        matrix.append(evaluate(net, stream, task.task_id))
    return RunResult(matrix, net, first, state, steps, seed)


def _run_matrix(args):
    stream, strategy, seed, hidden = args
    return run_single(stream, strategy, seed, hidden).matrix


def run_sequence(stream, strategy, seeds, hidden=(100, 100), n_jobs=1):
    """One accuracy matrix per seed. Seeds run in worker processes when ``n_jobs > 1``."""
    jobs = [(stream, strategy, s, tuple(hidden)) for s in seeds]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_matrix, jobs))
    return [_run_matrix(j) for j in jobs]


def with_overrides(strategy, **changes):
    return replace(strategy, **changes)
