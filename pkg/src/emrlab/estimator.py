"""Scikit-learn compatible wrapper around the continual-learning trainer."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import importance as imp
from .metrics import AccuracyMatrix
from .net import MultiHeadNet
from .tasks import TaskSpec, TaskStream
from .trainer import Snapshot, Strategy, evaluate, train_task


def _task_groups(tasks, n):
    if tasks is None:
        return np.zeros(n, dtype=np.int64)
    tasks = np.asarray(tasks)
    if tasks.shape != (n,):
        raise ValueError(f"tasks must have one entry per sample ({n}), got shape {tasks.shape}")
    return tasks


class ContinualMLPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-head MLP trained sequentially over tasks.

    ``fit(X, y, tasks=...)`` visits tasks in order of first appearance in
    ``tasks`` and trains one epoch on each; prediction uses the head of the
    task given for each sample. ``transform`` returns the last trunk
    activations.

    Parameters
    ----------
    mode : {"plain", "quadratic", "emr"}
    importance : {"ewc", "mas", "si", "rwalk", "vanilla", "random"}
    learning_rate, reg_lambda, momentum, batch_size
        Optimizer settings; ``reg_lambda`` is only used in quadratic mode.
    transforms : tuple of str
        Importance transforms such as ``"abs"`` or ``"keep_negative:0.001"``.
    augmentation : {"none", "flip", "noise"}
    image_shape : tuple, optional
        Row layout used by flip augmentation.
    """

    def __init__(self, hidden_layer_sizes=(100, 100), mode="emr", importance="vanilla",
                 learning_rate=0.07, reg_lambda=0.0, momentum=0.9, batch_size=10,
                 transforms=(), augmentation="none", noise_sigma=0.1, image_shape=None,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.mode = mode
        self.importance = importance
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.momentum = momentum
        self.batch_size = batch_size
        self.transforms = transforms
        self.augmentation = augmentation
        self.noise_sigma = noise_sigma
        self.image_shape = image_shape
        self.random_state = random_state

    def _strategy(self):
        return Strategy(mode=self.mode, estimator=self.importance, eta=self.learning_rate,
                        lam=self.reg_lambda, momentum=self.momentum, batch_size=self.batch_size,
                        transforms=tuple(self.transforms), augmentation=self.augmentation,
                        noise_sigma=self.noise_sigma)

    def _build_stream(self, X, y, groups):
        order = list(dict.fromkeys(groups.tolist()))
        specs = []
        for t, g in enumerate(order):
            sel = groups == g
            classes = np.unique(y[sel])
            local = np.searchsorted(classes, y[sel])
            specs.append(TaskSpec(t, tuple(classes.tolist()), X[sel], local,
                                  X[:0], local[:0], self.image_shape))
        return order, TaskStream(specs, self.random_state or 0)

    def fit(self, X, y, tasks=None, eval_set=None):
        """Train sequentially over the tasks in ``tasks``.

        ``eval_set=(X_test, y_test, tasks_test)`` fills ``accuracy_matrix_``
        after every task.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        groups = _task_groups(tasks, X.shape[0])
        strategy = self._strategy()
        order, stream = self._build_stream(X, y, groups)
        seed = 0 if self.random_state is None else int(self.random_state)

        self.task_order_ = order
        self.classes_ = np.unique(y)
        self.task_classes_ = {g: np.asarray(t.classes) for g, t in zip(order, stream.tasks)}
        self.n_features_in_ = X.shape[1]
        self.net_ = MultiHeadNet(X.shape[1], tuple(self.hidden_layer_sizes),
                                 stream.head_sizes, seed=seed)
        self.importance_ = imp.ImportanceState.create(self.net_.n_params, strategy.estimator,
                                                      self.net_.parameters(), strategy.damping)
        eval_stream = self._eval_stream(eval_set) if eval_set is not None else None
        self.accuracy_matrix_ = AccuracyMatrix() if eval_stream is not None else None
        self.n_steps_ = []
        snapshot = None
        for n, task in enumerate(stream.tasks):
            res = train_task(self.net_, task, strategy, self.importance_, snapshot, seed=seed)
            self.n_steps_.append(res.steps)
            snapshot = Snapshot.capture(self.net_, n)
            if eval_stream is not None:
                self.accuracy_matrix_.append(evaluate(self.net_, eval_stream, n))
        return self

    def _eval_stream(self, eval_set):
        X, y, tasks = eval_set
        X, y = check_X_y(X, y, dtype=np.float64)
        groups = _task_groups(tasks, X.shape[0])
        specs = []
        for t, g in enumerate(self.task_order_):
            sel = groups == g
            classes = self.task_classes_[g]
            if not np.all(np.isin(y[sel], classes)):
                raise ValueError(f"eval labels for task {g!r} include unseen classes")
            local = np.searchsorted(classes, y[sel])
            specs.append(TaskSpec(t, tuple(classes.tolist()), X[sel][:0], local[:0], X[sel], local))
        return TaskStream(specs)

    def _head_of(self, g):
        try:
            return self.task_order_.index(g)
        except ValueError:
            raise KeyError(f"task {g!r} was not seen during fit") from None

    def predict(self, X, tasks=None):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if tasks is None and len(self.task_order_) > 1:
            raise ValueError("tasks is required when more than one task was fitted")
        groups = (np.full(X.shape[0], self.task_order_[0], dtype=object) if tasks is None
                  else _task_groups(tasks, X.shape[0]))
        out = np.empty(X.shape[0], dtype=self.classes_.dtype)
        for g in dict.fromkeys(groups.tolist()):
            sel = groups == g
            local = self.net_.predict(X[sel], self._head_of(g))
            out[sel] = self.task_classes_[g][local]
        return out

    def score(self, X, y, tasks=None, sample_weight=None):
        return accuracy_score(y, self.predict(X, tasks), sample_weight=sample_weight)

    def transform(self, X):
        """Activations of the last trunk layer (the inputs when the trunk is empty)."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        _, trace = self.net_.forward(X, 0, capture=True)
        return trace.activations[-1] if trace.activations else trace.inputs
