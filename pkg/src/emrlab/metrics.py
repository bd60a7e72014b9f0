"""Continual-learning metrics and linear CKA."""

import math

import numpy as np

UNDEFINED = math.nan


class AccuracyMatrix:
    """Test accuracies ``acc[stage][task]``, defined for ``task <= stage``.

    Row ``s`` is recorded after training on task ``s``.
    """

    def __init__(self, rows=()):
        self.rows = []
        for row in rows:
            self.append(row)

    def append(self, row):
        row = [float(a) for a in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"stage {len(self.rows)} needs {len(self.rows) + 1} accuracies, got {len(row)}")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self.rows == other.rows

    def __getitem__(self, idx):
        stage, task = idx
        if task > stage:
            raise IndexError("task not yet seen at this stage")
        return self.rows[stage][task]

    def to_array(self):
        """Dense ``(T, T)`` array with NaN above the diagonal."""
        n = len(self.rows)
        out = np.full((n, n), np.nan)
        for s, row in enumerate(self.rows):
            out[s, :len(row)] = row
        return out

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls([arr[s, :s + 1] for s in range(arr.shape[0])])

    def to_csv(self):
        n = len(self.rows)
        lines = ["stage," + ",".join(f"task_{t}" for t in range(n))]
        for s, row in enumerate(self.rows):
            cells = [repr(a) for a in row] + [""] * (n - len(row))
            lines.append(f"{s}," + ",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.strip().splitlines()[1:] if ln]
        return cls([[float(c) for c in ln.split(",")[1:] if c] for ln in lines])


def average_accuracy(m):
    """Mean accuracy of the final model over every task."""
    if not len(m):
        raise ValueError("empty accuracy matrix")
    final = m.rows[-1]
    return sum(final) / len(final)


def per_task_forgetting(m):
    """``max_stage acc[stage][t] - acc[last][t]`` for each task ``t``."""
    if not len(m):
        raise ValueError("empty accuracy matrix")
    last = len(m) - 1
    return [max(m.rows[s][t] for s in range(t, last + 1)) - m.rows[last][t]
            for t in range(last + 1)]


def average_forgetting(m):
    """Mean forgetting, the final task (always 0) included."""
    f = per_task_forgetting(m)
    return sum(f) / len(f)


def mean_matrix(matrices):
    """Element-wise mean of same-sized accuracy matrices."""
    if not matrices:
        raise ValueError("no matrices to average")
    stacked = np.stack([m.to_array() for m in matrices])
    return AccuracyMatrix.from_array(stacked.mean(axis=0))


def cka(x, y):
    """Linear centered kernel alignment between two activation matrices.

    Both inputs are ``(n, features)`` with matching ``n``; columns are
    centered before computing ``||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F)``.
    Returns :data:`UNDEFINED` when either representation is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("activations must be 2-D")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least two rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    cross = np.linalg.norm(x.T @ y) ** 2
    denom = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if denom == 0.0:
        return UNDEFINED
    return float(cross / denom)


def cka_profile(net_ref, net_final, probe, head=0):
    """CKA between matching trunk layers of two nets on the same probe batch."""
    if not net_ref.same_architecture(net_final):
        raise ValueError("networks do not share an architecture")
    _, ref = net_ref.forward(probe, head, capture=True)
    _, fin = net_final.forward(probe, head, capture=True)
    return [cka(a, b) for a, b in zip(ref.activations, fin.activations)]


def metrics_report(m, cka_values=()):
    return {
        "average_accuracy": average_accuracy(m),
        "average_forgetting": average_forgetting(m),
        "per_task_forgetting": per_task_forgetting(m),
        "cka_profile": [None if math.isnan(v) else v for v in cka_values],
    }
