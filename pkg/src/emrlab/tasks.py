"""Task streams: synthetic Gaussian blobs, class-split datasets, IDX and CSV loaders."""

import csv
import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    image_shape: tuple = None


@dataclass
class TaskSpec:
    """One classification task. Labels are local indices ``0..n_classes-1``."""

    task_id: int
    classes: tuple
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    image_shape: tuple = None

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def n_features(self):
        return self.X_train.shape[1]


@dataclass
class TaskStream:
    tasks: list
    seed: int = 0

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return TaskStream(self.tasks[idx], self.seed)
        return self.tasks[idx]

    def subset(self, start, stop=None):
        """Tasks ``start:stop`` renumbered from 0 so they map onto fresh heads."""
        picked = self.tasks[start:stop]
        return TaskStream([replace(t, task_id=i) for i, t in enumerate(picked)], self.seed)

    @property
    def head_sizes(self):
        return tuple(t.n_classes for t in self.tasks)

    @property
    def n_features(self):
        return self.tasks[0].n_features

    def to_bytes(self):
        """Canonical serialization used for determinism checks and digests."""
        parts = []
        for t in self.tasks:
            parts.append(struct.pack("<qq", t.task_id, len(t.classes)))
            parts.append(np.asarray(t.classes, dtype="<i8").tobytes())
            for arr, dt in ((t.X_train, "<f8"), (t.y_train, "<i8"), (t.X_test, "<f8"), (t.y_test, "<i8")):
                arr = np.ascontiguousarray(arr, dtype=dt)
                parts.append(struct.pack("<q", arr.size) + arr.tobytes())
        return b"".join(parts)

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def manifest(self):
        return {
            "seed": self.seed,
            "digest": self.digest(),
            "tasks": [
                {
                    "task_id": t.task_id,
                    "classes": [int(c) for c in t.classes],
                    "n_train": int(t.y_train.shape[0]),
                    "n_test": int(t.y_test.shape[0]),
                    "image_shape": list(t.image_shape) if t.image_shape else None,
                }
                for t in self.tasks
            ],
        }

    def write_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)


def _split_per_class(y_local, test_fraction, rng):
    train, test = [], []
    for c in np.unique(y_local):
        idx = rng.permutation(np.flatnonzero(y_local == c))
        n_test = int(round(test_fraction * idx.shape[0]))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _make_task(task_id, classes, X, y, rng, test_fraction, image_shape, test=None):
    lookup = {c: i for i, c in enumerate(classes)}
    sel = np.isin(y, classes)
    X_t, y_t = X[sel], np.array([lookup[c] for c in y[sel]], dtype=np.int64)
    if test is None:
        tr, te = _split_per_class(y_t, test_fraction, rng)
        return TaskSpec(task_id, tuple(int(c) for c in classes), X_t[tr], y_t[tr],
                        X_t[te], y_t[te], image_shape)
    tsel = np.isin(test.y, classes)
    y_te = np.array([lookup[c] for c in test.y[tsel]], dtype=np.int64)
    return TaskSpec(task_id, tuple(int(c) for c in classes), X_t, y_t,
                    test.X[tsel], y_te, image_shape)


def synth_blobs(num_tasks=5, classes_per_task=2, dim=20, samples_per_class=125,
                spread=3.0, seed=0, test_fraction=0.2):
    """Isotropic unit-variance Gaussian blobs, one per class.

    Each class mean is a random direction on the unit sphere scaled by
    ``spread``. ``samples_per_class`` counts train and test samples together;
    ``test_fraction`` of each class is held out.
    """
    if min(num_tasks, classes_per_task, dim, samples_per_class) <= 0:
        raise ValueError("all counts must be positive")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n_classes = num_tasks * classes_per_task
    means = rng.standard_normal((n_classes, dim))
    means *= spread / np.linalg.norm(means, axis=1, keepdims=True)
    X = np.concatenate([m + rng.standard_normal((samples_per_class, dim)) for m in means])
    y = np.repeat(np.arange(n_classes), samples_per_class)
    tasks = [
        _make_task(t, list(range(t * classes_per_task, (t + 1) * classes_per_task)),
                   X, y, rng, test_fraction, None)
        for t in range(num_tasks)
    ]
    return TaskStream(tasks, seed)


def split_by_class(dataset, classes_per_task, seed=0, test=None, test_fraction=0.2):
    """Partition a dataset's classes into a seeded sequence of tasks.

    Leftover classes form a smaller final task. When ``test`` is given it
    supplies the held-out split; otherwise ``test_fraction`` of each class is
    held out.
    """
    y = np.asarray(dataset.y)
    if y.size == 0:
        raise ValueError("empty dataset")
    if classes_per_task <= 0:
        raise ValueError("classes_per_task must be positive")
    rng = np.random.default_rng(seed)
    classes = rng.permutation(np.unique(y))
    groups = [classes[i:i + classes_per_task] for i in range(0, classes.shape[0], classes_per_task)]
    X = np.asarray(dataset.X, dtype=np.float64)
    tasks = [_make_task(t, [int(c) for c in g], X, y, rng, test_fraction, dataset.image_shape, test)
             for t, g in enumerate(groups)]
    return TaskStream(tasks, seed)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path_images, path_labels):
    """Load an IDX image/label pair (big-endian headers); pixels scaled to [0, 1]."""
    img = _read(path_images)
    lab = _read(path_labels)
    if len(img) < 16 or len(lab) < 8:
        raise ValueError("truncated IDX header")
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad image magic 0x{magic:08x}")
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise ValueError(f"bad label magic 0x{lmagic:08x}")
    if len(img) != 16 + n * rows * cols:
        raise ValueError("truncated or oversized image file")
    if len(lab) != 8 + ln:
        raise ValueError("truncated or oversized label file")
    if n != ln:
        raise ValueError(f"image count {n} does not match label count {ln}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, (rows, cols))


def load_csv(path, label_column="label"):
    """Load a CSV with a header row: numeric feature columns plus an integer label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty CSV file")
        if label_column not in header:
            raise ValueError(f"CSV has no {label_column!r} column")
        li = header.index(label_column)
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError("CSV file has no data rows")
    data = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows])
    labels = np.array([int(r[li]) for r in rows], dtype=np.int64)
    return Dataset(data, labels)
