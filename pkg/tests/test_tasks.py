import gzip
import json
import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from emrlab.tasks import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, Dataset, load_csv, load_idx,
                          split_by_class, synth_blobs)


def write_idx(tmp_path, images, labels, image_magic=IDX_IMAGES_MAGIC, gz=False):
    n, rows, cols = images.shape
    img = struct.pack(">IIII", image_magic, n, rows, cols) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if gz else ""
    pi, pl = tmp_path / f"img.idx{suffix}", tmp_path / f"lab.idx{suffix}"
    opener = gzip.open if gz else open
    with opener(pi, "wb") as fh:
        fh.write(img)
    with opener(pl, "wb") as fh:
        fh.write(lab)
    return pi, pl


def test_blobs_default_shape(blobs):
    assert len(blobs) == 5
    assert blobs.head_sizes == (2,) * 5
    assert blobs.n_features == 20
    for t in blobs:
        assert t.X_train.shape == (200, 20) and t.X_test.shape == (50, 20)
        assert np.bincount(t.y_train).tolist() == [100, 100]
        assert np.bincount(t.y_test).tolist() == [25, 25]


def test_blobs_deterministic():
    assert synth_blobs(seed=3).to_bytes() == synth_blobs(seed=3).to_bytes()
    assert synth_blobs(seed=3).digest() != synth_blobs(seed=4).digest()


def test_blobs_classes_disjoint(blobs):
    seen = [set(t.classes) for t in blobs]
    assert sum(len(s) for s in seen) == len(set().union(*seen)) == 10


def test_well_separated_blobs_are_linearly_separable():
    stream = synth_blobs(num_tasks=3, spread=12.0, seed=1)
    for t in stream:
        clf = LogisticRegression(max_iter=1000).fit(t.X_train, t.y_train)
        assert clf.score(t.X_test, t.y_test) > 0.99


def test_blobs_validation():
    with pytest.raises(ValueError):
        synth_blobs(num_tasks=0)
    with pytest.raises(ValueError):
        synth_blobs(test_fraction=1.0)


def test_split_by_class_even():
    y = np.repeat(np.arange(100), 5)
    ds = Dataset(np.random.default_rng(0).normal(size=(500, 3)), y)
    stream = split_by_class(ds, 10, seed=2)
    assert len(stream) == 10
    classes = [c for t in stream for c in t.classes]
    assert sorted(classes) == list(range(100))
    assert all(t.n_classes == 10 for t in stream)
    assert stream.to_bytes() == split_by_class(ds, 10, seed=2).to_bytes()


def test_split_by_class_leftover_task():
    y = np.repeat(np.arange(50), 4)
    ds = Dataset(np.zeros((200, 2)), y)
    stream = split_by_class(ds, 3)
    assert len(stream) == 17
    assert stream.head_sizes == (3,) * 16 + (2,)


def test_split_by_class_with_explicit_test_set():
    rng = np.random.default_rng(0)
    train = Dataset(rng.normal(size=(40, 2)), np.repeat(np.arange(4), 10))
    test = Dataset(rng.normal(size=(8, 2)), np.repeat(np.arange(4), 2))
    stream = split_by_class(train, 2, test=test)
    for t in stream:
        assert t.X_train.shape[0] == 20 and t.X_test.shape[0] == 4
        assert set(t.y_test.tolist()) == {0, 1}


def test_subset_renumbers(blobs):
    sub = blobs.subset(2, 4)
    assert [t.task_id for t in sub] == [0, 1]
    assert sub[0].classes == blobs[2].classes
    assert blobs[2].task_id == 2


def test_manifest(blobs, tmp_path):
    path = tmp_path / "m.json"
    blobs.write_manifest(path)
    m = json.loads(path.read_text())
    assert m["digest"] == blobs.digest()
    assert [t["n_train"] for t in m["tasks"]] == [200] * 5


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    images = np.zeros((3, 2, 4), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[2, 1, 3] = 51
    labels = np.array([7, 0, 3])
    ds = load_idx(*write_idx(tmp_path, images, labels, gz=gz))
    assert ds.X.shape == (3, 8) and ds.image_shape == (2, 4)
    assert ds.X[0, 0] == 1.0 and ds.X[2, 7] == pytest.approx(0.2)
    assert ds.y.tolist() == [7, 0, 3]


def test_idx_errors(tmp_path):
    images = np.zeros((2, 2, 2))
    pi, pl = write_idx(tmp_path, images, np.array([0, 1]), image_magic=0x1234)
    with pytest.raises(ValueError, match="magic"):
        load_idx(pi, pl)
    pi, pl = write_idx(tmp_path, images, np.array([0, 1]))
    pi.write_bytes(pi.read_bytes()[:-1])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(pi, pl)
    pi, pl = write_idx(tmp_path, images, np.array([0, 1, 1]))
    with pytest.raises(ValueError, match="count"):
        load_idx(pi, pl)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.5,2,3\n0,0,-1\n")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.X, [[1.5, 3.0], [0.0, -1.0]])
    assert ds.y.tolist() == [2, 0]
    with pytest.raises(ValueError):
        load_csv(p, label_column="target")
    (tmp_path / "e.csv").write_text("a,label\n")
    with pytest.raises(ValueError):
        load_csv(tmp_path / "e.csv")
