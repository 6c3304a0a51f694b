import gzip
import struct

import numpy as np
import pytest

from kalman_learn.datasets import DataFormatError, ingest_csv, ingest_idx, split_indices, train_test

from conftest import DATA


def _write(tmp_path, text, name="toy.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_toy_csv_without_standardizing(tmp_path):
    p = _write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    ds = ingest_csv(p, "y", test_fraction=0.0, standardize=False)
    np.testing.assert_array_equal(ds.inputs, [[1, 2], [4, 5], [7, 8]])
    np.testing.assert_array_equal(ds.targets, [[3], [6], [9]])
    assert ds.feature_names == ["a", "b"] and list(ds.split) == ["train"] * 3


def test_target_column_can_be_anywhere(tmp_path):
    p = _write(tmp_path, "y,a\n1,10\n2,20\n")
    ds = ingest_csv(p, "y", test_fraction=0.0, standardize=False)
    np.testing.assert_array_equal(ds.inputs[:, 0], [10, 20])


def test_boston_shape_and_zscore():
    ds = ingest_csv(DATA / "boston_housing.csv", "MEDV", 0.2, seed=0)
    assert ds.inputs.shape == (506, 13) and ds.targets.shape == (506, 1)
    train = ds.split == "train"
    assert train.sum() == 405
    np.testing.assert_allclose(ds.inputs[train].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ds.inputs[train].std(axis=0), 1.0, rtol=1e-12)
    raw = ingest_csv(DATA / "boston_housing.csv", "MEDV", 0.2, seed=0, standardize=False)
    np.testing.assert_allclose(ds.targets * ds.target_std + ds.target_mean, raw.targets, rtol=1e-12)
    assert raw.targets[0, 0] == 24.0


def test_split_is_seeded_partition():
    a_train, a_test = split_indices(100, 0.2, 5)
    b_train, b_test = split_indices(100, 0.2, 5)
    np.testing.assert_array_equal(a_test, b_test)
    assert len(a_test) == 20
    assert sorted(np.concatenate([a_train, a_test])) == list(range(100))
    assert not np.array_equal(split_indices(100, 0.2, 6)[1], a_test)


def test_constant_column_is_centred(tmp_path):
    p = _write(tmp_path, "a,c,y\n1,5,0\n2,5,1\n3,5,2\n")
    ds = ingest_csv(p, "y", test_fraction=0.0)
    np.testing.assert_array_equal(ds.inputs[:, 1], 0.0)


def test_non_numeric_cell_names_line_and_column(tmp_path):
    p = _write(tmp_path, "a,y\n1,2\nfoo,3\n")
    with pytest.raises(DataFormatError, match=r"line 3.*'a'"):
        ingest_csv(p, "y")


@pytest.mark.parametrize(
    "text, pattern",
    [("", "empty"), ("a,y\n", "no data"), ("a,b\n1,2\n", "no column"), ("a,y\n1,2,3\n", "line 2")],
)
def test_csv_format_errors(tmp_path, text, pattern):
    with pytest.raises(DataFormatError, match=pattern):
        ingest_csv(_write(tmp_path, text), "y")


def _idx(tmp_path, n=3, magic=0x803, labels=None, gz=False, cut=0):
    pixels = np.arange(n * 4, dtype=np.uint8).reshape(n, 2, 2) * 10
    img = struct.pack(">IIII", magic, n, 2, 2) + pixels.tobytes()
    labels = np.arange(n, dtype=np.uint8) if labels is None else np.asarray(labels, np.uint8)
    lab = struct.pack(">II", 0x801, len(labels)) + labels.tobytes()
    img = img[: len(img) - cut]
    if gz:
        img, lab = gzip.compress(img), gzip.compress(lab)
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    return tmp_path / "i", tmp_path / "l"


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    ds = ingest_idx(*_idx(tmp_path, gz=gz))
    assert ds.inputs.shape == (3, 4)
    np.testing.assert_allclose(ds.inputs[1], np.array([40, 50, 60, 70]) / 255)
    np.testing.assert_array_equal(ds.targets.argmax(axis=1), [0, 1, 2])
    np.testing.assert_array_equal(ds.targets.sum(axis=1), 1.0)


def test_idx_errors(tmp_path):
    with pytest.raises(DataFormatError, match="magic"):
        ingest_idx(*_idx(tmp_path, magic=0x1234))
    with pytest.raises(DataFormatError, match="truncated"):
        ingest_idx(*_idx(tmp_path, cut=2))
    with pytest.raises(DataFormatError, match="labels"):
        ingest_idx(*_idx(tmp_path, labels=[0, 1]))
    with pytest.raises(DataFormatError, match="outside"):
        ingest_idx(*_idx(tmp_path, labels=[0, 1, 12]))


def test_real_mnist_limit():
    ds = ingest_idx(DATA / "mnist/train-images-idx3-ubyte.gz", DATA / "mnist/train-labels-idx1-ubyte.gz", limit=10)
    assert ds.inputs.shape == (10, 784) and ds.targets.shape == (10, 10)
    assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0
    np.testing.assert_array_equal(ds.targets.sum(axis=1), 1.0)
    assert ds.targets[0].argmax() == 5  # the first training digit is a five


def test_train_test_tags(tmp_path):
    a = ingest_idx(*_idx(tmp_path))
    both = train_test(a, a)
    assert list(both.split) == ["train"] * 3 + ["test"] * 3
    assert len(both.subset("test")) == 3
