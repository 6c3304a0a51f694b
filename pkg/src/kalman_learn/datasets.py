"""Loading tabular CSV data and IDX image files into :class:`Dataset` objects."""
from __future__ import annotations

import csv
import gzip
import struct
from pathlib import Path

import numpy as np

from .ensemble import STREAM_SPLIT, child_rng
from .network import Dataset

__all__ = ["DataFormatError", "ingest_csv", "ingest_idx", "train_test", "split_indices"]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataFormatError(ValueError):
    """A data file does not have the expected layout."""


def split_indices(n: int, test_fraction: float, seed: int):
    """Seeded permutation split; returns ``(train_idx, test_idx)`` sorted."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    perm = child_rng(seed, STREAM_SPLIT).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _zscore(values, rows):
    mean = values[rows].mean(axis=0)
    std = values[rows].std(axis=0)
    std[std == 0] = 1.0  # constant columns are centred but left unscaled
    return (values - mean) / std, mean, std


def ingest_csv(path, target_column, test_fraction=0.2, seed=0, standardize=True) -> Dataset:
    """Read a headed numeric CSV; every non-target column becomes a feature.

    Rows are split train/test by a seeded permutation.  With ``standardize``
    features and target are z-scored using train-split statistics; the target
    statistics are kept on the dataset so errors can be reported in the
    original units.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise DataFormatError(f"{path}: no column named {target_column!r}")
    if len(rows) < 2:
        raise DataFormatError(f"{path}: header but no data rows")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: non-numeric cell {cell!r} at line {i}, column {header[j]!r}"
                ) from None
    t = header.index(target_column)
    features = [h for h in header if h != target_column]
    X = np.delete(values, t, axis=1)
    y = values[:, [t]]

    train, test = split_indices(len(values), test_fraction, seed)
    split = np.full(len(values), "train", dtype=object)
    split[test] = "test"
    t_mean = t_std = None
    if standardize:
        X, _, _ = _zscore(X, train)
        y, t_mean, t_std = _zscore(y, train)
    return Dataset(X, y, split, features, t_mean, t_std)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _idx_header(buf, path, magic, ndim):
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need]), need


def ingest_idx(images_path, labels_path, limit=None) -> Dataset:
    """Read an IDX image/label pair (plain or gzipped).

    Pixels are scaled to [0, 1] and flattened; labels become one-hot rows of
    width 10.  ``limit`` keeps the first records only.
    """
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    (n_img, rows, cols), off_i = _idx_header(img, images_path, IDX_IMAGES, 3)
    (n_lab,), off_l = _idx_header(lab, labels_path, IDX_LABELS, 1)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels")
    if len(img) - off_i < n_img * rows * cols:
        raise DataFormatError(f"{images_path}: truncated, expected {n_img} images of {rows}x{cols}")
    if len(lab) - off_l < n_lab:
        raise DataFormatError(f"{labels_path}: truncated, expected {n_lab} labels")
    n = n_img if limit is None else min(int(limit), n_img)
    pixels = np.frombuffer(img, np.uint8, count=n * rows * cols, offset=off_i)
    labels = np.frombuffer(lab, np.uint8, count=n, offset=off_l)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside 0..9")
    X = pixels.reshape(n, rows * cols) / 255.0
    return Dataset(X, np.eye(10)[labels], None, [f"px{k}" for k in range(rows * cols)])


def train_test(train: Dataset, test: Dataset) -> Dataset:
    """Stack two datasets into one with ``train``/``test`` split tags."""
    split = np.array(["train"] * len(train) + ["test"] * len(test), dtype=object)
    return Dataset(
        np.vstack([train.inputs, test.inputs]),
        np.vstack([train.targets, test.targets]),
        split,
        train.feature_names,
        train.target_mean,
        train.target_std,
    )
