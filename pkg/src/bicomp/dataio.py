"""LIBSVM parsing, synthetic datasets, and sample-to-worker partitioning."""

import os
from dataclasses import dataclass
from typing import List, Union

import numpy as np


class LibsvmFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Sparse sample matrix in row-list form plus raw labels.

    Row indices are 0-based and strictly increasing; d_features is
    max index + 1 (possibly overridden upward at problem construction).
    """

    row_indices: List[np.ndarray]
    row_values: List[np.ndarray]
    labels: np.ndarray
    d_features: int

    @property
    def n_samples(self) -> int:
        return len(self.row_indices)

    def to_dense(self, d_features: int = None) -> np.ndarray:
        d = self.d_features if d_features is None else d_features
        if d < self.d_features:
            raise ValueError(f"d_features override {d} below parsed width {self.d_features}")
        out = np.zeros((self.n_samples, d))
        for r, (idx, val) in enumerate(zip(self.row_indices, self.row_values)):
            out[r, idx] = val
        return out


def parse_libsvm(source: Union[str, bytes, os.PathLike]) -> Dataset:
    """Parse LIBSVM text: ``label idx:val idx:val ...`` per line, 1-based
    indices.  A str or PathLike is treated as a path; bytes as file content.
    Blank lines are skipped; \\r\\n line endings are accepted.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    row_indices, row_values, labels = [], [], []
    d_features = 0
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        try:
            label = float(parts[0])
        except ValueError:
            raise LibsvmFormatError(f"line {lineno}: unparsable label {parts[0]!r}")
        idx, val = [], []
        prev = -1
        for pair in parts[1:]:
            if ":" not in pair:
                raise LibsvmFormatError(f"line {lineno}: malformed pair {pair!r}")
            istr, vstr = pair.split(":", 1)
            try:
                i = int(istr)
                v = float(vstr)
            except ValueError:
                raise LibsvmFormatError(f"line {lineno}: unparsable pair {pair!r}")
            i -= 1  # 1-based on the wire
            if i < 0:
                raise LibsvmFormatError(f"line {lineno}: index must be >= 1 in {pair!r}")
            if i <= prev:
                raise LibsvmFormatError(f"line {lineno}: non-monotone index {i + 1}")
            prev = i
            idx.append(i)
            val.append(v)
        row_indices.append(np.array(idx, dtype=np.int64))
        row_values.append(np.array(val, dtype=np.float64))
        labels.append(label)
        if idx:
            d_features = max(d_features, idx[-1] + 1)
    return Dataset(row_indices, row_values, np.array(labels), d_features)


def serialize_libsvm(dataset: Dataset) -> str:
    lines = []
    for r in range(dataset.n_samples):
        label = dataset.labels[r]
        head = repr(float(label))
        pairs = [
            f"{int(i) + 1}:{float(v)!r}"
            for i, v in zip(dataset.row_indices[r], dataset.row_values[r])
        ]
        lines.append(" ".join([head] + pairs))
    return "\n".join(lines) + "\n"


def synthetic_logreg_dataset(
    n_samples: int, d_features: int, n_classes: int, seed: int,
    separation: float = 1.0, label_noise: float = 0.0,
) -> Dataset:
    """Gaussian blobs with one center per class; labels cycle so every class
    is populated.  Dense rows (every index stored).

    label_noise relabels that fraction of samples uniformly at random,
    which keeps high-dimensional instances from being linearly separable
    (separable data has no finite cross-entropy minimizer)."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, d_features)) * separation
    rows_i, rows_v, labels = [], [], []
    for s in range(n_samples):
        c = s % n_classes
        x = centers[c] + rng.standard_normal(d_features)
        rows_i.append(np.arange(d_features, dtype=np.int64))
        rows_v.append(x)
        if label_noise > 0.0 and rng.random() < label_noise:
            labels.append(float(rng.integers(0, n_classes)))
        else:
            labels.append(float(c))
    return Dataset(rows_i, rows_v, np.array(labels), d_features)


STRATEGIES = ("contiguous", "round_robin", "shared")


@dataclass
class Partition:
    """Worker assignment: per-worker sample index arrays (dataset order
    inside each worker for round_robin/shared, shuffled-block order for
    contiguous)."""

    n_workers: int
    strategy: str
    worker_samples: List[np.ndarray]

    def sizes(self):
        return [len(s) for s in self.worker_samples]


def partition(dataset: Dataset, n_workers: int, strategy: str, seed: int = 0) -> Partition:
    """Split samples across workers.

    contiguous: seeded shuffle, then blocks; the first (n mod workers)
    workers get the larger block.  round_robin: sample j -> worker j mod n.
    shared: every worker sees the full dataset (homogeneous setting).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    n = dataset.n_samples
    if strategy == "shared":
        return Partition(n_workers, strategy, [np.arange(n, dtype=np.int64)] * n_workers)
    if n < n_workers:
        raise ValueError(f"{strategy} partition needs n_samples >= n_workers ({n} < {n_workers})")
    if strategy == "round_robin":
        samples = [np.arange(n, dtype=np.int64)[i::n_workers] for i in range(n_workers)]
        return Partition(n_workers, strategy, samples)
    perm = np.random.default_rng(seed).permutation(n).astype(np.int64)
    q, r = divmod(n, n_workers)
    samples, start = [], 0
    for i in range(n_workers):
        size = q + 1 if i < r else q
        samples.append(perm[start : start + size])
        start += size
    return Partition(n_workers, strategy, samples)
