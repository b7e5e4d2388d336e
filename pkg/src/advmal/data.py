"""Binary feature datasets: loading, chi-squared selection, splitting, synthesis.

File formats
------------
CSV
    A header row naming every feature followed by a final ``label`` column;
    every body cell is ``0`` or ``1``.
Sparse
    One record per line: ``label idx idx ...`` with 0-based, strictly
    ascending indices of the features that are set.  Blank lines and lines
    starting with ``#`` are ignored.

Labels are 0 for benign and 1 for malware throughout the package.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

BENIGN, MALWARE = 0, 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        X = np.asarray(self.X)
        y = np.asarray(self.y)
        if X.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
        if not np.all((X == 0) | (X == 1)):
            raise DataError("feature matrix must be binary")
        if y.shape != (X.shape[0],):
            raise DataError(f"expected {X.shape[0]} labels, got shape {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 (benign) or 1 (malware)")
        if self.feature_names is not None:
            names = list(self.feature_names)
            if len(names) != X.shape[1] or len(set(names)) != len(names):
                raise DataError("feature_names must be unique and match the feature count")
            self.feature_names = names
        self.X = X.astype(np.uint8)
        self.y = y.astype(np.int64)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.feature_names)

    def malware(self) -> np.ndarray:
        return self.X[self.y == MALWARE]

    def benign(self) -> np.ndarray:
        return self.X[self.y == BENIGN]

    def require_both_classes(self) -> None:
        if not (np.any(self.y == 0) and np.any(self.y == 1)):
            raise DataError("dataset must contain both benign and malware samples")


# --------------------------------------------------------------------------- file io

def _bit(token: str, where: str) -> int:
    token = token.strip()
    if token not in ("0", "1"):
        raise DataError(f"{where}: non-binary value {token!r}")
    return int(token)


def load_csv(path) -> Dataset:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise DataError(f"{path}:1: header must end with a 'label' column")
        names = [h.strip() for h in header[:-1]]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            where = f"{path}:{lineno}"
            rows.append([_bit(v, where) for v in row[:-1]])
            labels.append(_bit(row[-1], where))
    X = np.array(rows, dtype=np.uint8).reshape(len(rows), len(names))
    return Dataset(X, np.array(labels, dtype=np.int64), names)


def load_sparse(path, d: int | None = None) -> Dataset:
    """Read the sparse index format; ``d`` defaults to the largest index + 1."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        where = f"{path}:{lineno}"
        label = _bit(tokens[0], where)
        try:
            idx = [int(t) for t in tokens[1:]]
        except ValueError as exc:
            raise DataError(f"{where}: malformed index ({exc})") from exc
        if len(set(idx)) != len(idx):
            raise DataError(f"{where}: duplicate feature index")
        if any(b <= a for a, b in zip(idx[:-1], idx[1:])):
            raise DataError(f"{where}: indices must be ascending")
        if idx and idx[0] < 0:
            raise DataError(f"{where}: negative feature index")
        if d is not None and idx and idx[-1] >= d:
            raise DataError(f"{where}: feature index {idx[-1]} out of range for d={d}")
        records.append((lineno, label, idx))
    if d is None:
        d = 1 + max((r[2][-1] for r in records if r[2]), default=-1)
    X = np.zeros((len(records), d), dtype=np.uint8)
    y = np.zeros(len(records), dtype=np.int64)
    for row, (_, label, idx) in enumerate(records):
        X[row, idx] = 1
        y[row] = label
    return Dataset(X, y)


def load_dataset(path, d: int | None = None) -> Dataset:
    """Dispatch on extension: ``.csv`` is dense, anything else sparse."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_sparse(path, d)


def save_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    names = ds.feature_names or [f"f{j}" for j in range(ds.d)]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([*row.tolist(), int(label)])
    return path


def save_sparse(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"# d={ds.d}\n")
        for row, label in zip(ds.X, ds.y):
            fh.write(" ".join([str(int(label)), *map(str, np.flatnonzero(row))]) + "\n")
    return path


# --------------------------------------------------------------------------- feature selection

def chi2_scores(ds: Dataset) -> np.ndarray:
    """Per-feature chi-squared statistic for binary features.

    Observed counts are the per-class feature sums; expected counts are the
    class frequency times the feature's total sum::

        score_j = sum_c (O_cj - E_cj)**2 / E_cj,  O_cj = sum_{i: y_i = c} x_ij,
        E_cj = (n_c / n) * sum_i x_ij

    A feature that is never set scores 0.
    """
    ds.require_both_classes()
    X = ds.X.astype(np.float64)
    classes = (BENIGN, MALWARE)
    observed = np.stack([X[ds.y == c].sum(axis=0) for c in classes])
    freq = np.array([np.mean(ds.y == c) for c in classes])
    expected = freq[:, None] * X.sum(axis=0)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    return terms.sum(axis=0)


def select_k_best(ds: Dataset, k: int) -> tuple[list[int], Dataset]:
    """Keep the ``k`` top-scoring features (lower index wins ties), in index order."""
    if not 1 <= k <= ds.d:
        raise DataError(f"k must be in [1, {ds.d}], got {k}")
    scores = chi2_scores(ds)
    order = np.lexsort((np.arange(ds.d), -scores))
    keep = sorted(int(j) for j in order[:k])
    names = [ds.feature_names[j] for j in keep] if ds.feature_names else None
    return keep, Dataset(ds.X[:, keep], ds.y, names)


# --------------------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.5625
    val_frac: float = 0.1875
    test_frac: float = 0.25
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-12 or min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise DataError(f"split fractions must be non-negative and sum to 1, got {total}")


def split_indices(y: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices of (train, val, test); val/test sizes are floored, the rest trains."""
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    groups = [np.flatnonzero(y == c) for c in np.unique(y)] if spec.stratified else [np.arange(y.size)]
    parts: list[list[np.ndarray]] = [[], [], []]
    for idx in groups:
        if spec.stratified and idx.size < 3:
            raise DataError(f"class {int(y[idx[0]])} has only {idx.size} members; stratified split needs 3")
        perm = rng.permutation(idx)
        n_val = int(np.floor(spec.val_frac * idx.size))
        n_test = int(np.floor(spec.test_frac * idx.size))
        n_train = idx.size - n_val - n_test
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train:n_train + n_val])
        parts[2].append(perm[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)  # type: ignore[return-value]


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    train, val, test = split_indices(ds.y, spec)
    return ds.subset(train), ds.subset(val), ds.subset(test)


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_benign: int = 2000
    n_malware: int = 2000
    d: int = 500
    n_malware_markers: int = 20
    n_benign_markers: int = 20
    marker_on_prob: float = 0.9
    background_on_prob: float = 0.05
    seed: int = 1

    def __post_init__(self):
        if self.n_malware_markers + self.n_benign_markers > self.d:
            raise DataError("more marker features than dimensions")
        for p in (self.marker_on_prob, self.background_on_prob):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"probability {p} outside [0, 1]")
        if min(self.n_benign, self.n_malware, self.d) < 0:
            raise DataError("counts must be non-negative")


def synthetic_markers(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """(malware_marker_indices, benign_marker_indices) used by :func:`generate_synthetic`."""
    perm = np.random.default_rng(spec.seed).permutation(spec.d)
    mal = np.sort(perm[:spec.n_malware_markers])
    ben = np.sort(perm[spec.n_malware_markers:spec.n_malware_markers + spec.n_benign_markers])
    return mal, ben


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Planted-signal data: each class switches on its own marker features more often.

    Class-``c`` rows set their own markers with ``marker_on_prob`` and every
    other feature, including the other class's markers, with
    ``background_on_prob``.
    """
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(spec.d)
    mal_markers = perm[:spec.n_malware_markers]
    ben_markers = perm[spec.n_malware_markers:spec.n_malware_markers + spec.n_benign_markers]

    def rows(n, own):
        probs = np.full(spec.d, spec.background_on_prob)
        probs[own] = spec.marker_on_prob
        return (rng.random((n, spec.d)) < probs).astype(np.uint8)

    X = np.vstack([rows(spec.n_benign, ben_markers), rows(spec.n_malware, mal_markers)])
    y = np.concatenate([np.zeros(spec.n_benign, np.int64), np.ones(spec.n_malware, np.int64)])
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], [f"f{j}" for j in range(spec.d)])


def concat(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]), parts[0].feature_names)
