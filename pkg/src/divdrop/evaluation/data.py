"""Tabular datasets, CSV ingestion, synthetic generators and split plans."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from divdrop.errors import IngestError
from divdrop.numerics import make_rng

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class Standardizer:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    @classmethod
    def fit(cls, x, y=None) -> Standardizer:
        x = np.asarray(x, dtype=np.float64)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        if y is None:
            return cls(mu, sd)
        y = np.asarray(y, dtype=np.float64)
        ysd = float(y.std())
        return cls(mu, sd, float(y.mean()), ysd if ysd > 0 else 1.0)

    def transform_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_std

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_mean(self, m) -> np.ndarray:
        return np.asarray(m) * self.target_std + self.target_mean

    def inverse_var(self, v) -> np.ndarray:
        return np.asarray(v) * self.target_std**2

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(np.asarray(d["feature_mean"]), np.asarray(d["feature_std"]), d["target_mean"], d["target_std"])


@dataclass(frozen=True, eq=False)
class TabularDataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    task: str = "regression"
    n_classes: int | None = None
    feature_names: tuple[str, ...] = ()
    target_name: str = "y"
    stats: Standardizer = field(init=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise IngestError("feature matrix must be 2-D")
        if x.shape[0] < 4:
            raise IngestError(f"dataset {self.name!r} has {x.shape[0]} rows; at least 4 are required")
        if self.task not in TASKS:
            raise IngestError(f"unknown task {self.task!r}")
        if not np.all(np.isfinite(x)):
            raise IngestError("non-finite feature values")
        if self.task == "classification":
            y = np.asarray(self.y)
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise IngestError("class labels must be integers")
            y = y.astype(np.int64)
            n_classes = int(y.max()) + 1 if self.n_classes is None else int(self.n_classes)
            if y.min() < 0 or y.max() >= n_classes or n_classes < 2:
                raise IngestError(f"class labels must lie in [0, {n_classes})")
            object.__setattr__(self, "n_classes", n_classes)
        else:
            y = np.asarray(self.y, dtype=np.float64)
            if not np.all(np.isfinite(y)):
                raise IngestError("non-finite target values")
        if y.shape != (x.shape[0],):
            raise IngestError("targets must be one value per row")
        names = self.feature_names or tuple(f"x{i + 1}" for i in range(x.shape[1]))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(names))
        object.__setattr__(self, "stats", Standardizer.fit(x, y if self.task == "regression" else None))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx, name: str | None = None) -> TabularDataset:
        return TabularDataset(
            name or self.name, self.x[idx], self.y[idx], self.task, self.n_classes, self.feature_names, self.target_name
        )


@dataclass(frozen=True)
class CsvSchema:
    target: str
    task: str = "regression"
    n_classes: int | None = None
    features: tuple[str, ...] | None = None


def load_csv(path, schema: CsvSchema, name: str | None = None) -> TabularDataset:
    """Read a headed CSV; every cell must parse as a finite number."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if schema.target not in header:
        raise IngestError(f"{path}: missing target column {schema.target!r}", column=schema.target)
    features = list(schema.features) if schema.features else [h for h in header if h != schema.target]
    for f in features:
        if f not in header:
            raise IngestError(f"{path}: missing feature column {f!r}", column=f)
    cols = [header.index(f) for f in features]
    tcol = header.index(schema.target)
    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}", row=i)
        for j in cols + [tcol]:
            cell = row[j].strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise IngestError(f"{path}: row {i}, column {header[j]!r}: bad value {cell!r}", row=i, column=header[j])
            values[i - 2, j] = v
    if len(rows) < 4:
        raise IngestError(f"{path}: {len(rows)} data rows; at least 4 are required")
    x = values[:, cols]
    for j, f in enumerate(features):
        if np.all(x[:, j] == x[0, j]):
            raise IngestError(f"{path}: feature column {f!r} is constant", column=f)
    return TabularDataset(
        name or path.stem, x, values[:, tcol], schema.task, schema.n_classes, tuple(features), schema.target
    )


def save_csv(dataset: TabularDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(dataset.feature_names) + [dataset.target_name])
        for xi, yi in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi)) if dataset.task == "regression" else str(int(yi))])


SYNTHETIC_KINDS = ("sine-regression", "gaussian-blobs")


def make_synthetic(
    kind: str,
    n: int,
    noise: float = 0.1,
    seed: int = 0,
    n_features: int = 2,
    n_classes: int = 3,
    separation: float = 4.0,
    label_noise: float = 0.0,
    shift: float = 0.0,
) -> TabularDataset:
    """Seeded toy data.

    ``sine-regression``: ``x ~ U(-2, 2)^d`` and ``y = sin(2 x1) + 0.5 x2 + noise * eps``.
    ``gaussian-blobs``: unit-variance clusters whose centres sit on a circle of
    radius ``separation`` in the first two coordinates (plus ``shift`` on every
    coordinate); a ``label_noise`` fraction of labels is reassigned to a
    different class at random.
    """
    if n < 16:
        raise ValueError("synthetic datasets need n >= 16")
    rng = make_rng(seed, 101)
    if kind == "sine-regression":
        if n_features < 2:
            raise ValueError("sine-regression needs at least two features")
        x = rng.uniform(-2.0, 2.0, size=(n, n_features))
        y = np.sin(2.0 * x[:, 0]) + 0.5 * x[:, 1] + noise * rng.standard_normal(n)
        return TabularDataset(f"sine-{seed}", x, y)
    if kind == "gaussian-blobs":
        if n_classes < 2 or n_features < 2:
            raise ValueError("gaussian-blobs needs n_classes >= 2 and n_features >= 2")
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        centres = np.zeros((n_classes, n_features))
        centres[:, 0] = separation * np.cos(angles)
        centres[:, 1] = separation * np.sin(angles)
        labels = rng.integers(0, n_classes, size=n)
        x = centres[labels] + rng.standard_normal((n, n_features)) + shift
        y = labels.copy()
        flip = rng.random(n) < label_noise
        offsets = rng.integers(1, n_classes, size=n)
        y[flip] = (labels[flip] + offsets[flip]) % n_classes
        return TabularDataset(f"blobs-{seed}", x, y, "classification", n_classes)
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")


@dataclass(frozen=True)
class Split:
    split_id: str
    train: np.ndarray
    test: np.ndarray
    feature: int | None = None


def random_half(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def ood_median(x: np.ndarray, feature: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``<=`` the feature median train and the rest are OOD; ``flip`` swaps the roles."""
    col = np.asarray(x)[:, feature]
    low = col <= np.median(col)
    if flip:
        low = ~low
    return np.flatnonzero(low), np.flatnonzero(~low)


@dataclass(frozen=True)
class SplitPlan:
    """How to derive train/test (or train/OOD) partitions from one dataset.

    ``random-half`` yields ``repeats`` random 50/50 splits, each used for
    ``folds`` (1 or 2) train/test role assignments. ``ood-median`` yields
    ``repeats`` median splits on a feature (random per repeat unless fixed)
    with a random orientation.
    """

    kind: str = "random-half"
    seed: int = 0
    repeats: int = 1
    folds: int = 1
    feature: int | None = None

    def __post_init__(self):
        if self.kind not in ("random-half", "ood-median"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.folds not in (1, 2):
            raise ValueError("folds must be 1 or 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def splits(self, x: np.ndarray) -> list[Split]:
        n, d = np.asarray(x).shape
        out = []
        for r in range(self.repeats):
            rng = make_rng(self.seed, 1000 + r)
            if self.kind == "random-half":
                a, b = random_half(n, rng)
                out.append(Split(f"{r}.0", a, b))
                if self.folds == 2:
                    out.append(Split(f"{r}.1", b, a))
            else:
                feature = int(rng.integers(d)) if self.feature is None else int(self.feature)
                flip = bool(rng.random() < 0.5)
                train, ood = ood_median(x, feature, flip)
                out.append(Split(f"{r}", train, ood, feature))
        return out
