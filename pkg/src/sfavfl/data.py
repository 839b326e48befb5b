"""Dataset ingestion, synthesis and splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .seeding import np_rng


class ParseError(ValueError):
    """Malformed CSV input; the message names the offending row."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} disagree")
        if not self.feature_names:
            self.feature_names = [f"f{k}" for k in range(self.x.shape[1])]

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], list(self.feature_names))


@dataclass
class Split:
    train: Dataset
    test: Dataset

    @property
    def n_classes(self) -> int:
        return max(self.train.n_classes, self.test.n_classes)


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    label_column: Union[str, int] = -1
    normalization: str = "minmax01"
    partition: Optional[list] = None
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class SyntheticTaskSpec:
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 2
    cross_party_interaction: bool = True
    noise_std: float = 0.0
    seed: int = 0


def minmax01(x: np.ndarray) -> np.ndarray:
    """Rescale every column onto [0, 1]; constant columns map to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.full_like(x, 0.5)
    ok = span > 0
    out[:, ok] = (x[:, ok] - lo[ok]) / span[ok]
    return out


def train_test_split(ds: Dataset, train_fraction: float, seed: int) -> Split:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    perm = np_rng(seed, "split").permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return Split(ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:])))


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_csv(path, label_column: Union[str, int] = -1) -> Dataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    width = len(header) if header else len(rows[0])
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise ParseError(f"{path}: label column {label_column!r} not found in header")
        label_idx = header.index(label_column)
    else:
        label_idx = int(label_column) % width

    feats, labels = [], []
    for lineno, row in enumerate(rows, start=2 if header else 1):
        if len(row) != width:
            raise ParseError(f"{path}: row {lineno} has {len(row)} cells, expected {width}")
        values = []
        for k, cell in enumerate(row):
            if k == label_idx:
                continue
            try:
                values.append(float(cell))
            except ValueError:
                raise ParseError(f"{path}: row {lineno} has non-numeric cell {cell!r}") from None
        feats.append(values)
        labels.append(row[label_idx].strip())

    classes = sorted(set(labels), key=lambda s: (not _is_number(s), float(s) if _is_number(s) else 0.0, s))
    lookup = {c: k for k, c in enumerate(classes)}
    names = [h for k, h in enumerate(header) if k != label_idx] if header else []
    return Dataset(np.array(feats), np.array([lookup[c] for c in labels]), names)


def ingest_csv(spec: DatasetSpec) -> Split:
    ds = read_csv(spec.source, spec.label_column)
    if spec.normalization == "minmax01":
        ds = Dataset(minmax01(ds.x), ds.y, ds.feature_names)
    elif spec.normalization != "none":
        raise ValueError(f"unknown normalization {spec.normalization!r}")
    return train_test_split(ds, spec.train_fraction, spec.seed)


def interaction_pairs(n_features: int) -> list:
    """Feature pairs whose products drive the interaction task.

    Half of the pairs straddle the midpoint of the feature axis; the other
    half straddle the quarter points, so they stay inside one party for a
    two-way split but cross parties once the features are split four ways.
    """
    half = n_features // 2
    quarter = n_features // 4
    pairs = [(k, k + half) for k in range(half)]
    for base in (0, half):
        pairs += [(base + k, base + k + quarter) for k in range(quarter) if base + k + quarter < base + half]
    return pairs


def make_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    """Uniform(0,1) features with labels from a linear or product score.

    With ``cross_party_interaction`` the score is a sum of products of
    centred feature pairs (see :func:`interaction_pairs`), which no model that
    is additive across party blocks can represent. Otherwise the score is a
    random linear form. Classes are score quantiles, so they are balanced.
    """
    if spec.cross_party_interaction and spec.n_features % 2:
        raise ValueError("the interaction task needs an even feature count")
    if spec.n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np_rng(spec.seed, "synthetic")
    x = rng.uniform(0.0, 1.0, size=(spec.n_samples, spec.n_features))
    c = x - 0.5
    if spec.cross_party_interaction:
        score = np.zeros(spec.n_samples)
        for i, j in interaction_pairs(spec.n_features):
            score += c[:, i] * c[:, j]
    else:
        w = rng.normal(size=spec.n_features)
        score = c @ w
    if spec.noise_std > 0:
        score = score + rng.normal(scale=spec.noise_std * score.std(), size=spec.n_samples)
    edges = np.quantile(score, np.linspace(0, 1, spec.n_classes + 1)[1:-1])
    y = np.searchsorted(edges, score, side="right")
    return Dataset(x, y)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + ["label"])
        for row, label in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
