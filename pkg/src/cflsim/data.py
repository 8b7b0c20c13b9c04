"""Tabular containers, CSV loading, normalization, splits, and synthesis.

A ``Table`` is the global view of one dataset: an ordered row index
(``row_ids``), a dense float feature block, and integer class labels that
are contiguous from zero at load time. Tables are treated as immutable;
every transform returns a new instance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InsufficientDataError
from .numerics import RngStream

__all__ = [
    "Table",
    "SplitTable",
    "MinMaxScaler",
    "load_csv",
    "fit_minmax",
    "apply_minmax",
    "minmax_normalize",
    "train_test_split",
    "synth_table",
    "synth_nonlinear_table",
    "synth_correlated_table",
]


@dataclass(eq=False)
class Table:
    """One dataset: features (m x d), labels (m,), ordered row ids (m,)."""

    name: str
    feature_names: list[str]
    features: np.ndarray
    labels: np.ndarray
    row_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        m, d = self.features.shape
        if len(self.feature_names) != d:
            raise DataError(
                f"{len(self.feature_names)} feature names for {d} columns")
        if self.labels.shape != (m,) or self.row_ids.shape != (m,):
            raise DataError("labels and row_ids must each have one entry per row")
        if m > 0 and self.labels.min() < 0:
            raise DataError("labels must be non-negative integers")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.m else 0

    def take(self, idx: np.ndarray, name: str | None = None) -> "Table":
        """Row subset (copy), preserving order of ``idx``."""
        return Table(
            name=name or self.name,
            feature_names=list(self.feature_names),
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            row_ids=self.row_ids[idx].copy(),
        )


@dataclass(eq=False)
class SplitTable:
    """Train/test partition of one table."""

    train: Table
    test: Table
    split_rate: float


def load_csv(path, label_column: str, name: str | None = None) -> Table:
    """Load a numeric CSV with a header row into a Table.

    Labels are mapped to contiguous ids in order of first appearance.
    Any missing or non-numeric feature cell is an error reported with its
    1-based data row and the column name; rows with gaps are not silently
    dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]

        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for rownum, rec in enumerate(reader, start=1):
            if len(rec) != len(header):
                raise DataError(f"row {rownum}: expected {len(header)} cells, got {len(rec)}")
            vals = []
            for i, cell in enumerate(rec):
                if i == label_idx:
                    continue
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"row {rownum}, column {header[i]!r}: missing value")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"row {rownum}, column {header[i]!r}: "
                        f"non-numeric cell {cell!r}") from None
            rows.append(vals)
            raw_labels.append(rec[label_idx].strip())

    if not rows:
        raise DataError(f"no data rows in {path}")
    label_map: dict[str, int] = {}
    labels = np.empty(len(raw_labels), dtype=np.int64)
    for i, lab in enumerate(raw_labels):
        if lab not in label_map:
            label_map[lab] = len(label_map)
        labels[i] = label_map[lab]

    return Table(
        name=name or path.stem,
        feature_names=feature_names,
        features=np.asarray(rows, dtype=np.float64),
        labels=labels,
        row_ids=np.arange(1, len(rows) + 1, dtype=np.int64),
    )


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-column min/max fitted on one table (normally the train split)."""

    mins: np.ndarray
    maxs: np.ndarray


def fit_minmax(t: Table) -> MinMaxScaler:
    if t.m == 0:
        raise InsufficientDataError("cannot fit scaler on empty table")
    return MinMaxScaler(mins=t.features.min(axis=0), maxs=t.features.max(axis=0))


def apply_minmax(t: Table, scaler: MinMaxScaler) -> Table:
    """Map each column to [0, 1] with the scaler's bounds.

    Constant columns (max == min at fit time) map to 0.5. Values outside
    the fitted range (possible when the scaler came from a different
    split) are clipped so the [0, 1] bound holds everywhere.
    """
    span = scaler.maxs - scaler.mins
    out = np.empty_like(t.features)
    flat = span == 0
    nz = ~flat
    out[:, nz] = (t.features[:, nz] - scaler.mins[nz]) / span[nz]
    out[:, flat] = 0.5
    np.clip(out, 0.0, 1.0, out=out)
    return Table(t.name, list(t.feature_names), out, t.labels.copy(), t.row_ids.copy())


def minmax_normalize(t: Table) -> Table:
    """Fit-and-apply min/max scaling on a single table. Idempotent."""
    return apply_minmax(t, fit_minmax(t))


def train_test_split(t: Table, rate: float, rng: RngStream) -> SplitTable:
    """Uniform random split with floor(rate * m) training rows.

    Both sides keep their rows in original row-id order, so downstream
    alignment by position stays meaningful.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"split rate must be in (0, 1), got {rate}")
    if t.m < 2:
        raise InsufficientDataError("need at least 2 rows to split")
    n_train = int(np.floor(rate * t.m + 1e-9))
    n_train = max(1, min(t.m - 1, n_train))
    perm = rng.generator().permutation(t.m)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return SplitTable(
        train=t.take(train_idx),
        test=t.take(test_idx),
        split_rate=rate,
    )


def _balanced_labels(m: int, classes: int) -> np.ndarray:
    """Round-robin labels: counts differ by at most one, any prefix balanced."""
    return np.arange(m, dtype=np.int64) % classes


def synth_table(m: int, d: int, classes: int, rng: RngStream,
                margin: float = 4.0, spread: float = 1.0) -> Table:
    """Gaussian blobs with linearly separable class means.

    ``margin`` scales the distance between class means; large values give
    a dataset a linear probe fits perfectly.
    """
    if classes < 2:
        raise ConfigError("synth_table needs at least 2 classes")
    if m < classes:
        raise InsufficientDataError(f"m={m} rows cannot cover {classes} classes")
    g = rng.generator()
    centers = g.standard_normal((classes, d))
    centers *= margin / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    labels = _balanced_labels(m, classes)
    feats = centers[labels] + spread * g.standard_normal((m, d))
    return Table(
        name="synth",
        feature_names=[f"f{j}" for j in range(d)],
        features=feats,
        labels=labels,
        row_ids=np.arange(1, m + 1, dtype=np.int64),
    )


def synth_nonlinear_table(m: int, d: int, classes: int, rng: RngStream,
                          latent_dim: int = 8, separation: float = 3.0,
                          latent_noise: float = 1.0, mix_scale: float = 1.0,
                          obs_noise: float = 0.1, name: str = "synth-nonlinear") -> Table:
    """Class clusters in a low-dimensional latent space, observed through a
    fixed random saturating map.

    Rows are ``tanh(mix_scale * (u @ W + b)) + obs_noise * eps`` where the
    latent ``u`` sits in a Gaussian cluster per class. Class structure is
    linear in the latent but bent and redundant in feature space, which is
    the regime where representation pretraining pays off over a linear fit
    on raw columns.
    """
    if classes < 2:
        raise ConfigError("synth_nonlinear_table needs at least 2 classes")
    if m < classes:
        raise InsufficientDataError(f"m={m} rows cannot cover {classes} classes")
    g = rng.generator()
    centers = g.standard_normal((classes, latent_dim))
    centers *= separation / np.maximum(
        np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    labels = _balanced_labels(m, classes)
    latent = centers[labels] + latent_noise * g.standard_normal((m, latent_dim))
    mix = g.standard_normal((latent_dim, d)) / np.sqrt(latent_dim)
    offset = g.uniform(-0.5, 0.5, size=d)
    feats = np.tanh(mix_scale * (latent @ mix + offset))
    feats += obs_noise * g.standard_normal((m, d))
    return Table(
        name=name,
        feature_names=[f"f{j}" for j in range(d)],
        features=feats,
        labels=labels,
        row_ids=np.arange(1, m + 1, dtype=np.int64),
    )


def synth_correlated_table(m: int, d: int, classes: int, rng: RngStream,
                           latent_dim: int = 8, separation: float = 3.0,
                           latent_noise: float = 1.0, mix_scale: float = 1.5,
                           obs_noise: float = 0.3, block_size: int = 7,
                           plain_every: int = 5,
                           name: str = "synth-correlated") -> Table:
    """Tabular data whose class signal is mostly carried by correlation
    structure instead of column means.

    Columns come in two kinds. Every ``plain_every``-th column is a
    saturating random projection of a per-class latent cluster, as in
    :func:`synth_nonlinear_table`; these give a pooled linear model a
    clean, fully linear route to the label. The remaining columns are
    grouped into contiguous blocks of ``block_size``. Each block shares a
    per-row factor, and the class flips the sign with which each column
    loads on that factor (first column pinned positive to break the
    global-flip symmetry). Those columns have identical means for every
    class, so a linear fit on the raw values carries no label signal from
    them; predicting a masked column from its neighbours, however, forces
    a model to infer the sign pattern, which is exactly the label.
    """
    if classes < 2:
        raise ConfigError("synth_correlated_table needs at least 2 classes")
    if m < classes:
        raise InsufficientDataError(f"m={m} rows cannot cover {classes} classes")
    if block_size < 2 or plain_every < 2:
        raise ConfigError("block_size and plain_every must both be >= 2")
    g = rng.generator()
    centers = g.standard_normal((classes, latent_dim))
    centers *= separation / np.maximum(
        np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    labels = _balanced_labels(m, classes)
    latent = centers[labels] + latent_noise * g.standard_normal((m, latent_dim))
    mix = g.standard_normal((latent_dim, d)) / np.sqrt(latent_dim)
    offset = g.uniform(-0.5, 0.5, size=d)

    plain = np.arange(d) % plain_every == 0
    feats = np.empty((m, d))
    feats[:, plain] = np.tanh(
        mix_scale * (latent @ mix[:, plain] + offset[plain]))

    corr_cols = np.flatnonzero(~plain)
    for start in range(0, corr_cols.size, block_size):
        cols = corr_cols[start:start + block_size]
        if cols.size < 2:
            # a trailing singleton cannot carry a correlation pattern
            feats[:, cols] = np.tanh(
                mix_scale * (latent @ mix[:, cols] + offset[cols]))
            continue
        signs = np.where(g.random((classes, cols.size)) < 0.5, -1.0, 1.0)
        signs[:, 0] = 1.0
        factor = g.standard_normal(m)
        feats[:, cols] = np.tanh(
            mix_scale * signs[labels] * factor[:, None])
    feats += obs_noise * g.standard_normal((m, d))
    return Table(
        name=name,
        feature_names=[f"f{j}" for j in range(d)],
        features=feats,
        labels=labels,
        row_ids=np.arange(1, m + 1, dtype=np.int64),
    )
