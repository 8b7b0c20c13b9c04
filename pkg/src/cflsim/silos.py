"""Vertical partitioning, sample misalignment, and zero-fill bookkeeping.

Each silo owns a contiguous block of feature columns and the full ordered
row index; rows the silo does not actually hold are marked absent in a
presence mask and zero-filled in the feature block. Misalignment between
silos is induced by the two imbalance injectors below, never by reindexing,
so row r means the same sample in every silo.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Table
from .errors import (
    ConfigError,
    DataError,
    DegenerateVarianceError,
    InsufficientDataError,
    ShapeError,
    ZeroFillCorruptionError,
)
from .numerics import RngStream, covariance, frobenius_norm, pearson

__all__ = [
    "SiloView",
    "ImbalanceSpec",
    "ZeroFillReport",
    "CovDevPoint",
    "vertical_partition",
    "pearson_reorder",
    "apply_column_order",
    "inject_data_size_imbalance",
    "inject_class_size_imbalance",
    "apply_imbalance",
    "zero_fill_check",
    "covariance_deviation_experiment",
    "silo_manifest",
]


@dataclass(eq=False)
class SiloView:
    """One silo's slice of a table plus its presence mask.

    ``features`` always has one row per global sample; absent rows are zero
    vectors and ``present`` records which ones are real. ``column_order``
    maps current column positions back to the silo's original slice order
    (identity until a reorder is applied).
    """

    silo_id: int
    feature_names: list[str]
    features: np.ndarray
    labels: np.ndarray
    present: np.ndarray
    column_order: np.ndarray
    row_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        m, d = self.features.shape
        if self.present.shape != (m,) or self.labels.shape != (m,):
            raise ShapeError("present and labels must have one entry per row")
        if self.column_order.shape != (d,):
            raise ShapeError("column_order must have one entry per column")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_present(self) -> int:
        return int(self.present.sum())

    def copy(self) -> "SiloView":
        return SiloView(
            silo_id=self.silo_id,
            feature_names=list(self.feature_names),
            features=self.features.copy(),
            labels=self.labels.copy(),
            present=self.present.copy(),
            column_order=self.column_order.copy(),
            row_ids=self.row_ids.copy(),
        )


@dataclass(frozen=True)
class ImbalanceSpec:
    """Misalignment generator knobs.

    ``client_drop_rate`` picks how many silos are affected (floor of rate
    times silo count, by ascending silo id); ``data_drop_rate`` is the
    fraction of an affected silo's rows removed; ``class_drop_rate`` is the
    fraction of label classes an affected silo loses. ``mode`` selects
    which injectors run.
    """

    mode: str = "standard"
    client_drop_rate: float = 0.25
    data_drop_rate: float = 0.5
    class_drop_rate: float = 0.5

    MODES = ("standard", "data_size", "class_size", "mixed")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown imbalance mode {self.mode!r}")
        for nm in ("client_drop_rate", "data_drop_rate", "class_drop_rate"):
            v = getattr(self, nm)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{nm} must be in [0, 1], got {v}")


def vertical_partition(t: Table, n_silos: int, features_per_silo: int) -> list[SiloView]:
    """Slice a table into contiguous column blocks, one per silo.

    Every silo starts with all m rows present. Leftover columns beyond
    ``n_silos * features_per_silo`` are not assigned to any silo.
    """
    if n_silos < 1 or features_per_silo < 1:
        raise ConfigError("need at least one silo and one feature per silo")
    needed = n_silos * features_per_silo
    if needed > t.d:
        raise ConfigError(
            f"{n_silos} silos x {features_per_silo} features need {needed} "
            f"columns but table has {t.d}")
    views = []
    for i in range(n_silos):
        lo = i * features_per_silo
        hi = lo + features_per_silo
        views.append(SiloView(
            silo_id=i + 1,
            feature_names=list(t.feature_names[lo:hi]),
            features=t.features[:, lo:hi].copy(),
            labels=t.labels.copy(),
            present=np.ones(t.m, dtype=bool),
            column_order=np.arange(features_per_silo, dtype=np.int64),
            row_ids=t.row_ids.copy(),
        ))
    return views


def _reorder_scores(block: np.ndarray) -> np.ndarray:
    """Mean absolute pairwise correlation of each column with the others.

    Pairs involving a constant column are skipped; a column with no valid
    pair (including a constant column itself) scores 0.
    """
    d = block.shape[1]
    stds = block.std(axis=0)
    scores = np.zeros(d)
    for c in range(d):
        if stds[c] == 0.0:
            continue
        acc = 0.0
        cnt = 0
        for o in range(d):
            if o == c or stds[o] == 0.0:
                continue
            acc += abs(pearson(block[:, c], block[:, o]))
            cnt += 1
        if cnt:
            scores[c] = acc / cnt
    return scores


def pearson_reorder(v: SiloView) -> SiloView:
    """Sort a silo's columns by mean absolute correlation, descending.

    Scores are computed on present rows only; ties keep original column
    position. The returned view records the permutation in
    ``column_order`` so the same order can be replayed on held-out data.
    """
    if v.n_present < 2:
        raise InsufficientDataError(
            f"silo {v.silo_id}: need >= 2 present rows to reorder")
    block = v.features[v.present]
    stds = block.std(axis=0)
    if np.all(stds == 0.0):
        warnings.warn(
            f"silo {v.silo_id}: all columns constant, keeping original order",
            stacklevel=2)
        return v.copy()
    scores = _reorder_scores(block)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return apply_column_order(v, order)


def apply_column_order(v: SiloView, order: np.ndarray) -> SiloView:
    """Permute a view's columns; used to replay a train-fitted order on test."""
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(v.d)):
        raise ShapeError(f"not a permutation of {v.d} columns: {order.tolist()}")
    out = v.copy()
    out.features = v.features[:, order].copy()
    out.feature_names = [v.feature_names[j] for j in order]
    out.column_order = v.column_order[order].copy()
    return out


def _affected_ids(n_silos: int, client_rate: float, start: int) -> list[int]:
    count = int(np.floor(n_silos * client_rate + 1e-9))
    lo = start
    hi = min(start + count, n_silos)
    return list(range(lo, hi))


def inject_data_size_imbalance(views: list[SiloView], client_rate: float,
                               data_rate: float, rng: RngStream,
                               start: int = 0) -> list[SiloView]:
    """Remove a fixed fraction of rows from the first affected silos.

    The first ``floor(n_silos * client_rate)`` silos (by list position,
    offset by ``start``) lose exactly ``round(data_rate * n_present)``
    uniformly chosen present rows: their presence flag drops and the
    feature rows are zero-filled. Labels stay for bookkeeping; unaffected
    silos are returned as copies, bit-identical.
    """
    if not 0.0 <= client_rate <= 1.0 or not 0.0 <= data_rate <= 1.0:
        raise ConfigError("imbalance rates must be in [0, 1]")
    affected = set(_affected_ids(len(views), client_rate, start))
    out = []
    for pos, v in enumerate(views):
        nv = v.copy()
        if pos in affected and data_rate > 0.0:
            g = rng.child(silo=v.silo_id, tag="imbalance-data").generator()
            present_idx = np.flatnonzero(nv.present)
            n_drop = int(round(data_rate * present_idx.size))
            if n_drop >= present_idx.size:
                raise DataError(
                    f"silo {v.silo_id}: data drop would remove every row")
            drop = g.choice(present_idx, size=n_drop, replace=False)
            nv.present[drop] = False
            nv.features[drop] = 0.0
        out.append(nv)
    return out


def inject_class_size_imbalance(views: list[SiloView], client_rate: float,
                                class_rate: float, rng: RngStream,
                                start: int = 0) -> list[SiloView]:
    """Restrict affected silos to a random subset of label classes.

    Affected silos keep ``floor(C * (1 - class_rate))`` classes, which must
    be at least one; rows of dropped classes lose presence and are
    zero-filled. Rows of retained classes are untouched.
    """
    if not 0.0 <= client_rate <= 1.0 or not 0.0 <= class_rate <= 1.0:
        raise ConfigError("imbalance rates must be in [0, 1]")
    out = []
    affected = set(_affected_ids(len(views), client_rate, start))
    for pos, v in enumerate(views):
        nv = v.copy()
        if pos in affected and class_rate > 0.0:
            classes = np.unique(v.labels)
            n_keep = int(np.floor(classes.size * (1.0 - class_rate) + 1e-9))
            if n_keep < 1:
                raise DataError(
                    f"silo {v.silo_id}: class drop rate {class_rate} leaves "
                    f"no surviving class out of {classes.size}")
            g = rng.child(silo=v.silo_id, tag="imbalance-class").generator()
            kept = np.sort(g.choice(classes, size=n_keep, replace=False))
            dropped_rows = nv.present & ~np.isin(nv.labels, kept)
            nv.present[dropped_rows] = False
            nv.features[dropped_rows] = 0.0
        out.append(nv)
    return out


def apply_imbalance(views: list[SiloView], spec: ImbalanceSpec,
                    rng: RngStream) -> list[SiloView]:
    """Run the injectors selected by ``spec.mode``.

    In mixed mode the class-size block starts right after the data-size
    block, so the two imbalances hit distinct silos.
    """
    if spec.mode == "standard":
        return [v.copy() for v in views]
    if spec.mode == "data_size":
        return inject_data_size_imbalance(
            views, spec.client_drop_rate, spec.data_drop_rate, rng)
    if spec.mode == "class_size":
        return inject_class_size_imbalance(
            views, spec.client_drop_rate, spec.class_drop_rate, rng)
    # mixed
    offset = int(np.floor(len(views) * spec.client_drop_rate + 1e-9))
    out = inject_data_size_imbalance(
        views, spec.client_drop_rate, spec.data_drop_rate, rng)
    return inject_class_size_imbalance(
        out, spec.client_drop_rate, spec.class_drop_rate, rng, start=offset)


@dataclass(frozen=True)
class ZeroFillReport:
    silo_id: int
    filled_rows: int
    present_rows: int


def zero_fill_check(v: SiloView) -> ZeroFillReport:
    """Audit the presence mask against the zero filling.

    An absent row must be an exact zero vector and a present row must have
    at least one non-zero entry; any disagreement raises. Note a genuinely
    all-zero present row (every feature at its column minimum) is
    indistinguishable from a filled one and is reported as corruption.
    """
    nonzero = np.any(v.features != 0.0, axis=1)
    bad_absent = np.flatnonzero(~v.present & nonzero)
    bad_present = np.flatnonzero(v.present & ~nonzero)
    if bad_absent.size:
        raise ZeroFillCorruptionError(
            f"silo {v.silo_id}: absent rows with data at positions "
            f"{bad_absent[:5].tolist()}")
    if bad_present.size:
        raise ZeroFillCorruptionError(
            f"silo {v.silo_id}: present rows that are all zero at positions "
            f"{bad_present[:5].tolist()}")
    return ZeroFillReport(
        silo_id=v.silo_id,
        filled_rows=int((~v.present).sum()),
        present_rows=int(v.present.sum()),
    )


@dataclass(frozen=True)
class CovDevPoint:
    """One point of the covariance deviation series."""

    m_silos: int
    deviation: float
    bound: float


def covariance_deviation_experiment(m_silos: int, delta_cap: float,
                                    rng: RngStream, rows_per_silo: int = 500,
                                    features: int = 8, drop_rate: float = 0.3,
                                    mean_shift: float = 1.0,
                                    dirty_silos: int | None = 1) -> list[CovDevPoint]:
    """Measure how zero-fill distorts the federation-wide covariance as
    the federation grows.

    Each silo draws ``rows_per_silo`` Gaussian rows; the first
    ``dirty_silos`` silos additionally zero-fill a ``drop_rate`` fraction
    of their rows. A silo's local deviation is the Frobenius distance
    between the covariance of its true rows and the covariance of its
    zero-filled rows; silo data is rescaled if needed so that local
    deviation never exceeds ``delta_cap``. With equal row counts the
    federation covariance is the plain mean of silo covariances, so for
    every prefix of M silos the measured global deviation is

        || mean of the first M per-silo deviation matrices ||_F

    and the triangle inequality caps it by the running mean of the local
    deviations.

    The default of one dirty silo holds the total amount of misalignment
    fixed while M grows, which is the regime where the deviation genuinely
    dilutes toward zero. With ``dirty_silos=None`` every silo drops rows;
    the deviation then plateaus at the zero-fill bias shared by all silos
    instead of vanishing (the bound still holds on every draw). Silo i's
    draw depends only on its stream key, so a seed reuses identical silos
    across all M: the series is a running average, not a fresh experiment
    per point.
    """
    if m_silos < 1:
        raise ConfigError("need at least one silo")
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop rate must be in [0, 1), got {drop_rate}")
    if delta_cap <= 0.0:
        raise ConfigError("delta_cap must be positive")
    if rows_per_silo < 4:
        raise InsufficientDataError("need at least 4 rows per silo")
    n_dirty = m_silos if dirty_silos is None else int(dirty_silos)
    if n_dirty < 0:
        raise ConfigError("dirty_silos must be >= 0")

    diffs = np.zeros((m_silos, features, features))
    deltas = np.zeros(m_silos)
    for i in range(m_silos):
        g = rng.child(silo=i + 1, tag="covdev").generator()
        x = mean_shift + g.standard_normal((rows_per_silo, features))
        n_drop = int(round(drop_rate * rows_per_silo)) if i < n_dirty else 0
        imputed = x.copy()
        if n_drop:
            drop = g.choice(rows_per_silo, size=n_drop, replace=False)
            imputed[drop] = 0.0
        diff = covariance(x) - covariance(imputed)
        delta = frobenius_norm(diff)
        if delta > delta_cap:
            scale = (1.0 - 1e-12) * delta_cap / delta
            diff = diff * scale
            delta = frobenius_norm(diff)
        diffs[i] = diff
        deltas[i] = delta

    points = []
    running = np.zeros((features, features))
    for m in range(1, m_silos + 1):
        running += diffs[m - 1]
        deviation = frobenius_norm(running / m)
        bound = float(deltas[:m].mean())
        points.append(CovDevPoint(m_silos=m, deviation=deviation, bound=bound))
    return points


def silo_manifest(views: list[SiloView]) -> dict:
    """JSON-ready description of a prepared federation."""
    return {
        "n_silos": len(views),
        "silos": [
            {
                "silo_id": v.silo_id,
                "feature_count": v.d,
                "present_rows": v.n_present,
                "total_rows": v.m,
                "retained_classes": np.unique(v.labels[v.present]).tolist(),
                "column_order": v.column_order.tolist(),
                "feature_names": list(v.feature_names),
            }
            for v in views
        ],
    }
