"""Linear probing and evaluation metrics.

The probe is multinomial softmax regression fit by full-batch gradient
descent with backtracking line search; it is deterministic given its
inputs. Representation quality of the pretrained encoder is read out by
probing embeddings against two reference probes on raw features: one on
the pooled cross-silo table (the upper reference, tagged Base1) and one
per silo on its own raw columns (the local reference, tagged Base2).

Probes only ever train on rows the silo actually holds; held-out rows are
never dropped by the misalignment generators, so every model is scored on
the identical test partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SplitTable
from .errors import ConfigError, DegenerateLabelsError, ShapeError
from .mlp import MlpParams, encode
from .numerics import RngStream
from .silos import SiloView

__all__ = [
    "ProbeConfig",
    "ProbeModel",
    "SiloMetrics",
    "MetricsReport",
    "train_probe",
    "weighted_metrics",
    "evaluate_silo",
    "evaluate_baselines",
]

MODEL_TAGS = ("Base1", "CFL", "Base2")


@dataclass(frozen=True)
class ProbeConfig:
    """Probe solver and evaluation knobs.

    ``l2`` multiplies ||W||^2 / 2 (intercepts are not penalized).
    ``labeled_fraction`` restricts how many of a silo's present training
    rows keep their labels for probing (1.0 = all).
    """

    l2: float = 1e-4
    max_iter: int = 500
    tol: float = 1e-6
    labeled_fraction: float = 1.0

    def __post_init__(self):
        if self.l2 < 0.0:
            raise ConfigError("l2 must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must be in (0, 1]")


@dataclass(eq=False)
class ProbeModel:
    """Fitted softmax regression: one weight column per seen class."""

    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    n_iter: int
    final_loss: float

    def decision_values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ShapeError(
                f"probe expects (*, {self.weights.shape[0]}), got {x.shape}")
        return x @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Predicted class ids (in the training label space)."""
        return self.classes[np.argmax(self.decision_values(x), axis=1)]


def _softmax_probs(x, w, b):
    logits = x @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return expd / expd.sum(axis=1, keepdims=True)


def _softmax_loss(x, y_onehot, w, b, l2) -> float:
    probs = _softmax_probs(x, w, b)
    n = x.shape[0]
    ce = -np.sum(y_onehot * np.log(np.maximum(probs, 1e-300))) / n
    return float(ce + 0.5 * l2 * np.sum(w * w))


def _softmax_loss_grad(x, y_onehot, w, b, l2):
    """Cross-entropy + l2/2 ||w||^2 and its gradients."""
    probs = _softmax_probs(x, w, b)
    n = x.shape[0]
    ce = -np.sum(y_onehot * np.log(np.maximum(probs, 1e-300))) / n
    loss = float(ce + 0.5 * l2 * np.sum(w * w))
    delta = (probs - y_onehot) / n
    gw = x.T @ delta + l2 * w
    gb = delta.sum(axis=0)
    return loss, gw, gb


def train_probe(features, labels, cfg: ProbeConfig,
                rng: RngStream | None = None) -> ProbeModel:
    """Fit the softmax probe by full-batch descent with Armijo backtracking.

    Starts from zero weights, so the fit is deterministic; ``rng`` is
    accepted for interface symmetry with the stochastic trainers but never
    drawn from. Loss is monotone non-increasing across iterations; the
    loop stops when the improvement drops below ``cfg.tol`` or after
    ``cfg.max_iter`` iterations.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"features must be 2-D, got {x.shape}")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} rows")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateLabelsError(
            f"probe needs >= 2 classes, got {classes.tolist()}")
    local = np.searchsorted(classes, y)
    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), local] = 1.0

    w = np.zeros((x.shape[1], classes.size))
    b = np.zeros(classes.size)
    loss, gw, gb = _softmax_loss_grad(x, onehot, w, b, cfg.l2)
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        gnorm2 = float(np.sum(gw * gw) + np.sum(gb * gb))
        if gnorm2 == 0.0:
            break
        step = 1.0
        while step > 1e-12:
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss = _softmax_loss(x, onehot, w_new, b_new, cfg.l2)
            if new_loss <= loss - 1e-4 * step * gnorm2:
                break
            step *= 0.5
        else:
            break
        improvement = loss - new_loss
        w, b = w_new, b_new
        loss, gw, gb = _softmax_loss_grad(x, onehot, w, b, cfg.l2)
        if improvement < cfg.tol:
            break
    return ProbeModel(classes=classes, weights=w, bias=b,
                      n_iter=n_iter, final_loss=loss)


def weighted_metrics(y_true, y_pred) -> tuple[float, float, float]:
    """Support-weighted precision, recall, and F1.

    Per-class scores are averaged with weights proportional to the class's
    true support. A class that is never predicted gets precision 0; a
    class with precision + recall = 0 gets F1 = 0.
    """
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"{t.shape[0]} true vs {p.shape[0]} predicted labels")
    if t.shape[0] == 0:
        raise ConfigError("cannot score zero rows")
    classes = np.unique(np.concatenate([t, p]))
    # confusion counts via a dense C x C matrix over remapped ids
    ct = np.searchsorted(classes, t)
    cp = np.searchsorted(classes, p)
    c = classes.size
    conf = np.bincount(ct * c + cp, minlength=c * c).reshape(c, c)
    tp = np.diag(conf).astype(np.float64)
    pred_pos = conf.sum(axis=0).astype(np.float64)
    support = conf.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.maximum(pr, 1e-300), 0.0)
    total = support.sum()
    return (
        float(np.sum(precision * support) / total),
        float(np.sum(recall * support) / total),
        float(np.sum(f1 * support) / total),
    )


@dataclass(frozen=True)
class SiloMetrics:
    """One scored (silo, model) pair."""

    silo_id: int
    model: str
    precision: float
    recall: float
    f1: float


@dataclass(eq=False)
class MetricsReport:
    """All per-silo rows of one run plus the derived aggregates."""

    rows: list[SiloMetrics]

    def by_model(self, model: str) -> list[SiloMetrics]:
        return [r for r in self.rows if r.model == model]

    def mean_f1(self, model: str) -> float:
        rows = self.by_model(model)
        if not rows:
            raise ConfigError(f"no rows for model {model!r}")
        return float(np.mean([r.f1 for r in rows]))

    def silo_row(self, silo_id: int, model: str) -> SiloMetrics:
        for r in self.rows:
            if r.silo_id == silo_id and r.model == model:
                return r
        raise ConfigError(f"no row for silo {silo_id} model {model!r}")

    def deltas(self) -> dict:
        """F1 gaps against the pooled-data reference probe."""
        silo_ids = sorted({r.silo_id for r in self.rows})
        per_silo = []
        for sid in silo_ids:
            base1 = self.silo_row(sid, "Base1").f1
            per_silo.append({
                "silo_id": sid,
                "cfl_vs_base1": self.silo_row(sid, "CFL").f1 - base1,
                "base2_vs_base1": self.silo_row(sid, "Base2").f1 - base1,
            })
        return {
            "per_silo": per_silo,
            "mean_cfl_vs_base1": self.mean_f1("CFL") - self.mean_f1("Base1"),
            "mean_base2_vs_base1": self.mean_f1("Base2") - self.mean_f1("Base1"),
        }


def _labeled_subset(n_rows: int, fraction: float, stream: RngStream) -> np.ndarray:
    """Indices of rows whose labels remain available to the probe."""
    if fraction >= 1.0:
        return np.arange(n_rows)
    n_keep = max(2, int(np.floor(fraction * n_rows + 1e-9)))
    g = stream.generator()
    return np.sort(g.choice(n_rows, size=min(n_keep, n_rows), replace=False))


def _probe_scores(x_train, y_train, x_test, y_test,
                  cfg: ProbeConfig) -> tuple[float, float, float]:
    model = train_probe(x_train, y_train, cfg)
    return weighted_metrics(y_test, model.predict(x_test))


def evaluate_silo(params: MlpParams, train_view: SiloView, test_view: SiloView,
                  cfg: ProbeConfig, stream: RngStream) -> SiloMetrics:
    """Probe the global encoder's embeddings for one silo.

    The probe trains on embeddings of the silo's present training rows
    (restricted to the labeled fraction) and is scored on embeddings of
    the full test partition.
    """
    present = np.flatnonzero(train_view.present)
    if present.size < 2:
        raise DegenerateLabelsError(
            f"silo {train_view.silo_id}: not enough present rows to probe")
    keep = _labeled_subset(present.size, cfg.labeled_fraction,
                           stream.child(silo=train_view.silo_id, tag="alpha"))
    rows = present[keep]
    x_train = encode(params, train_view.features[rows])
    x_test = encode(params, test_view.features)
    precision, recall, f1 = _probe_scores(
        x_train, train_view.labels[rows], x_test, test_view.labels, cfg)
    return SiloMetrics(silo_id=train_view.silo_id, model="CFL",
                       precision=precision, recall=recall, f1=f1)


def evaluate_baselines(split: SplitTable, train_views: list[SiloView],
                       test_views: list[SiloView], cfg: ProbeConfig,
                       stream: RngStream) -> list[SiloMetrics]:
    """Score the two raw-feature reference probes.

    Base1 fits once on the pooled table (every silo column, every training
    row) and its row is repeated per silo for reporting. Base2 fits per
    silo on that silo's raw present rows, with the same labeled-fraction
    restriction the embedding probe sees. When one silo owns every column,
    Base2 coincides with Base1.
    """
    if len(train_views) != len(test_views):
        raise ConfigError("train and test view lists must align")
    p1, r1, f1 = _probe_scores(split.train.features, split.train.labels,
                               split.test.features, split.test.labels, cfg)
    rows = [
        SiloMetrics(silo_id=v.silo_id, model="Base1",
                    precision=p1, recall=r1, f1=f1)
        for v in train_views
    ]
    for tv, ev in zip(train_views, test_views):
        present = np.flatnonzero(tv.present)
        if present.size < 2:
            raise DegenerateLabelsError(
                f"silo {tv.silo_id}: not enough present rows to probe")
        keep = _labeled_subset(present.size, cfg.labeled_fraction,
                               stream.child(silo=tv.silo_id, tag="alpha"))
        rows_idx = present[keep]
        p2, r2, f2 = _probe_scores(
            tv.features[rows_idx], tv.labels[rows_idx],
            ev.features, ev.labels, cfg)
        rows.append(SiloMetrics(silo_id=tv.silo_id, model="Base2",
                                precision=p2, recall=r2, f1=f2))
    return rows
