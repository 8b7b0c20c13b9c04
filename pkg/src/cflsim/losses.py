"""Pretraining objectives: reconstruction, contrastive, and view distance.

The total objective is a weighted sum of three batch-level terms computed
from two corrupted views of the same K rows:

* reconstruction: mean squared error of each decoded view against the
  clean batch, averaged over the two views;
* contrastive: normalized temperature-scaled cross entropy over the 2K
  stacked embeddings, where row k's two views are the positive pair and
  every other embedding is a negative;
* distance: mean squared entrywise difference between the two embedding
  views.

Every function returns the loss value together with analytic gradients
with respect to its direct inputs, so the model's backward pass can chain
them without any autograd machinery.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateEmbeddingError,
    InsufficientNegativesError,
    ShapeError,
)
from .numerics import RngStream, as_matrix

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "BenchResult",
    "recon_loss",
    "distance_loss",
    "contrastive_loss",
    "total_loss",
    "bench_similarity",
]

SIMILARITIES = ("dot", "cosine")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    similarity: str = "dot"
    recon_weight: float = 1.0
    contrastive_weight: float = 1.0
    distance_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}, "
                              f"got {self.similarity!r}")


@dataclass(eq=False)
class LossBreakdown:
    """Scalar losses plus gradients at the four network outputs."""

    total: float
    recon: float
    contrastive: float
    distance: float
    d_recon1: np.ndarray
    d_recon2: np.ndarray
    d_embed1: np.ndarray
    d_embed2: np.ndarray


def _pair(a, b, name_a: str, name_b: str) -> tuple[np.ndarray, np.ndarray]:
    a = as_matrix(a, name_a)
    b = as_matrix(b, name_b)
    if a.shape != b.shape:
        raise ShapeError(f"{name_a} {a.shape} vs {name_b} {b.shape}")
    return a, b


def recon_loss(xd1, xd2, batch) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared reconstruction error, averaged over both views.

    MSE means the mean over all entries of the batch. Returns the value
    and the gradients with respect to each decoded view.
    """
    xd1, xd2 = _pair(xd1, xd2, "view-1 reconstruction", "view-2 reconstruction")
    b = as_matrix(batch, "batch")
    if b.shape != xd1.shape:
        raise ShapeError(f"batch {b.shape} vs reconstruction {xd1.shape}")
    n = b.size
    r1 = xd1 - b
    r2 = xd2 - b
    value = 0.5 * (float(np.sum(r1 * r1)) + float(np.sum(r2 * r2))) / n
    return value, r1 / n, r2 / n


def distance_loss(xe1, xe2) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared entrywise difference between the two embedding views."""
    xe1, xe2 = _pair(xe1, xe2, "view-1 embedding", "view-2 embedding")
    diff = xe1 - xe2
    n = diff.size
    value = float(np.sum(diff * diff)) / n
    g = 2.0 * diff / n
    return value, g, -g


def _similarity(z: np.ndarray, kind: str) -> tuple[np.ndarray, dict]:
    """Pairwise similarity matrix plus cached pieces for the backward pass."""
    if kind == "dot":
        return z @ z.T, {}
    norms = np.sqrt(np.sum(z * z, axis=1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateEmbeddingError(
            f"zero-norm embedding row {bad} under cosine similarity")
    zn = z / norms[:, None]
    return zn @ zn.T, {"zn": zn, "norms": norms}


def contrastive_loss(xe1, xe2, temperature: float = 0.1,
                     similarity: str = "dot") -> tuple[float, np.ndarray, np.ndarray]:
    """Normalized temperature-scaled cross entropy over 2K stacked embeddings.

    Anchor a's positive is its sibling view of the same row; the other
    2K - 2 embeddings are negatives. Per anchor:

        l_a = -log( exp(s(a, p) / t) / sum_{k != a} exp(s(a, k) / t) )

    and the loss is the mean over all 2K anchors. Logits are stabilized by
    a per-anchor max subtraction before exponentiation. Returns analytic
    gradients with respect to both embedding views.
    """
    xe1, xe2 = _pair(xe1, xe2, "view-1 embedding", "view-2 embedding")
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if similarity not in SIMILARITIES:
        raise ConfigError(f"similarity must be one of {SIMILARITIES}, "
                          f"got {similarity!r}")
    k = xe1.shape[0]
    if k < 2:
        raise InsufficientNegativesError(
            f"contrastive batch needs K >= 2 rows, got K={k}")
    n = 2 * k
    z = np.vstack([xe1, xe2])
    sims, cache = _similarity(z, similarity)
    logits = sims / temperature
    diag = np.arange(n)
    logits[diag, diag] = -np.inf
    pos = np.concatenate([diag[k:], diag[:k]])

    row_max = logits.max(axis=1, keepdims=True)
    # Very negative exponents turn into subnormal doubles after the two
    # divisions below, and a gradient matrix sprinkled with subnormals
    # makes the backward matmul orders of magnitude slower on common
    # CPUs. Clamping at -660 keeps every derived entry a normal double
    # while altering each exp term by under 1e-286 against a denominator
    # of at least 1, far below double precision, so results stay
    # bit-identical.
    expd = np.exp(np.maximum(logits - row_max, -660.0))
    denom = expd.sum(axis=1)
    log_denom = np.log(denom) + row_max[:, 0]
    value = float(np.mean(log_denom - logits[diag, pos]))

    # d value / d sims: softmax minus the positive indicator, over off-diag
    # entries, scaled by 1 / (2K * temperature).
    soft = expd / denom[:, None]
    soft[diag, pos] -= 1.0
    soft[diag, diag] = 0.0
    g_sims = soft / (n * temperature)

    if similarity == "dot":
        dz = (g_sims + g_sims.T) @ z
    else:
        zn = cache["zn"]
        norms = cache["norms"]
        d_zn = (g_sims + g_sims.T) @ zn
        # chain through row normalization: project out the radial component
        radial = np.sum(d_zn * zn, axis=1, keepdims=True)
        dz = (d_zn - radial * zn) / norms[:, None]
    return value, dz[:k], dz[k:]


def total_loss(xd1, xd2, xe1, xe2, batch, cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of the three objectives with merged gradients."""
    l_r, d_xd1, d_xd2 = recon_loss(xd1, xd2, batch)
    l_c, c_xe1, c_xe2 = contrastive_loss(
        xe1, xe2, temperature=cfg.temperature, similarity=cfg.similarity)
    l_d, d_xe1, d_xe2 = distance_loss(xe1, xe2)
    total = (cfg.recon_weight * l_r + cfg.contrastive_weight * l_c
             + cfg.distance_weight * l_d)
    return LossBreakdown(
        total=total,
        recon=l_r,
        contrastive=l_c,
        distance=l_d,
        d_recon1=cfg.recon_weight * d_xd1,
        d_recon2=cfg.recon_weight * d_xd2,
        d_embed1=cfg.contrastive_weight * c_xe1 + cfg.distance_weight * d_xe1,
        d_embed2=cfg.contrastive_weight * c_xe2 + cfg.distance_weight * d_xe2,
    )


@dataclass(frozen=True)
class BenchResult:
    """Per-batch wall time of loss plus gradients under each similarity."""

    dataset_tag: str
    embed_dim: int
    k: int
    t_dot_s: float
    t_cos_s: float

    @property
    def ratio(self) -> float:
        return self.t_cos_s / self.t_dot_s

    def csv_row(self) -> str:
        return (f"{self.dataset_tag},{self.embed_dim},{self.k},"
                f"{self.t_dot_s!r},{self.t_cos_s!r},{self.ratio!r}")


def bench_similarity(embed_dim: int, k: int, iters: int,
                     rng: RngStream | None = None,
                     dataset_tag: str = "random",
                     warmup: int = 3) -> BenchResult:
    """Time ``contrastive_loss`` (value and gradients) for both kernels.

    Both kernels see identical inputs. ``warmup`` untimed iterations run
    first for each kernel; the timed iterations then alternate between
    the kernels so background load hits both equally, and the reported
    figure is each kernel's accumulated wall time divided by ``iters``.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    if warmup < 3:
        raise ConfigError("need at least 3 warmup iterations")
    stream = rng or RngStream(seed=0, tag="bench")
    g = stream.generator()
    xe1 = g.standard_normal((k, embed_dim))
    xe2 = g.standard_normal((k, embed_dim))

    for kind in SIMILARITIES:
        for _ in range(warmup):
            contrastive_loss(xe1, xe2, similarity=kind)
    totals = {kind: 0.0 for kind in SIMILARITIES}
    for _ in range(iters):
        for kind in SIMILARITIES:
            start = time.perf_counter()
            contrastive_loss(xe1, xe2, similarity=kind)
            totals[kind] += time.perf_counter() - start
    times = {kind: total / iters for kind, total in totals.items()}
    return BenchResult(
        dataset_tag=dataset_tag,
        embed_dim=embed_dim,
        k=k,
        t_dot_s=times["dot"],
        t_cos_s=times["cosine"],
    )
