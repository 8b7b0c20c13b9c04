"""Dense matrix primitives, correlation statistics, and keyed RNG streams.

All public operations work on float64 arrays and return finite results.
Covariance uses the population (1/n) normalization throughout the package;
every downstream bound and oracle assumes that convention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateVarianceError,
    InsufficientDataError,
    ShapeError,
)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Raises
    ------
    ShapeError
        If inner dimensions disagree; the message names both shapes.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite entries")
    return out


def pearson(x, y) -> float:
    """Pearson correlation of two equally long 1-D samples.

    Uses population moments; the normalization cancels, so the value
    matches the sample-moment definition exactly. Result is clipped to
    [-1, 1] to shed float dust.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise InsufficientDataError("pearson needs at least 2 observations")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = float(np.sqrt(np.mean(xd * xd)))
    sy = float(np.sqrt(np.mean(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVarianceError("constant column in correlation")
    r = float(np.mean(xd * yd) / (sx * sy))
    return float(np.clip(r, -1.0, 1.0))


def covariance(m) -> np.ndarray:
    """Population covariance (1/n) of rows-as-observations.

    Output is symmetrized to remove rounding asymmetry.
    """
    m = as_matrix(m)
    if m.shape[0] < 2:
        raise InsufficientDataError("covariance needs at least 2 rows")
    centered = m - m.mean(axis=0)
    cov = centered.T @ centered / m.shape[0]
    return (cov + cov.T) / 2.0


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, silo, round, tag).

    Two streams with equal keys replay bit-identically; distinct keys give
    statistically independent sequences regardless of the order in which
    they are consumed. That makes client randomness independent of training
    schedule (serial vs parallel, any round interleaving).
    """

    seed: int
    silo: int = 0
    round: int = 0
    tag: str = ""

    def child(self, *, silo: int | None = None, round: int | None = None,
              tag: str | None = None) -> "RngStream":
        """Derive a stream with some key parts replaced."""
        changes = {}
        if silo is not None:
            changes["silo"] = silo
        if round is not None:
            changes["round"] = round
        if tag is not None:
            changes["tag"] = tag
        return replace(self, **changes)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        raw = f"{self.seed}|{self.silo}|{self.round}|{self.tag}".encode()
        key = int.from_bytes(hashlib.sha256(raw).digest()[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))
