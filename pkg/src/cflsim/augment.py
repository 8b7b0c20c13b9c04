"""Stochastic view generation for contrastive pretraining.

Each batch yields two corrupted views of the same rows: both get an
independent binomial mask, and the second additionally gets Gaussian
noise on every entry. The input batch is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import RngStream, as_matrix

__all__ = ["AugmentConfig", "binomial_mask", "gaussian_noise", "make_views"]


@dataclass(frozen=True)
class AugmentConfig:
    """View-corruption knobs.

    ``mask_prob`` is the per-entry probability of masking; ``noise_level``
    is the Gaussian scale added to the second view. ``mask_mode`` selects
    what a masked entry becomes: ``"zero"`` overwrites it with 0,
    ``"swap"`` replaces it with the same column's value from a random row
    of the batch.
    """

    noise_level: float = 0.1
    mask_prob: float = 0.2
    second_view_gaussian: bool = True
    mask_mode: str = "zero"

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.noise_level < 0.0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.mask_mode not in ("zero", "swap"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ConfigError(f"expected RngStream or Generator, got {type(rng).__name__}")


def binomial_mask(batch, prob: float, rng, mode: str = "zero") -> np.ndarray:
    """Corrupt each entry independently with probability ``prob``.

    Returns a new array; the input is untouched. ``prob=0`` is an exact
    copy, ``prob=1`` corrupts everything.
    """
    b = as_matrix(batch, "batch")
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"mask probability must be in [0, 1], got {prob}")
    g = _generator(rng)
    hit = g.random(b.shape) < prob
    out = b.copy()
    if mode == "zero":
        out[hit] = 0.0
    elif mode == "swap":
        donors = g.integers(0, b.shape[0], size=b.shape)
        cols = np.broadcast_to(np.arange(b.shape[1]), b.shape)
        out[hit] = b[donors[hit], cols[hit]]
    else:
        raise ConfigError(f"unknown mask mode {mode!r}")
    return out


def gaussian_noise(batch, level: float, rng) -> np.ndarray:
    """Add iid N(0, level^2) noise to every entry; input untouched."""
    b = as_matrix(batch, "batch")
    if level < 0.0:
        raise ConfigError(f"noise level must be >= 0, got {level}")
    g = _generator(rng)
    return b + level * g.standard_normal(b.shape)


def make_views(batch, cfg: AugmentConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two independently corrupted views of one batch.

    Draw order is fixed (mask for view 1, mask for view 2, then noise), so
    a replayed stream reproduces both views bit-exactly.
    """
    b = as_matrix(batch, "batch")
    g = _generator(rng)
    v1 = binomial_mask(b, cfg.mask_prob, g, mode=cfg.mask_mode)
    v2 = binomial_mask(b, cfg.mask_prob, g, mode=cfg.mask_mode)
    if cfg.second_view_gaussian:
        v2 = gaussian_noise(v2, cfg.noise_level, g)
    return v1, v2
