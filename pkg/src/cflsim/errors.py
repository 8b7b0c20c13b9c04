"""Exception types shared across the package.

Each error maps to one failure family so callers (and the CLI exit-code
table) can branch on type instead of parsing messages.
"""


class CflError(Exception):
    """Base class for all package errors."""


class ShapeError(CflError):
    """Operands have incompatible or non-2D shapes."""


class InsufficientDataError(CflError):
    """Too few rows (or present rows) for the requested statistic."""


class DegenerateVarianceError(CflError):
    """A column with zero variance reached a correlation routine."""


class DegenerateLabelsError(CflError):
    """Fewer than two classes in a supervised fit."""


class DegenerateEmbeddingError(CflError):
    """A zero-norm embedding row reached cosine similarity."""


class InsufficientNegativesError(CflError):
    """Contrastive batch too small to form negatives (K < 2)."""


class ZeroFillCorruptionError(CflError):
    """Presence mask and zero-filled rows disagree."""


class StaleTraceError(CflError):
    """A forward trace was paired with parameters it was not built from."""


class TrainingDivergenceError(CflError):
    """Loss or gradients became non-finite during training."""


class ConfigError(CflError):
    """Malformed, unknown, or out-of-range configuration values."""


class DataError(CflError):
    """Unreadable or malformed input data."""
