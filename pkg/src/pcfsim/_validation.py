"""Input validation helpers shared by the simulator and the estimators."""

from __future__ import annotations

import math

import numpy as np


class ConfigError(ValueError):
    """A configuration value violates a documented invariant.

    ``field`` names the offending parameter (dotted path for scenario keys).
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DomainError(ValueError):
    """A function argument lies outside the mathematical domain."""


def check_positive(value, name: str, strict: bool = True) -> float:
    value = float(value)
    if not math.isfinite(value) or (value <= 0 if strict else value < 0):
        cmp = "> 0" if strict else ">= 0"
        raise ConfigError(f"must be finite and {cmp}, got {value!r}", name)
    return value


def check_finite(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"must be finite, got {value!r}", name)
    return value


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"must lie in [0, 1], got {value!r}", name)
    return value


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise ConfigError(f"must be an integer, got {value!r}", name)
    value = int(value)
    if value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", name)
    return value


def check_1d(x, name: str = "x", min_length: int = 1) -> np.ndarray:
    """Return ``x`` as a finite float64 1-d array of at least ``min_length``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ConfigError(f"expected a 1-d array, got shape {arr.shape}", name)
    if arr.size < min_length:
        raise ConfigError(f"needs at least {min_length} samples, got {arr.size}", name)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite values", name)
    return arr
