"""Small argument-checking helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_positive(name, value, strict=True):
    """Raise ValueError unless ``value`` is positive (or nonnegative)."""
    if strict and not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return value


def check_choice(name, value, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(name, arr, dim=None, dtype=float):
    """Coerce to a 1-D float array, optionally checking its length."""
    out = np.asarray(arr, dtype=dtype)
    if out.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {out.shape}")
    if dim is not None and out.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {out.shape[0]}")
    return out


def as_rng(seed):
    """Accept a Generator, a seed, or None and return a numpy Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
