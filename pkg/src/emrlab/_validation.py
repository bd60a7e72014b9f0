"""Small input-validation helpers for flat parameter-aligned vectors."""

import numpy as np


def as_vector(x, name="x"):
    """Return ``x`` as a 1-D float64 array (no copy when already one)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_same_length(**vectors):
    """Convert every keyword argument with :func:`as_vector` and require equal lengths."""
    out = {k: as_vector(v, k) for k, v in vectors.items()}
    lengths = {k: v.shape[0] for k, v in out.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")
    return tuple(out.values())


def check_finite(x, name="x"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_unit_interval(x, name="x"):
    x = as_vector(x, name)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    return x
