"""Input validation helpers shared across the package.

Every layer boundary rejects NaN/Inf early so a poisoned batch fails loudly
at the op that received it instead of three modules downstream.
"""

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def as_float_array(x, name="array", dtype=None):
    """Coerce to a float32/float64 ndarray, rejecting anything else."""
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        if np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.bool_):
            arr = arr.astype(np.float32)
        else:
            raise TypeError(f"{name}: expected float32/float64 data, got dtype {arr.dtype}")
    return arr


def ensure_finite(arr, name="array"):
    """Raise if the array contains NaN or Inf."""
    if not np.isfinite(arr).all():
        bad = int((~np.isfinite(arr)).sum())
        raise ValueError(f"{name}: contains {bad} non-finite value(s)")
    return arr


def ensure_rank(arr, rank, name="array"):
    if arr.ndim != rank:
        raise ValueError(f"{name}: expected a rank-{rank} array, got shape {arr.shape}")
    return arr


def ensure_shape(arr, shape, name="array"):
    """Check shape; ``None`` entries in ``shape`` are wildcards."""
    if len(arr.shape) != len(shape) or any(
        want is not None and got != want for got, want in zip(arr.shape, shape)
    ):
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_index(value, upper, name="index"):
    if not 0 <= value <= upper:
        raise ValueError(f"{name}: must be in [0, {upper}], got {value}")
    return value
