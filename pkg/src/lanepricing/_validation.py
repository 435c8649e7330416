"""Input validation helpers shared by the public constructors and estimators."""

from __future__ import annotations

import numbers

import numpy as np


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_nonnegative(value, name):
    return check_positive(value, name, strict=False)


def check_edge_time_array(values, name, n_edges=None, horizon=None, *, lo=0.0, hi=None):
    """Coerce ``values`` to a float array of shape ``(n_edges, horizon)``.

    Scalars broadcast to the full shape; a 1-D array is read as one value per
    edge when ``horizon == 1``, otherwise it must match ``horizon`` and is
    applied to every edge.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        if n_edges is None or horizon is None:
            raise ValueError(f"{name}: a scalar needs n_edges and horizon to broadcast")
        arr = np.full((n_edges, horizon), float(arr))
    elif arr.ndim == 1:
        if n_edges is None or horizon is None:
            raise ValueError(f"{name}: a 1-D array needs n_edges and horizon to broadcast")
        if horizon == 1 and arr.shape[0] == n_edges:
            arr = arr.reshape(n_edges, 1)
        elif arr.shape[0] == horizon:
            arr = np.tile(arr, (n_edges, 1))
        else:
            raise ValueError(f"{name}: length {arr.shape[0]} matches neither edges nor horizon")
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be indexed (edge, time), got ndim={arr.ndim}")
    if n_edges is not None and arr.shape[0] != n_edges:
        raise ValueError(f"{name} has {arr.shape[0]} edge rows, network has {n_edges} edges")
    if horizon is not None and arr.shape[1] != horizon:
        raise ValueError(f"{name} has horizon {arr.shape[1]}, expected {horizon}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if lo is not None and np.any(arr < lo):
        raise ValueError(f"{name} must be >= {lo}")
    if hi is not None and np.any(arr > hi):
        raise ValueError(f"{name} must be <= {hi}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def check_vot_series(vot, horizon=None, name="vot"):
    arr = np.atleast_1d(np.asarray(vot, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D series")
    if horizon is not None:
        if arr.shape[0] == 1 and horizon > 1:
            arr = np.full(horizon, arr[0])
        elif arr.shape[0] != horizon:
            raise ValueError(f"{name} has length {arr.shape[0]}, expected horizon {horizon}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} entries must be finite and > 0")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def check_alpha_grid(alphas):
    arr = np.atleast_1d(np.asarray(alphas, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("alpha grid must be a non-empty 1-D sequence")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("alpha grid values must lie in [0, 1]")
    return arr
