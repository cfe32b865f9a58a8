"""Shared numerical oracles for the test suite."""

import numpy as np


def central_diff(fn, x, h=1e-5):
    """Gradient of the scalar function ``fn`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = x.copy()
        lo = x.copy()
        hi[idx] += h
        lo[idx] -= h
        grad[idx] = (fn(hi) - fn(lo)) / (2.0 * h)
        it.iternext()
    return grad


def rel_error(a, b, floor=1e-12):
    """Scale-free gradient mismatch: ||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), floor)
    return np.linalg.norm((a - b).ravel()) / denom
