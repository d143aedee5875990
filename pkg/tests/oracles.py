"""Brute-force reference computations shared by several test modules."""

import numpy as np


def simplex_grid(n: int, step: float = 0.005) -> np.ndarray:
    """Every weight vector on the simplex whose entries are multiples of ``step``."""
    N = int(round(1.0 / step))
    if n == 1:
        return np.ones((1, 1))
    idx = np.indices((N + 1,) * (n - 1), dtype=np.int16).reshape(n - 1, -1)
    head = idx[:, idx.sum(axis=0) <= N].T.astype(float)
    last = N - head.sum(axis=1, keepdims=True)
    return np.hstack([head, last]) / N


def grid_vnorm_min(A, a, v, step: float = 0.005) -> float:
    """Smallest V-norm mismatch over the simplex grid."""
    W = simplex_grid(A.shape[0], step)
    r = W @ A - a
    return float(np.sqrt(np.min((r * r) @ v)))
