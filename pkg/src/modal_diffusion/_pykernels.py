"""NumPy fallbacks for the compiled kernels in ``_ckernels``."""

import math

import numpy as np

_BLOCK = 1024


def cross_distance_sum(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over all (i, j) of ||a_i - b_j||."""
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    rows = []
    for lo in range(0, a.shape[0], _BLOCK):
        blk = a[lo:lo + _BLOCK]
        diff = blk[:, None, :] - b[None, :, :]
        rows.append(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).sum(axis=1))
    return math.fsum(np.concatenate(rows))


def self_distance_sum(a: np.ndarray) -> float:
    """Sum over all ordered pairs (i, j) of ||a_i - a_j|| (diagonal is zero)."""
    return cross_distance_sum(a, a)
