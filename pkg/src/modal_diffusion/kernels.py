"""Kernel backend selection.

The compiled extension is used when it was built; set
``MODAL_DIFFUSION_PURE=1`` to force the NumPy fallback.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("MODAL_DIFFUSION_PURE"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return np.ascontiguousarray(x)


def cross_distance_sum(a, b, backend: str | None = None) -> float:
    impl = _pick(backend)
    return float(impl.cross_distance_sum(_as2d(a), _as2d(b)))


def self_distance_sum(a, backend: str | None = None) -> float:
    impl = _pick(backend)
    return float(impl.self_distance_sum(_as2d(a)))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
