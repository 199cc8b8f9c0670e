"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
reference kernels are used. Set ``DCGM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("DCGM_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x)


def im2col3x3(x: np.ndarray) -> np.ndarray:
    return _impl.im2col3x3(_c(x))


def avgpool2(x: np.ndarray) -> np.ndarray:
    return _impl.avgpool2(_c(x))


def upsample2(g: np.ndarray) -> np.ndarray:
    return _impl.upsample2(_c(g))


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _impl.maxpool2(_c(x))


def pool_gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _impl.pool_gather(_c(x), _c(idx))


def pool_scatter(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return _impl.pool_scatter(_c(g), _c(idx))
