"""Pure-numpy reference kernels.

Same signatures and bit-for-bit outputs as the compiled ``_kernels`` module.
All inputs are C-contiguous 4-D arrays ``[B, C, H, W]``; pooling kernels
require even ``H`` and ``W``.
"""

from __future__ import annotations

import numpy as np


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 zero-padded neighbourhoods into ``[C*9, B*H*W]`` columns."""
    B, C, H, W = x.shape
    xp = np.zeros((C, B, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((C, 3, 3, B, H, W), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky:ky + H, kx:kx + W]
    return cols.reshape(C * 9, B * H * W)


def avgpool2(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    v = x.reshape(B, C, H // 2, 2, W // 2, 2)
    # fixed summation order keeps parity with the compiled kernel
    s = (v[:, :, :, 0, :, 0] + v[:, :, :, 0, :, 1]) + (v[:, :, :, 1, :, 0] + v[:, :, :, 1, :, 1])
    return np.ascontiguousarray(s * x.dtype.type(0.25))


def upsample2(g: np.ndarray) -> np.ndarray:
    B, C, h, w = g.shape
    out = np.empty((B, C, h, 2, w, 2), dtype=g.dtype)
    out[...] = g[:, :, :, None, :, None]
    return out.reshape(B, C, 2 * h, 2 * w)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling. Returns the pooled map and the winning slot (0..3, row-major)."""
    B, C, H, W = x.shape
    v = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(v, axis=-1).astype(np.uint8)
    out = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def pool_gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    v = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(B, C, H // 2, W // 2, 4)
    return np.ascontiguousarray(np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0])


def pool_scatter(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    B, C, h, w = g.shape
    out = np.zeros((B, C, h, w, 4), dtype=g.dtype)
    np.put_along_axis(out, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    out = out.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out).reshape(B, C, 2 * h, 2 * w)
