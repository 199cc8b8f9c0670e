# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Outputs match the numpy reference bit for bit (same arithmetic order).
"""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, ky, kx, b, y, xx, sy, sx, row, base
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C * 9, B * H * W), dtype=dtype)
    cdef real[:, ::1] o = out
    with nogil:
        for c in range(C):
            for ky in range(3):
                for kx in range(3):
                    row = c * 9 + ky * 3 + kx
                    for b in range(B):
                        for y in range(H):
                            base = (b * H + y) * W
                            sy = y + ky - 1
                            if sy < 0 or sy >= H:
                                for xx in range(W):
                                    o[row, base + xx] = 0
                                continue
                            for xx in range(W):
                                sx = xx + kx - 1
                                if sx < 0 or sx >= W:
                                    o[row, base + xx] = 0
                                else:
                                    o[row, base + xx] = x[b, c, sy, sx]
    return out


def avgpool2(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    cdef Py_ssize_t b, c, i, j
    cdef real quarter = 0.25
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        o[b, c, i, j] = ((x[b, c, 2 * i, 2 * j] + x[b, c, 2 * i, 2 * j + 1])
                                         + (x[b, c, 2 * i + 1, 2 * j] + x[b, c, 2 * i + 1, 2 * j + 1])) * quarter
    return out


def upsample2(real[:, :, :, ::1] g):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], h = g.shape[2], w = g.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef real v
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, 2 * h, 2 * w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        v = g[b, c, i, j]
                        o[b, c, 2 * i, 2 * j] = v
                        o[b, c, 2 * i, 2 * j + 1] = v
                        o[b, c, 2 * i + 1, 2 * j] = v
                        o[b, c, 2 * i + 1, 2 * j + 1] = v
    return out


def maxpool2(real[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    cdef Py_ssize_t b, c, i, j
    cdef real best, v
    cdef unsigned char k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, h, w), dtype=dtype)
    idx = np.empty((B, C, h, w), dtype=np.uint8)
    cdef real[:, :, :, ::1] o = out
    cdef unsigned char[:, :, :, ::1] ix = idx
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        best = x[b, c, 2 * i, 2 * j]
                        k = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[b, c, i, j] = best
                        ix[b, c, i, j] = k
    return out, idx


def pool_gather(real[:, :, :, ::1] x, const unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    cdef Py_ssize_t b, c, i, j
    cdef unsigned char k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B, C, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        k = idx[b, c, i, j]
                        o[b, c, i, j] = x[b, c, 2 * i + (k >> 1), 2 * j + (k & 1)]
    return out


def pool_scatter(real[:, :, :, ::1] g, const unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], h = g.shape[2], w = g.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef unsigned char k
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, C, 2 * h, 2 * w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        k = idx[b, c, i, j]
                        o[b, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = g[b, c, i, j]
    return out
