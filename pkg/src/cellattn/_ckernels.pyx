# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels.

Same contracts as ``_pykernels``; scatter kernels accumulate in window-offset
order so results are bit-identical to the numpy fallback.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad) nogil:
    return (n + 2 * pad - k) // stride + 1


def _im2col(const floating[:, :, :, ::1] x, floating[:, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t OW = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t b, c, oh, ow, ki, kj, row, col, ih, iw
    with nogil:
        for b in range(B):
            for oh in range(OH):
                for ow in range(OW):
                    row = (b * OH + oh) * OW + ow
                    col = 0
                    for c in range(C):
                        for ki in range(kh):
                            ih = oh * stride + ki - pad
                            for kj in range(kw):
                                iw = ow * stride + kj - pad
                                if 0 <= ih < H and 0 <= iw < W:
                                    cols[row, col] = x[b, c, ih, iw]
                                else:
                                    cols[row, col] = 0
                                col += 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    OH = _out_size(H, kh, stride, pad)
    OW = _out_size(W, kw, stride, pad)
    cols = np.empty((B * OH * OW, C * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad)
    return cols


def _col2im(const floating[:, ::1] cols, floating[:, :, :, ::1] out_t,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    # gather form: each output element sums its window contributions in
    # ascending (ki, kj) order starting from zero, matching the scatter order
    # of the numpy fallback
    cdef Py_ssize_t B = out_t.shape[0], H = out_t.shape[1], W = out_t.shape[2], C = out_t.shape[3]
    cdef Py_ssize_t OH = _out_size(H, kh, stride, pad)
    cdef Py_ssize_t OW = _out_size(W, kw, stride, pad)
    cdef Py_ssize_t K = kh * kw
    cdef Py_ssize_t b, c, ih, iw, ki, kj, th, tw, oh, ow, base
    with nogil:
        for b in range(B):
            for ih in range(H):
                for iw in range(W):
                    for ki in range(kh):
                        th = ih + pad - ki
                        if th < 0 or th % stride:
                            continue
                        oh = th // stride
                        if oh >= OH:
                            continue
                        for kj in range(kw):
                            tw = iw + pad - kj
                            if tw < 0 or tw % stride:
                                continue
                            ow = tw // stride
                            if ow >= OW:
                                continue
                            base = ki * kw + kj
                            for c in range(C):
                                out_t[b, ih, iw, c] += cols[(b * OH + oh) * OW + ow, c * K + base]


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    B, C, H, W = x_shape
    out_t = np.zeros((B, H, W, C), dtype=cols.dtype)
    _col2im(cols, out_t, kh, kw, stride, pad)
    return np.ascontiguousarray(out_t.transpose(0, 3, 1, 2))


def _maxpool_forward(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                     int[:, :, :, ::1] arg, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t b, c, oh, ow, ki, kj, ih, iw
    cdef int best_i
    cdef floating best, v
    cdef bint found
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        found = False
                        best = 0
                        best_i = 0
                        for ki in range(k):
                            ih = oh * stride + ki - pad
                            for kj in range(k):
                                iw = ow * stride + kj - pad
                                if 0 <= ih < H and 0 <= iw < W:
                                    v = x[b, c, ih, iw]
                                    if not found or v > best:
                                        best = v
                                        best_i = <int>(ki * k + kj)
                                        found = True
                        out[b, c, oh, ow] = best
                        arg[b, c, oh, ow] = best_i


def maxpool_forward(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    OH = _out_size(H, k, stride, pad)
    OW = _out_size(W, k, stride, pad)
    out = np.empty((B, C, OH, OW), dtype=x.dtype)
    arg = np.empty((B, C, OH, OW), dtype=np.int32)
    _maxpool_forward(x, out, arg, k, stride, pad)
    return out, arg


def _maxpool_backward(const floating[:, :, :, ::1] g, const int[:, :, :, ::1] arg,
                      floating[:, :, :, ::1] out, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], OH = g.shape[2], OW = g.shape[3]
    cdef Py_ssize_t H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t b, c, oh, ow, ki, kj, ih, iw
    cdef int target
    with nogil:
        for ki in range(k):
            for kj in range(k):
                target = <int>(ki * k + kj)
                for b in range(B):
                    for c in range(C):
                        for oh in range(OH):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(OW):
                                if arg[b, c, oh, ow] != target:
                                    continue
                                iw = ow * stride + kj - pad
                                if 0 <= iw < W:
                                    out[b, c, ih, iw] += g[b, c, oh, ow]


def maxpool_backward(g, arg, x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    g = np.ascontiguousarray(g)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    out = np.zeros(tuple(x_shape), dtype=g.dtype)
    _maxpool_backward(g, arg, out, k, stride, pad)
    return out
