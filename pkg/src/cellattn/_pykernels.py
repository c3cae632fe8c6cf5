"""Pure-numpy versions of the hot convolution/pooling kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. Accumulation order in the scatter kernels (``col2im`` and
``maxpool_backward``) follows the window-offset order used by the compiled
versions, so both backends produce bit-identical results.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, oh, ow, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (B, C, H, W) into rows of receptive fields.

    Returns an array of shape (B*OH*OW, C*kh*kw); row order is (b, oh, ow) and
    column order is (c, ki, kj).
    """
    b, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    xp = np.ascontiguousarray(_pad(x, pad))
    win = _windows(xp, kh, kw, stride, oh, ow)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add rows back into image layout."""
    b, c, h, w = x_shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    g = cols.reshape(b, oh, ow, c, kh, kw)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = g[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += patch
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward(x, k, stride, pad):
    """Max pooling. Returns (output, flat argmax offset within each window)."""
    b, c, h, w = x.shape
    oh = _out_size(h, k, stride, pad)
    ow = _out_size(w, k, stride, pad)
    xp = np.ascontiguousarray(_pad(x, pad, value=-np.inf))
    win = _windows(xp, k, k, stride, oh, ow).reshape(b, c, oh, ow, k * k)
    arg = np.argmax(win, axis=-1).astype(np.int32)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(g, arg, x_shape, k, stride, pad):
    b, c, h, w = x_shape
    oh, ow = g.shape[2], g.shape[3]
    gp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            hit = np.where(arg == ki * k + kj, g, 0).astype(g.dtype, copy=False)
            gp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += hit
    if pad:
        return np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + w])
    return gp
