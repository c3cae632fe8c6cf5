"""Backend selection for the hot convolution/pooling kernels.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback in ``_pykernels`` takes over. Both expose the same four functions and
agree bit-for-bit, so the choice only affects speed.
"""
import logging

from cellattn import _pykernels

log = logging.getLogger(__name__)

try:
    from cellattn import _ckernels
except ImportError:  # extension not built
    _ckernels = None
    log.debug("compiled kernels unavailable, using numpy fallback")

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return sorted(_BACKENDS)


def backend():
    """Name of the backend currently in use."""
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def set_backend(name):
    """Switch kernels to ``"cython"`` or ``"python"``; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    prev = backend()
    _active = _BACKENDS[name]
    return prev


def im2col(x, kh, kw, stride, pad):
    return _active.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _active.col2im(cols, x_shape, kh, kw, stride, pad)


def maxpool_forward(x, k, stride, pad):
    return _active.maxpool_forward(x, k, stride, pad)


def maxpool_backward(g, arg, x_shape, k, stride, pad):
    return _active.maxpool_backward(g, arg, x_shape, k, stride, pad)
