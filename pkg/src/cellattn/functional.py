"""Differentiable primitives.

Every function takes and returns :class:`~cellattn.tensor.Tensor` objects and
registers a vector-Jacobian product via :func:`~cellattn.tensor.make_result`.
Image tensors are (batch, channel, height, width). Convolution follows the
cross-correlation convention (no kernel flip).
"""
import numpy as np

from cellattn import kernels
from cellattn.tensor import ShapeError, Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), vjp, "mul")


def matmul(a, b):
    """2-D matrix product."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_result(out, (x,), lambda g: (g / xd,), "log")


# -- reductions and reshaping ----------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    n = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), vjp, "mean")


def reshape(x, shape):
    orig = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(np.array(x.data[idx]), (x,), vjp, "getitem")


def concat_channels(xs):
    """Stack tensors along the channel axis in argument order."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=1), xs, vjp, "concat_channels")


# -- activations ------------------------------------------------------------

def relu(x):
    xd = x.data
    mask = xd > 0  # subgradient at exactly 0 is 0
    return make_result(xd * mask, (x,),
                       lambda g: (g * mask,), "relu")


def sigmoid(x):
    out = 0.5 * (1 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), vjp, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), vjp, "log_softmax")


# -- layers -----------------------------------------------------------------

def dense(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias``; weight is (out_features, in_features)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp, "dense")


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. weight is (out_channels, in_channels, kH, kW)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    wm = wd.reshape(o, -1)

    if kh == kw == 1 and stride == 1 and padding == 0:
        xm = xd.reshape(b, c, h * w)
        out = np.matmul(wm, xm).reshape(b, o, h, w)

        def core_vjp(g):
            gm = g.reshape(b, o, h * w)
            gx = np.matmul(wm.T, gm).reshape(xd.shape) if x.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = (gm.transpose(1, 0, 2).reshape(o, -1) @ xm.transpose(1, 0, 2).reshape(c, -1).T).reshape(wd.shape)
            return gx, gw
    else:
        cols = kernels.im2col(xd, kh, kw, stride, padding)
        out = np.ascontiguousarray((cols @ wm.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2))

        def core_vjp(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gx = kernels.col2im(g2 @ wm, xd.shape, kh, kw, stride, padding) if x.requires_grad else None
            gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
            return gx, gw

    if bias is None:
        return make_result(out, (x, weight), core_vjp, "conv2d")

    out += bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        return (*core_vjp(g), g.sum(axis=(0, 2, 3)))

    return make_result(out, (x, weight, bias), vjp, "conv2d")


def maxpool2d(x, window, stride=None, padding=0):
    stride = stride or window
    b, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"maxpool2d: window {window} exceeds input {h}x{w}")
    out, arg = kernels.maxpool_forward(x.data, window, stride, padding)
    shape = x.shape
    return make_result(out, (x,),
                       lambda g: (kernels.maxpool_backward(g, arg, shape, window, stride, padding),),
                       "maxpool2d")


def avgpool2d(x, window, stride=None):
    stride = stride or window
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"avgpool2d: window {window} exceeds input {h}x{w}")
    oh, ow = _conv_out(h, window, stride, 0), _conv_out(w, window, stride, 0)
    xd = x.data
    acc = np.zeros((b, c, oh, ow), dtype=xd.dtype)
    for ki in range(window):
        for kj in range(window):
            acc += xd[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    area = window * window
    out = acc / area

    def vjp(g):
        gx = np.zeros_like(xd)
        share = g / area
        for ki in range(window):
            for kj in range(window):
                gx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += share
        return (gx,)

    return make_result(out, (x,), vjp, "avgpool2d")


def global_avg_pool(x):
    """Average each channel plane to one value: (B, C, H, W) -> (B, C, 1, 1)."""
    b, c, h, w = x.shape
    xd = x.data
    return make_result(xd.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / (h * w), xd.shape).copy(),),
                       "global_avg_pool")


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, mode="train",
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (batch, height, width).

    In train mode the batch statistics normalize ``x`` and the running
    statistics (numpy arrays, updated in place) move towards them with
    ``momentum``; the running variance tracks the unbiased batch variance.
    Eval mode normalizes with the running statistics.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: parameters {gamma.shape} do not match input {x.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, -1, 1, 1)
    if mode == "train":
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running_mean is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode requires running statistics")
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, -1, 1, 1)
    xhat = (xd - mu.reshape(1, -1, 1, 1).astype(xd.dtype)) * inv
    out = gd * xhat + beta.data.reshape(1, -1, 1, 1)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if mode == "train":
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            gx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), vjp, "batch_norm")


def _interp_matrix(n_in, n_out, dtype):
    # align_corners=False source coordinates, clamped at the low edge
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_upsample(x, target_h, target_w):
    """Bilinear resize of (B, C, H, W) to (B, C, target_h, target_w), align-corners false."""
    b, c, h, w = x.shape
    ah = _interp_matrix(h, target_h, x.dtype)
    aw = _interp_matrix(w, target_w, x.dtype)
    out = np.matmul(ah, np.matmul(x.data, aw.T))
    return make_result(out, (x,), lambda g: (np.matmul(ah.T, np.matmul(g, aw)),), "bilinear_upsample")


# -- losses -----------------------------------------------------------------

def _check_labels(labels, k):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy_with_logits(logits, labels):
    """Mean categorical cross-entropy from pre-softmax scores (log-sum-exp stable)."""
    b, k = logits.shape
    labels = _check_labels(labels, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / b),)

    return make_result(loss, (logits,), vjp, "cross_entropy")


def cross_entropy_loss(probabilities, labels):
    """Mean of -log p[label] over the batch, from probability rows."""
    b, k = probabilities.shape
    labels = _check_labels(labels, k)
    rows = np.arange(b)
    p = probabilities.data[rows, labels]
    with np.errstate(divide="ignore"):
        loss = np.asarray(-np.log(p).mean(), dtype=probabilities.dtype)

    def vjp(g):
        grad = np.zeros_like(probabilities.data)
        grad[rows, labels] = -g / (b * p)
        return (grad,)

    return make_result(loss, (probabilities,), vjp, "cross_entropy")
