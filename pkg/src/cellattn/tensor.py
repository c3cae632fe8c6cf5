"""Dense tensors and reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive in
:mod:`cellattn.functional` records its inputs and a vector-Jacobian product
on the output tensor; :class:`GradientTape` orders those records
topologically and replays them backwards.

Image tensors use the (batch, channel, height, width) layout throughout.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op, where="forward"):
        self.op = op
        super().__init__(f"non-finite value produced by {op!r} during {where}")


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def check_finite(arr, op, where="forward"):
    # a finite sum implies every element is finite; only fall back to the
    # elementwise test when the cheap one fails (e.g. sum overflow)
    s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(op, where)


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op", "_id", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._vjp = None
        self._op = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        tape = GradientTape(self)
        grads = tape.backward(grad)
        for t in tape.leaves:
            g = grads.get(t._id)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from cellattn import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from cellattn import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from cellattn import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from cellattn import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from cellattn import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from cellattn import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from cellattn import functional as F
        return F.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from cellattn import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from cellattn import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from cellattn import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def make_result(data, parents, vjp, op):
    """Wrap ``data`` as the output of primitive ``op``.

    ``vjp(g)`` must return one gradient (or None) per parent.
    """
    check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


class GradientTape:
    """Topologically ordered record of the primitives that produced ``output``.

    Every node appears after all of its inputs. ``backward`` replays the record
    in reverse, accumulating exactly one gradient per reachable tensor.
    """

    def __init__(self, output):
        if not isinstance(output, Tensor):
            raise TapeError("tape needs the Tensor returned by a forward pass")
        self.output = output
        self.nodes = self._toposort(output)
        self.leaves = [t for t in self.nodes if t.is_leaf and t.requires_grad]

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p._id not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed=None, keep=()):
        """Return a dict mapping tensor id -> gradient of the output.

        Gradients of interior nodes are freed once propagated unless their id
        is listed in ``keep``; leaf gradients are always returned.
        """
        out = self.output
        if seed is None:
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=out.dtype)
            if seed.shape != out.shape:
                raise TapeError(f"seed shape {seed.shape} does not match output {out.shape}")
        grads = {out._id: seed}
        for node in reversed(self.nodes):
            g = grads.get(node._id)
            if g is None or node.is_leaf:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                check_finite(pg, node._op, "backward")
                prev = grads.get(p._id)
                grads[p._id] = pg if prev is None else prev + pg
            if node is not out and node._id not in keep:
                # interior gradients are no longer needed
                del grads[node._id]
        return grads


def gradient(output, sources, seed=None):
    """Gradients of ``output`` with respect to each tensor in ``sources``.

    Sources that do not influence the output get zero gradients.
    """
    tape = GradientTape(output)
    grads = tape.backward(seed, keep={s._id for s in sources})
    return [grads.get(s._id, np.zeros_like(s.data)) for s in sources]


def selected_gradient(output, selector, sources):
    """Gradients of the single element ``output[selector]`` (e.g. ``(0, k)`` for
    class k of sample 0) with respect to each tensor in ``sources``."""
    if not isinstance(output, Tensor):
        raise TapeError("backward needs the Tensor returned by a forward pass")
    idx = selector if isinstance(selector, tuple) else (selector,)
    if len(idx) != output.ndim or any(not -n <= i < n for i, n in zip(idx, output.shape)):
        raise TapeError(f"output selector {selector} out of range for output shape {output.shape}")
    seed = np.zeros(output.shape, dtype=output.dtype)
    seed[idx] = 1
    return gradient(output, sources, seed=seed)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    ``f`` receives a numpy array shaped like ``x`` and returns a float. Each
    element is probed at x +/- h; the estimate is
    (f(x + h e_i) - f(x - h e_i)) / (2h).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference_gradient", f"probe of element {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
