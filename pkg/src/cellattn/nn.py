"""Layer objects holding parameters, built on :mod:`cellattn.functional`.

Modules register parameters, buffers and child modules in declaration order,
which fixes the order used by checkpoints and optimizers.
"""
from collections import OrderedDict
import zlib

import numpy as np

from cellattn import functional as F
from cellattn.tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def param_rng(seed, path):
    """Generator for one parameter, keyed on the model seed and its dotted path.

    Keying on the path keeps a parameter's initial value independent of which
    other modules exist, so architectures that share submodules share weights.
    """
    return np.random.default_rng([int(seed), zlib.crc32(path.encode())])


class Module:
    training = True

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def children(self):
        return self._modules.items()

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Ordered mapping of parameter and buffer paths to array copies."""
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = b.copy()
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            if own[name].shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {np.shape(arr)} vs {own[name].shape}")
        for path, m in self.named_modules():
            pre = f"{path}." if path else ""
            for name, p in m._params.items():
                p.data = np.array(state[pre + name], dtype=p.dtype)
            for name in list(m._buffers):
                m.set_buffer(name, np.array(state[pre + name], dtype=m._buffers[name].dtype))

    def astype(self, dtype):
        """Convert parameters and buffers in place; returns self."""
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name in list(m._buffers):
                m.set_buffer(name, m._buffers[name].astype(dtype))
        return self

    def init_parameters(self, seed, prefix=""):
        """Deterministically (re)initialize every parameter below this module."""
        for path, m in self.named_modules(prefix):
            m.reset_parameters(seed, path)

    def reset_parameters(self, seed, path):
        pass

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None, bias=False,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def reset_parameters(self, seed, path):
        fan_in = self.in_channels * self.kernel_size ** 2
        rng = param_rng(seed, f"{path}.weight")
        self.weight.data = _he_normal(rng, self.weight.shape, fan_in, self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def reset_parameters(self, seed, path):
        rng = param_rng(seed, f"{path}.weight")
        self.weight.data = _he_normal(rng, self.weight.shape, self.in_features, self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return F.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch normalization with running statistics.

    Running statistics start at mean 0 / variance 1 so an untrained network
    can be evaluated; ``F.batch_norm`` itself refuses eval mode without them.
    """

    def __init__(self, channels, momentum=F.BN_MOMENTUM, eps=F.BN_EPS, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def reset_parameters(self, seed, path):
        self.weight.data = np.ones_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)
        self.set_buffer("running_mean", np.zeros_like(self.running_mean))
        self.set_buffer("running_var", np.ones_like(self.running_var))

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            "train" if self.training else "eval", self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Identity(Module):
    def forward(self, x):
        return x


class NamedSequential(Module):
    """Sequential container with explicit child names."""

    def __init__(self, layers):
        super().__init__()
        for name, layer in layers:
            setattr(self, name, layer)

    def __iter__(self):
        return iter(self._modules.values())

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x
