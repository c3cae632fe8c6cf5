"""Declarative construction of the four compared architectures.

Families: ``resnet`` (bottleneck ResNet), ``densenet``, ``ran_resnet``
(ResNet with trunk/mask attention modules) and ``rcan_densenet`` (DenseNet with
a channel attention gate after every dense block).

Every network ends with global average pooling, a dense layer and a softmax.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from cellattn import functional as F
from cellattn.blocks import (AttentionModule, ChannelAttentionBlock, DenseBlock,
                             ResidualBottleneckBlock, TransitionLayer)
from cellattn.nn import BatchNorm2d, Conv2d, Linear, Module, NamedSequential, ReLU, Sequential
from cellattn.tensor import DEFAULT_DTYPE, ShapeError, as_tensor

FAMILIES = ("resnet", "densenet", "ran_resnet", "rcan_densenet")
PLACEMENTS = ("per-stage", "per-block")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    family: str = "rcan_densenet"
    num_classes: int = 5
    input_size: int = 96
    in_channels: int = 3
    stem_channels: int = 32
    stem_kernel: int = 3
    # resnet families: bottleneck mid widths per stage (outputs are width * expansion)
    stage_widths: tuple = (16, 32, 64)
    # blocks per stage (resnet) or layers per dense block (densenet)
    stage_blocks: tuple = (4, 4, 4)
    expansion: int = 4
    growth: int = 12
    theta: float = 0.5
    dense_bottleneck: bool = False
    attention_placement: str = "per-stage"
    reduction: int | None = 4
    attention_depth: int = 2
    trunk_units: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(v) for v in self.stage_blocks))

    # -- serialization ---------------------------------------------------

    def to_text(self):
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed config line {raw!r}")
            values[key.strip()] = value.strip()
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values):
        """Build from a mapping of field name -> string; unknown keys are errors."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _parse_value(types[key].default, value, key)
        return cls(**kwargs)

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- validation ------------------------------------------------------

    @property
    def has_attention(self):
        if self.family == "ran_resnet":
            return True
        return self.family == "rcan_densenet" and self.reduction is not None

    def num_downsamplings(self):
        # stem stride 2 + max-pool + one per stage after the first
        return 2 + len(self.stage_blocks) - 1

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.num_classes < 2:
            raise ConfigError("class count must be >= 2")
        if not self.stage_blocks:
            raise ConfigError("at least one stage is required")
        if self.input_size < 2 ** self.num_downsamplings():
            raise ConfigError(f"input resolution {self.input_size} too small for "
                              f"{self.num_downsamplings()} downsampling stages")
        if self.attention_placement not in PLACEMENTS:
            raise ConfigError(f"attention_placement must be one of {PLACEMENTS}")
        if self.family in ("resnet", "ran_resnet"):
            if len(self.stage_widths) != len(self.stage_blocks):
                raise ConfigError("stage_widths and stage_blocks must have equal length")
            if any(b < 1 for b in self.stage_blocks):
                raise ConfigError("every resnet stage needs at least one block")
        if self.family == "ran_resnet":
            for i, width in enumerate(self.stage_widths):
                out = width * self.expansion
                if out % 4:
                    raise ConfigError(f"stage {i} width {out} must be divisible by 4 for attention units")
                side = self.input_size // 2 ** (2 + i)
                if side < 2 ** self.attention_depth:
                    raise ConfigError(f"stage {i} resolution {side} too small for attention depth "
                                      f"{self.attention_depth}")
        if self.family == "rcan_densenet" and self.reduction is not None:
            for i, c in enumerate(dense_block_channels(self)):
                if self.reduction >= c or c % self.reduction:
                    raise ConfigError(f"reduction ratio {self.reduction} does not divide dense block {i} "
                                      f"width {c}")
        return self


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(default, text, key):
    try:
        if text.lower() == "none":
            return None
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, float):
            return float(text)
        if isinstance(default, int) or default is None:
            return int(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}") from None


def dense_block_channels(config):
    """Output channel count of every dense block for a densenet-family config."""
    c = config.stem_channels
    out = []
    for i, layers in enumerate(config.stage_blocks):
        c = c + layers * config.growth
        out.append(c)
        if i < len(config.stage_blocks) - 1:
            c = int(np.floor(config.theta * c))
    return out


# -- presets ----------------------------------------------------------------

def mini_config(family, **overrides):
    """Desk-scale defaults (3 stages, ~0.1-1M parameters, 96x96 input)."""
    if family in ("resnet", "ran_resnet"):
        base = dict(stem_channels=16, stage_widths=(16, 32, 64), stage_blocks=(2, 2, 2), reduction=None)
    elif family in ("densenet", "rcan_densenet"):
        base = dict(stem_channels=32, stage_blocks=(4, 4, 4), growth=12, theta=0.5,
                    reduction=4 if family == "rcan_densenet" else None)
    else:
        raise ConfigError(f"unknown family {family!r}")
    base.update(overrides)
    return ModelConfig(family=family, **base)


def full_config(family, **overrides):
    """ResNet-50 / DenseNet-121 scale configs."""
    if family in ("resnet", "ran_resnet"):
        base = dict(stem_channels=64, stem_kernel=7, stage_widths=(64, 128, 256, 512),
                    stage_blocks=(3, 4, 6, 3), reduction=None, input_size=224)
    elif family in ("densenet", "rcan_densenet"):
        base = dict(stem_channels=64, stem_kernel=7, stage_blocks=(6, 12, 24, 16), growth=32,
                    dense_bottleneck=True, theta=0.5, input_size=224,
                    reduction=16 if family == "rcan_densenet" else None)
    else:
        raise ConfigError(f"unknown family {family!r}")
    base.update(overrides)
    return ModelConfig(family=family, **base)


# -- network ----------------------------------------------------------------

class Network(Module):
    """A classifier built from a :class:`ModelConfig`."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        c = config.stem_channels
        self.stem = Sequential(Conv2d(config.in_channels, c, config.stem_kernel, stride=2),
                               BatchNorm2d(c), ReLU())
        if config.family in ("resnet", "ran_resnet"):
            self.features, c = _resnet_features(config, c)
        else:
            self.features, c = _densenet_features(config, c)
        self.feature_channels = c
        self.classifier = Linear(c, config.num_classes)

    @property
    def input_shape(self):
        return (self.config.in_channels, self.config.input_size, self.config.input_size)

    def logits(self, x):
        """Pre-softmax class scores, shape (B, num_classes)."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input of shape (B, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")
        h = F.maxpool2d(self.stem(x), 2)
        h = self.features(h)
        h = F.reshape(F.global_avg_pool(h), (h.shape[0], h.shape[1]))
        return self.classifier(h)

    def forward(self, x):
        return F.softmax(self.logits(x), axis=1)

    def attention_blocks(self):
        return [m for _, m in self.named_modules()
                if isinstance(m, (ChannelAttentionBlock, AttentionModule))]


def _resnet_features(config, c):
    layers = []
    for i, (width, blocks) in enumerate(zip(config.stage_widths, config.stage_blocks)):
        out = width * config.expansion
        for j in range(blocks):
            stride = 2 if (i > 0 and j == 0) else 1
            layers.append((f"stage{i + 1}_block{j + 1}", ResidualBottleneckBlock(c, width, out, stride)))
            c = out
            if config.family == "ran_resnet" and config.attention_placement == "per-block":
                layers.append((f"stage{i + 1}_attn{j + 1}",
                               AttentionModule(c, config.attention_depth, config.trunk_units)))
        if config.family == "ran_resnet" and config.attention_placement == "per-stage":
            layers.append((f"stage{i + 1}_attn", AttentionModule(c, config.attention_depth, config.trunk_units)))
    return NamedSequential(layers), c


def _densenet_features(config, c):
    layers = []
    n = len(config.stage_blocks)
    for i, num_layers in enumerate(config.stage_blocks):
        block = DenseBlock(c, num_layers, config.growth, config.dense_bottleneck)
        layers.append((f"dense{i + 1}", block))
        c = block.out_channels
        if config.family == "rcan_densenet" and config.reduction is not None:
            layers.append((f"attn{i + 1}", ChannelAttentionBlock(c, config.reduction)))
        if i < n - 1:
            trans = TransitionLayer(c, config.theta)
            layers.append((f"trans{i + 1}", trans))
            c = trans.out_channels
    layers.append(("final_bn", BatchNorm2d(c)))
    layers.append(("final_relu", ReLU()))
    return NamedSequential(layers), c


def build_model(config, dtype=DEFAULT_DTYPE):
    """Construct and deterministically initialize a network for ``config``.

    Convolutions get He fan-in normal weights, biases zero, batch-norm scale
    one and shift zero. Each parameter's draw is keyed on (seed, path).
    """
    model = Network(config)
    model.init_parameters(config.seed)
    if np.dtype(dtype) != np.dtype(DEFAULT_DTYPE):
        model.astype(dtype)
    return model


def set_attention_override(model, value):
    """Pin every attention gate (channel weights s or mask M) to ``value``; None restores."""
    for m in model.attention_blocks():
        if isinstance(m, ChannelAttentionBlock):
            m.scale_override = value
        else:
            m.mask_override = value
