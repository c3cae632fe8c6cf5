"""Composite blocks: residual bottlenecks, dense blocks, channel attention,
residual channel attention (RCAB / residual groups) and the trunk/mask
residual attention module.
"""
import numpy as np

from cellattn import functional as F
from cellattn.nn import BatchNorm2d, Conv2d, Linear, Module, Sequential
from cellattn.tensor import ShapeError


class ResidualBottleneckBlock(Module):
    """1x1 reduce -> 3x3 -> 1x1 expand, each with batch-norm, plus a shortcut.

    A projection shortcut (strided 1x1 conv + BN) is inserted exactly when the
    channel count or stride changes.
    """

    def __init__(self, in_channels, mid_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = Conv2d(in_channels, mid_channels, 1)
        self.bn1 = BatchNorm2d(mid_channels)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, stride=stride)
        self.bn2 = BatchNorm2d(mid_channels)
        self.conv3 = Conv2d(mid_channels, out_channels, 1)
        self.bn3 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(Conv2d(in_channels, out_channels, 1, stride=stride, padding=0),
                                       BatchNorm2d(out_channels))
        else:
            self.shortcut = None

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + skip)


class PreActBottleneck(Module):
    """Pre-activation residual unit (BN-ReLU-conv x3) with an identity skip."""

    def __init__(self, channels):
        super().__init__()
        if channels % 4:
            raise ValueError(f"pre-activation unit needs channels divisible by 4, got {channels}")
        mid = channels // 4
        self.bn1 = BatchNorm2d(channels)
        self.conv1 = Conv2d(channels, mid, 1)
        self.bn2 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3)
        self.bn3 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, channels, 1)

    def forward(self, x):
        h = self.conv1(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(h)))
        h = self.conv3(F.relu(self.bn3(h)))
        return x + h


class DenseLayer(Module):
    """BN-ReLU-conv3x3 producing ``growth`` channels, optionally behind a
    BN-ReLU-conv1x1 bottleneck of width 4*growth."""

    def __init__(self, in_channels, growth, bottleneck=False):
        super().__init__()
        if bottleneck:
            self.bn0 = BatchNorm2d(in_channels)
            self.conv0 = Conv2d(in_channels, 4 * growth, 1)
            in_channels = 4 * growth
        self.bottleneck = bottleneck
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, growth, 3)

    def forward(self, x):
        if self.bottleneck:
            x = self.conv0(F.relu(self.bn0(x)))
        return self.conv(F.relu(self.bn(x)))


class DenseBlock(Module):
    """``num_layers`` dense layers; each sees the concatenation of everything before it.

    Output channels = in_channels + num_layers * growth.
    """

    def __init__(self, in_channels, num_layers, growth, bottleneck=False):
        super().__init__()
        self.in_channels = in_channels
        self.num_layers = num_layers
        self.growth = growth
        self.layers = Sequential(*[DenseLayer(in_channels + i * growth, growth, bottleneck)
                                   for i in range(num_layers)])

    @property
    def out_channels(self):
        return self.in_channels + self.num_layers * self.growth

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"dense block expects {self.in_channels} channels, got {x.shape[1]}")
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else F.concat_channels(feats)
            feats.append(layer(inp))
        return feats[0] if len(feats) == 1 else F.concat_channels(feats)


class TransitionLayer(Module):
    """BN-ReLU-conv1x1 compressing channels by ``theta``, then 2x2 average pooling."""

    def __init__(self, in_channels, theta=0.5):
        super().__init__()
        if not 0 < theta <= 1:
            raise ValueError("compression factor must lie in (0, 1]")
        self.out_channels = int(np.floor(theta * in_channels))
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, self.out_channels, 1)

    def forward(self, x):
        return F.avgpool2d(self.conv(F.relu(self.bn(x))), 2)


class ChannelAttentionBlock(Module):
    """Squeeze (global average pool) -> C/r -> ReLU -> C -> sigmoid, then rescale.

    The two projections act on the pooled vector, which is the same as 1x1
    convolutions on a 1x1 map. ``scale_override`` replaces the learned
    per-channel weights with a constant; it exists for tests and ablations.
    """

    def __init__(self, channels, reduction=16):
        super().__init__()
        if reduction < 1:
            raise ValueError("reduction ratio must be a positive integer")
        if reduction >= channels:
            raise ValueError(f"reduction ratio {reduction} must be smaller than channel count {channels}")
        if channels % reduction:
            raise ValueError(f"reduction ratio {reduction} does not divide channel count {channels}")
        self.channels = channels
        self.reduction = reduction
        self.down = Linear(channels, channels // reduction)
        self.up = Linear(channels // reduction, channels)
        self.scale_override = None

    def weights(self, x):
        """Per-channel attention weights s, shape (B, C)."""
        b, c = x.shape[:2]
        pooled = F.reshape(F.global_avg_pool(x), (b, c))
        return F.sigmoid(self.up(F.relu(self.down(pooled))))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"channel attention expects {self.channels} channels, got {x.shape[1]}")
        if self.scale_override is not None:
            return F.mul(x, float(self.scale_override))
        s = self.weights(x)
        return F.mul(x, F.reshape(s, (x.shape[0], x.shape[1], 1, 1)))


class RCAB(Module):
    """Residual channel attention block: x + CA(conv(relu(conv(x))))."""

    def __init__(self, channels, reduction=16, kernel_size=3):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, kernel_size, bias=True)
        self.conv2 = Conv2d(channels, channels, kernel_size, bias=True)
        self.ca = ChannelAttentionBlock(channels, reduction)
        self.linear_probe = False  # test hook: drop the ReLU

    def residual(self, x):
        h = self.conv1(x)
        if not self.linear_probe:
            h = F.relu(h)
        return self.conv2(h)

    def forward(self, x):
        return x + self.ca(self.residual(x))


class ResidualGroup(Module):
    """``num_blocks`` RCABs and a closing conv, wrapped in a group-level skip."""

    def __init__(self, channels, num_blocks, reduction=16):
        super().__init__()
        self.blocks = Sequential(*[RCAB(channels, reduction) for _ in range(num_blocks)])
        self.conv = Conv2d(channels, channels, 3, bias=True)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


class AttentionModule(Module):
    """Residual attention: output = (1 + M(x)) * T(x).

    T is a stack of pre-activation residual units. M is an hourglass: ``depth``
    max-pool downsamplings each followed by a residual unit, bilinear
    upsampling back with additive skip links, then BN-ReLU-1x1 conv and a
    sigmoid. ``mask_override`` pins M to a constant (test hook).
    """

    def __init__(self, channels, depth=2, trunk_units=2):
        super().__init__()
        if depth < 1:
            raise ValueError("mask depth must be >= 1")
        self.channels = channels
        self.depth = depth
        self.trunk = Sequential(*[PreActBottleneck(channels) for _ in range(trunk_units)])
        self.down = Sequential(*[PreActBottleneck(channels) for _ in range(depth)])
        self.mask_bn = BatchNorm2d(channels)
        self.mask_conv = Conv2d(channels, channels, 1, bias=True)
        self.mask_override = None

    def mask(self, x):
        h, w = x.shape[2], x.shape[3]
        feats = []
        m = x
        for unit in self.down:
            m = unit(F.maxpool2d(m, 2))
            feats.append(m)
        for level in range(self.depth - 1, 0, -1):
            th, tw = feats[level - 1].shape[2:]
            m = F.bilinear_upsample(m, th, tw) + feats[level - 1]
        m = F.bilinear_upsample(m, h, w)
        return F.sigmoid(self.mask_conv(F.relu(self.mask_bn(m))))

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if min(h, w) < 2 ** self.depth:
            raise ShapeError(f"attention module of depth {self.depth} needs spatial extent >= "
                             f"{2 ** self.depth}, got {h}x{w}")
        t = self.trunk(x)
        if self.mask_override is not None:
            return F.mul(t, 1.0 + float(self.mask_override))
        m = self.mask(x)
        return F.mul(t, m + 1.0)
