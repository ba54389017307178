"""
Building blocks of the channel-squeeze U-structure network.

    CBR               conv3d(k=3) -> norm -> relu
    SEGate            squeeze-excitation channel recalibration
    ChannelResidual   gate(F(x)) + proj(x), F = two CBR layers
    SIPU              mini-U nested inside a stage
    CRSU              SIPU-style mini-U wrapped in a channel residual
    CEU               bottleneck mini-U with a gated skip path

Every block is built from a `BlockConfig` and a numpy random generator, which
makes initialisation deterministic in construction order.
"""
from typing import Optional

import numpy as np

from cellini.csunet        import ops
from cellini.csunet.base   import Block, Module
from cellini.csunet.layers import Conv3d, Linear, Norm3d
from cellini.csunet.tensor import Tensor
from cellini.csunet.types  import BlockConfig, BlockVariant
from cellini.csunet.utils  import AXIS_NAMES, ShapeError


def _rng(rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(0)


def _check_channels(x: Tensor, expected: int, block: str):
    if x.ndim != 5 or x.shape[1] != expected:
        raise ShapeError(f"{block} expects {expected} input channels, got shape {x.shape}")


class CBR(Block, kind="cbr"):

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        self.conv = Conv3d(config.in_channels, config.out_channels, 3, _rng(rng), padding=1)
        self.norm = Norm3d(config.out_channels, config.norm_mode)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.config.in_channels, "CBR")
        return ops.relu(self.norm(self.conv(x)))


class SEGate(Module):
    """SEGate

    g = sigmoid(fc2(relu(fc1(global_avg_pool(x))))), output = x scaled channel-wise by g.
    """

    def __init__(self, channels: int, reduction: int = 4, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = _rng(rng)
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def zero_(self):
        self.fc1.zero_()
        self.fc2.zero_()

    def gate(self, x: Tensor) -> Tensor:
        squeezed = ops.global_avg_pool(x)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(squeezed))))

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.gate(x))


class ResidualBlock(Block):
    """
    Shared skip logic of CR and CRSU: the branch output is recalibrated by a
    squeeze-excitation gate (channel_residual only) and added to the input,
    projected by a 1×1×1 conv when the channel counts differ. The plain variant
    returns the branch output alone.
    """

    def _build_skip(self, config: BlockConfig, rng: np.random.Generator):
        self.config = config
        self.variant = BlockVariant(config.variant)
        self.has_residual = self.variant != BlockVariant.plain
        self.gate = SEGate(config.out_channels, config.se_reduction, rng) \
            if self.variant == BlockVariant.channel_residual else None
        self.proj = Conv3d(config.in_channels, config.out_channels, 1, rng) \
            if self.has_residual and config.in_channels != config.out_channels else None

    def branch(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def shortcut(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.proj is not None else x

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.config.in_channels, type(self).__name__)
        out = self.branch(x)
        if self.gate is not None:
            out = self.gate(out)
        if not self.has_residual:
            return out
        return ops.add(out, self.shortcut(x))


class ChannelResidual(ResidualBlock, kind="cr"):

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = _rng(rng)
        self.first = CBR(config.with_channels(config.in_channels, config.mid_channels), rng)
        self.second = CBR(config.with_channels(config.mid_channels, config.out_channels), rng)
        self._build_skip(config, rng)

    @property
    def final_conv(self) -> Conv3d:
        return self.second.conv

    def branch(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class SIPU(Block, kind="sipu"):
    """SIPU

    conv_in (in→out), `nested_depth` levels of maxpool → CBR, then symmetric
    upsample → concat(level skip) → CBR back to the input resolution.
    """

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = _rng(rng)
        self.config = config
        depth, out, mid = config.nested_depth, config.out_channels, config.mid_channels
        self.conv_in = CBR(config.with_channels(config.in_channels, out), rng)
        for level in range(1, depth + 1):
            self.add_module(f"enc{level}", CBR(config.with_channels(out if level == 1 else mid, mid), rng))
        for level in range(depth, 0, -1):
            skip = out if level == 1 else mid
            self.add_module(f"dec{level}", CBR(config.with_channels(mid + skip, out if level == 1 else mid), rng))

    @property
    def final_conv(self) -> Conv3d:
        return self.dec1.conv

    def check_extent(self, x: Tensor):
        factor = 2 ** self.config.nested_depth
        for axis, name in enumerate(AXIS_NAMES):
            if x.shape[2 + axis] % factor:
                raise ShapeError(f"{type(self).__name__} with nested_depth {self.config.nested_depth} needs "
                                 f"{name} extent divisible by {factor}, got {x.shape[2 + axis]}")

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.config.in_channels, "SIPU")
        self.check_extent(x)
        h = self.conv_in(x)
        skips = [h]
        for level in range(1, self.config.nested_depth + 1):
            h = getattr(self, f"enc{level}")(ops.maxpool3d(h, 2))
            skips.append(h)
        for level in range(self.config.nested_depth, 0, -1):
            h = ops.upsample3d(h, 2, self.config.upsample_mode)
            h = getattr(self, f"dec{level}")(ops.concat_channels(h, skips[level - 1]))
        return h


class CRSU(ResidualBlock, kind="crsu"):

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = _rng(rng)
        self.u = SIPU(config, rng)
        self._build_skip(config, rng)

    @property
    def final_conv(self) -> Conv3d:
        return self.u.final_conv

    def branch(self, x: Tensor) -> Tensor:
        return self.u(x)


class CEU(Block, kind="ceu"):
    """CEU

    depth-1 mini-U whose skip path is recalibrated by a squeeze-excitation gate
    before concatenation, followed by an output CBR. Odd extents are pooled with
    floor and the upsampled branch is zero-padded back to the skip extent.
    """

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = _rng(rng)
        self.config = config
        self.skip_gate = SEGate(config.in_channels, config.se_reduction, rng)
        self.down = CBR(config.with_channels(config.in_channels, config.mid_channels), rng)
        self.out = CBR(config.with_channels(config.in_channels + config.mid_channels, config.out_channels), rng)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.config.in_channels, "CEU")
        for axis, name in enumerate(AXIS_NAMES):
            if x.shape[2 + axis] < 2:
                raise ShapeError(f"CEU needs {name} extent >= 2, got {x.shape[2 + axis]}")
        skip = self.skip_gate(x)
        u = self.down(ops.maxpool3d(x, 2))
        u = ops.pad_to(ops.upsample3d(u, 2, self.config.upsample_mode), x.shape[2:])
        return self.out(ops.concat_channels(skip, u))
