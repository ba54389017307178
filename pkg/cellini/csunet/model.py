"""
The channel-squeeze U-structure 3D network: four encoder stages, a bottleneck,
four decoder stages fed by concatenated skips, and a 1×1×1 classification head.
"""
from dataclasses import dataclass
from typing      import Dict, List, Optional, Tuple

import numpy as np

from cellini.csunet        import ops
from cellini.csunet.base   import Block, Module, ParameterRegistry, blocks
from cellini.csunet.blocks import SEGate
from cellini.csunet.layers import Conv3d
from cellini.csunet.tensor import Tensor
from cellini.csunet.types  import BlockConfig, BlockVariant, Bottleneck, NetworkConfig, NetworkVariant
from cellini.csunet.utils  import ShapeError


@dataclass(frozen=True)
class StagePreset:
    """ which registered blocks compose a stage, and with which skip variant """
    parts: Tuple[str, ...]
    block_variant: BlockVariant


PRESETS: Dict[NetworkVariant, StagePreset] = {
    NetworkVariant.unet:     StagePreset(("cr",), BlockVariant.plain),
    NetworkVariant.resunet:  StagePreset(("cr",), BlockVariant.residual),
    NetworkVariant.base_u:   StagePreset(("sipu", "crsu"), BlockVariant.plain),
    NetworkVariant.base_res: StagePreset(("sipu", "crsu"), BlockVariant.residual),
    NetworkVariant.base_cr:  StagePreset(("sipu", "crsu"), BlockVariant.channel_residual),
}

BOTTLENECK_PARTS: Dict[Bottleneck, Tuple[str, ...]] = {
    Bottleneck.cr:     ("cr",),
    Bottleneck.ceu:    ("ceu",),
    Bottleneck.cr_ceu: ("cr", "ceu"),
}


class Stage(Module):
    """ a sequence of blocks applied in order """

    def __init__(self, parts: List[Tuple[str, Block]]):
        super().__init__()
        self.part_names = []
        for name, block in parts:
            self.add_module(name, block)
            self.part_names.append(name)

    def forward(self, x: Tensor) -> Tensor:
        for name in self.part_names:
            x = getattr(self, name)(x)
        return x


class CSUNet3D(Module):

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        preset = PRESETS[config.variant]
        channels = config.stage_channels

        in_channels = config.in_channels
        for i, out_channels in enumerate(channels):
            self.add_module(f"en{i + 1}", self._stage(preset.parts, preset.block_variant,
                                                      in_channels, out_channels, config.nested_depths[i], rng))
            in_channels = out_channels

        bottleneck_variant = preset.block_variant
        self.add_module("bottleneck", self._stage(BOTTLENECK_PARTS[config.resolved_bottleneck()],
                                                  bottleneck_variant, channels[-1], channels[-1], 1, rng))

        below = channels[-1]
        for i in range(3, -1, -1):
            self.add_module(f"de{i + 1}", self._stage(preset.parts, preset.block_variant,
                                                      channels[i] + below, channels[i], config.nested_depths[i], rng))
            below = channels[i]

        self.head = Conv3d(channels[0], config.num_classes, 1, rng)
        self.registry = ParameterRegistry.from_module(self)

    def _stage(self, parts, variant: BlockVariant, in_channels: int, out_channels: int,
               depth: int, rng: np.random.Generator) -> Stage:
        config = self.config
        built = []
        for kind in parts:
            mid = out_channels if kind in ("cr", "ceu") else max(1, out_channels // config.mid_divisor)
            block_config = BlockConfig(in_channels=in_channels, out_channels=out_channels, mid_channels=mid,
                                       norm_mode=config.norm_mode, se_reduction=config.se_reduction,
                                       nested_depth=depth, variant=variant, upsample_mode=config.upsample_mode)
            built.append((kind, blocks.get_block(kind)(block_config, rng)))
            in_channels = out_channels
        return Stage(built)

    def forward(self, x: Tensor, mode: str = "train", trace: Optional[List] = None) -> Tensor:
        """forward

        logits of shape (N, num_classes, E, E, E); softmax is left to the losses.
        `trace`, when given, receives a (stage name, output shape) pair per stage.
        """
        config = self.config
        extent = (config.input_extent,) * 3
        if x.ndim != 5 or x.shape[1] != config.in_channels or x.shape[2:] != extent:
            raise ShapeError(f"network expects input (N, {config.in_channels}, {extent[0]}, {extent[1]}, "
                             f"{extent[2]}), got {x.shape}")
        self.train(mode == "train")

        skips = []
        h = x
        for i in range(4):
            h = getattr(self, f"en{i + 1}")(h)
            skips.append(h)
            if trace is not None:
                trace.append((f"en{i + 1}", h.shape))
            h = ops.maxpool3d(h, 2)

        h = self.bottleneck(h)
        if trace is not None:
            trace.append(("bottleneck", h.shape))

        for i in range(3, -1, -1):
            h = ops.concat_channels(skips[i], ops.upsample3d(h, 2, config.upsample_mode))
            h = getattr(self, f"de{i + 1}")(h)
            if trace is not None:
                trace.append((f"de{i + 1}", h.shape))

        logits = self.head(h)
        if trace is not None:
            trace.append(("head", logits.shape))
        return logits

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return self.forward(x, mode=mode)

    def count_gates(self) -> int:
        return sum(isinstance(module, SEGate) for module in self.modules())

    def count_residuals(self) -> int:
        return sum(bool(getattr(module, "has_residual", False)) for module in self.modules())


def build(config: NetworkConfig) -> CSUNet3D:
    """build

    deterministic construction from `config.seed`: He-normal convolution and
    linear weights, zero biases, unit/zero normalisation affines.
    """
    return CSUNet3D(config)


def forward(net: CSUNet3D, x: Tensor, mode: str = "train") -> Tensor:
    return net.forward(x, mode=mode)


def parameter_count(net: Module) -> int:
    """ number of trainable scalars """
    return int(sum(parameter.size for parameter in net.parameters()))


@dataclass(frozen=True)
class StageShape:
    name: str
    input: Tuple[int, ...]
    output: Tuple[int, ...]


def summary(net: CSUNet3D, batch: int = 1) -> List[StageShape]:
    """summary

    per-stage (input, output) shapes derived from the configuration by the
    halving schedule and the concatenation arithmetic.
    """
    config = net.config
    channels, extents = config.stage_channels, config.stage_extents()

    def shape(c, e):
        return (batch, c, e, e, e)

    rows = []
    in_channels = config.in_channels
    for i in range(4):
        rows.append(StageShape(f"en{i + 1}", shape(in_channels, extents[i]), shape(channels[i], extents[i])))
        in_channels = channels[i]
    bottleneck = config.bottleneck_extent
    rows.append(StageShape("bottleneck", shape(channels[-1], bottleneck), shape(channels[-1], bottleneck)))
    below = channels[-1]
    for i in range(3, -1, -1):
        rows.append(StageShape(f"de{i + 1}", shape(channels[i] + below, extents[i]), shape(channels[i], extents[i])))
        below = channels[i]
    rows.append(StageShape("head", shape(channels[0], extents[0]), shape(config.num_classes, extents[0])))
    return rows
