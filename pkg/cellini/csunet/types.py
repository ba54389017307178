"""
Configuration, record and report models.

All of them are pydantic models that reject unknown keys, so a configuration is
schema-validated before any work starts.
"""
from enum     import Enum
from typing   import Dict, List, Literal, Optional, Tuple, Union
from pydantic import BaseModel, ConfigDict, Field, computed_field, NonNegativeInt, PositiveInt, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NormMode(str, Enum):
    batch = "batch"
    instance = "instance"

class BlockVariant(str, Enum):
    plain = "plain"
    residual = "residual"
    channel_residual = "channel_residual"

class NetworkVariant(str, Enum):
    unet = "unet"
    resunet = "resunet"
    base_u = "base_u"
    base_res = "base_res"
    base_cr = "base_cr"

class UpsampleMode(str, Enum):
    nearest = "nearest"
    trilinear = "trilinear"

class Bottleneck(str, Enum):
    cr = "cr"
    ceu = "ceu"
    cr_ceu = "cr_ceu"

class Monitor(str, Enum):
    dsc = "dsc"
    loss = "loss"


class BlockConfig(StrictModel):
    in_channels: PositiveInt
    out_channels: PositiveInt
    mid_channels: Optional[PositiveInt] = None
    norm_mode: NormMode = NormMode.batch
    se_reduction: PositiveInt = 4
    nested_depth: PositiveInt = 1
    variant: BlockVariant = BlockVariant.channel_residual
    upsample_mode: UpsampleMode = UpsampleMode.trilinear

    @model_validator(mode="after")
    def check_mid_channels(self) -> "BlockConfig":
        if self.mid_channels is None:
            self.mid_channels = self.out_channels
        if self.mid_channels > self.out_channels:
            raise ValueError(f"mid_channels ({self.mid_channels}) must not exceed out_channels ({self.out_channels})")
        return self

    def gate_width(self, channels: Optional[int] = None) -> int:
        """ hidden width of the squeeze-excitation gate """
        return max(1, (channels or self.out_channels) // self.se_reduction)

    def with_channels(self, in_channels: int, out_channels: int, **update) -> "BlockConfig":
        mid = min(self.mid_channels, out_channels)
        return self.model_copy(update=dict(in_channels=in_channels, out_channels=out_channels,
                                           mid_channels=mid, **update))


class NetworkConfig(StrictModel):
    in_channels: PositiveInt = 1
    num_classes: int = Field(2, ge=2)
    stage_channels: List[PositiveInt] = Field(default_factory=lambda: [32, 64, 128, 256])
    input_extent: PositiveInt = 64
    variant: NetworkVariant = NetworkVariant.base_cr
    bottleneck: Optional[Bottleneck] = None
    nested_depths: List[PositiveInt] = Field(default_factory=lambda: [2, 2, 1, 1])
    mid_divisor: PositiveInt = 2
    se_reduction: PositiveInt = 4
    upsample_mode: UpsampleMode = UpsampleMode.trilinear
    norm_mode: NormMode = NormMode.batch
    seed: NonNegativeInt = 0

    @field_validator("stage_channels", "nested_depths")
    @classmethod
    def check_four_stages(cls, value: List[int]) -> List[int]:
        if len(value) != 4:
            raise ValueError(f"exactly 4 stages expected, got {len(value)}")
        return value

    @model_validator(mode="after")
    def check_extent(self) -> "NetworkConfig":
        if self.input_extent % 16:
            raise ValueError(f"input_extent must be divisible by 16, got {self.input_extent}")
        if self.resolved_bottleneck() != Bottleneck.cr and self.input_extent // 16 < 2:
            raise ValueError(f"bottleneck extent {self.input_extent // 16} < 2 cannot host a CEU; "
                             f"use input_extent >= 32 or bottleneck='cr'")
        for stage, depth in enumerate(self.nested_depths):
            extent = self.input_extent >> stage
            if extent % (2 ** depth):
                raise ValueError(f"stage {stage + 1} extent {extent} is not divisible by 2^{depth}")
        return self

    def resolved_bottleneck(self) -> Bottleneck:
        if self.bottleneck is not None:
            return self.bottleneck
        if self.variant in (NetworkVariant.unet, NetworkVariant.resunet):
            return Bottleneck.cr
        return Bottleneck.cr_ceu

    def stage_extents(self) -> List[int]:
        return [self.input_extent >> stage for stage in range(4)]

    @property
    def bottleneck_extent(self) -> int:
        return self.input_extent // 16


class LossConfig(StrictModel):
    epsilon: float = Field(1e-5, gt=0)
    ce_weight: float = Field(0.0, ge=0)
    class_count: int = Field(2, ge=2)


class SGDConfig(StrictModel):
    kind: Literal["sgd"] = "sgd"
    lr: float = Field(1e-2, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)

class AdamConfig(StrictModel):
    kind: Literal["adam"] = "adam"
    lr: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

OptimizerConfig = Union[SGDConfig, AdamConfig]


class AugmentConfig(StrictModel):
    flip_axis_h: bool = True
    flip_axis_w: bool = True


class TrainConfig(StrictModel):
    optimizer: OptimizerConfig = Field(default_factory=AdamConfig, discriminator="kind")
    batch_size: PositiveInt = 2
    max_epochs: PositiveInt = 100
    patience: PositiveInt = 10
    folds: int = Field(5, ge=2)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    monitor: Monitor = Monitor.dsc
    min_delta: float = Field(1e-6, ge=0)
    seed: NonNegativeInt = 0


class PhantomSpec(StrictModel):
    extent: PositiveInt
    nodule_radius_vox: float
    nodule_center: Optional[Tuple[float, float, float]] = None
    contrast: float = 0.8
    noise_sigma: float = Field(0.1, ge=0)
    seed: NonNegativeInt = 0

    @model_validator(mode="after")
    def check_radius(self) -> "PhantomSpec":
        if not 2 <= self.nodule_radius_vox <= self.extent / 4:
            raise ValueError(f"nodule_radius_vox must lie in [2, {self.extent / 4}], got {self.nodule_radius_vox}")
        return self


SOLID_CONTRAST = 0.8
GROUND_GLASS_CONTRAST = 0.25


class VolumeRecord(StrictModel):
    id: str
    image: str
    mask: str
    fold: Optional[NonNegativeInt] = None
    extent: Optional[PositiveInt] = None
    contrast: Optional[float] = None


class DatasetManifest(StrictModel):
    samples: List[VolumeRecord] = Field(default_factory=list)
    screening: str = ""

    def ids(self) -> List[str]:
        return [record.id for record in self.samples]


class RunConfig(StrictModel):
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    output_dir: Optional[str] = None
    min_dsc: Optional[float] = Field(None, ge=0, le=1)

    @model_validator(mode="after")
    def check_class_count(self) -> "RunConfig":
        if self.loss.class_count != self.network.num_classes:
            raise ValueError(f"loss.class_count ({self.loss.class_count}) must equal "
                             f"network.num_classes ({self.network.num_classes})")
        return self


class MetricReport(BaseModel):
    sen: float
    dsc: float
    pre: float
    miou: float


class ConfusionCounts(BaseModel):
    tp: NonNegativeInt = 0
    fp: NonNegativeInt = 0
    fn: NonNegativeInt = 0
    tn: NonNegativeInt = 0
    intersection: List[NonNegativeInt] = Field(default_factory=list)
    union: List[NonNegativeInt] = Field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if not self.intersection:
            return other.model_copy(deep=True)
        return ConfusionCounts(
            tp=self.tp + other.tp, fp=self.fp + other.fp, fn=self.fn + other.fn, tn=self.tn + other.tn,
            intersection=[a + b for a, b in zip(self.intersection, other.intersection)],
            union=[a + b for a, b in zip(self.union, other.union)],
        )


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    sen: float
    dsc: float
    pre: float
    miou: float
    improved: bool


class FoldResult(BaseModel):
    fold: int
    sen: float
    dsc: float
    pre: float
    miou: float
    best_epoch: int
    epochs: int
    val_ids: List[str]
    history: List[EpochRecord] = Field(default_factory=list)


class CrossValidationReport(BaseModel):
    folds: List[FoldResult]
    mean: MetricReport
    std: MetricReport
    config: Dict


class AblationRow(BaseModel):
    variant: NetworkVariant
    seed: int
    dsc: float


class AblationReport(BaseModel):
    rows: List[AblationRow]
    ordered_groups: int
    groups: int
    ordering_holds: bool


class GradCheckReport(BaseModel):
    name: str
    max_rel_err: float
    tol: float
    checked: int

    @computed_field
    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol
