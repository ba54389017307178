"""
Training protocol: flip augmentation, optimizer steps, early stopping on the
validation DSC and k-fold cross-validation.
"""
import logging
from dataclasses import dataclass, field
from typing      import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from cellini.csunet.data   import Sample
from cellini.csunet.losses import combined_loss, confusion_counts, metrics, predict_labels
from cellini.csunet.model  import CSUNet3D, build
from cellini.csunet.optim  import Optimizer, make_optimizer
from cellini.csunet.tensor import Tensor, backward, no_grad
from cellini.csunet.types  import (
    AblationReport, AblationRow, AugmentConfig, ConfusionCounts, CrossValidationReport, EpochRecord,
    FoldResult, LossConfig, MetricReport, Monitor, NetworkConfig, NetworkVariant, TrainConfig,
)
from cellini.csunet.utils  import NonFiniteError, TrainingDiverged

logger = logging.getLogger(__name__)

METRIC_KEYS = ("sen", "dsc", "pre", "miou")


def augment_flip(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                 config: AugmentConfig) -> Tuple[np.ndarray, np.ndarray]:
    """augment_flip

    flip the height axis ("upside down") and the width axis ("sideways"), each
    when enabled and with probability 0.5; image and mask share every draw.
    """
    if image.shape[-3:] != mask.shape[-3:]:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in spatial shape")
    for enabled, axis in ((config.flip_axis_h, -2), (config.flip_axis_w, -1)):
        if enabled and rng.random() < 0.5:
            image, mask = np.flip(image, axis=axis), np.flip(mask, axis=axis)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def kfold_split(sample_ids: Sequence[str], k: int, seed: int = 0) -> List[Tuple[List[str], List[str]]]:
    """kfold_split

    seeded shuffle followed by a contiguous partition into k validation folds
    whose sizes differ by at most one (the first n mod k folds are larger).
    """
    ids = list(sample_ids)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    splits = []
    for fold in np.array_split(np.arange(len(ids)), k):
        val = [shuffled[i] for i in fold]
        held = set(fold.tolist())
        train = [shuffled[i] for i in range(len(ids)) if i not in held]
        splits.append((train, val))
    return splits


@dataclass
class TrainState:
    optimizer: Optimizer
    rng: np.random.Generator
    epoch: int = 0
    best_val_metric: float = -np.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    history: List[EpochRecord] = field(default_factory=list)


def new_state(net: CSUNet3D, config: TrainConfig) -> TrainState:
    return TrainState(optimizer=make_optimizer(net.parameters(), config.optimizer),
                      rng=np.random.default_rng(config.seed))


def _stack(batch: Sequence[Tuple[np.ndarray, np.ndarray]], dtype) -> Tuple[Tensor, np.ndarray]:
    images = np.stack([image for image, _ in batch]).astype(dtype)
    labels = np.stack([mask.reshape(mask.shape[-3:]) for _, mask in batch]).astype(np.int64)
    return Tensor(images, dtype=dtype), labels


def train_step(net: CSUNet3D, batch: Sequence[Tuple[np.ndarray, np.ndarray]], config: TrainConfig,
               state: TrainState, loss_config: Optional[LossConfig] = None) -> float:
    """train_step

    forward in train mode, combined loss, backward, one optimizer update; the
    gradients are zeroed afterwards.
    """
    loss_config = loss_config or LossConfig(class_count=net.config.num_classes)
    images, labels = _stack(batch, net.head.weight.dtype)
    try:
        loss = combined_loss(net.forward(images, mode="train"), labels, loss_config)
    except NonFiniteError as e:
        raise TrainingDiverged(f"non-finite values at epoch {state.epoch}: {e}") from e
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at epoch {state.epoch}")
    backward(loss)
    state.optimizer.step()
    state.optimizer.zero_grad()
    logger.debug("epoch %d step loss %.6f", state.epoch, value)
    return value


@dataclass
class Evaluation:
    counts: ConfusionCounts
    report: MetricReport
    loss: float


def evaluate(net: CSUNet3D, samples: Sequence[Sample], loss_config: Optional[LossConfig] = None,
             batch_size: int = 2) -> Evaluation:
    """evaluate

    eval-mode forward over `samples`, confusion counts pooled over the whole set.
    """
    loss_config = loss_config or LossConfig(class_count=net.config.num_classes)
    counts, losses = ConfusionCounts(), []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, labels = _stack([(s.image, s.mask) for s in chunk], net.head.weight.dtype)
            logits = net.forward(images, mode="eval")
            losses.append(combined_loss(logits, labels, loss_config).item() * len(chunk))
            counts = counts + confusion_counts(predict_labels(logits), labels, net.config.num_classes)
    return Evaluation(counts, metrics(counts), float(np.sum(losses) / max(1, len(samples))))


@dataclass
class FitResult:
    best_state: Dict[str, np.ndarray]
    history: List[EpochRecord]
    best_epoch: int
    best_metric: float


def fit(net: CSUNet3D, train_set: Sequence[Sample], val_set: Sequence[Sample], config: TrainConfig,
        loss_config: Optional[LossConfig] = None) -> FitResult:
    """fit

    per epoch: shuffle, augment, train; validate in eval mode. A strict
    improvement (by more than `min_delta`) of the monitored quantity snapshots
    the parameters; training stops after `patience` epochs without one or at
    `max_epochs`. The best snapshot is loaded back into `net`.
    """
    if not train_set or not val_set:
        raise ValueError("fit needs non-empty training and validation sets")
    loss_config = loss_config or LossConfig(class_count=net.config.num_classes)
    state = new_state(net, config)
    best_state = net.state_dict()

    while state.epoch < config.max_epochs and state.epochs_since_improvement < config.patience:
        state.epoch += 1
        order = state.rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [augment_flip(train_set[i].image, train_set[i].mask, state.rng, config.augment)
                     for i in order[start:start + config.batch_size]]
            losses.append(train_step(net, batch, config, state, loss_config))

        result = evaluate(net, val_set, loss_config, config.batch_size)
        score = result.report.dsc if config.monitor == Monitor.dsc else -result.loss
        improved = score > state.best_val_metric + config.min_delta
        if improved:
            state.best_val_metric, state.best_epoch = score, state.epoch
            state.epochs_since_improvement = 0
            best_state = net.state_dict()
        else:
            state.epochs_since_improvement += 1

        state.history.append(EpochRecord(epoch=state.epoch, train_loss=float(np.mean(losses)),
                                         val_loss=result.loss, improved=improved,
                                         **result.report.model_dump()))
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_dsc=%.4f%s", state.epoch, np.mean(losses),
                    result.loss, result.report.dsc, " *" if improved else "")

    if state.epochs_since_improvement >= config.patience:
        logger.info("early stop at epoch %d, best epoch %d", state.epoch, state.best_epoch)
    net.load_state_dict(best_state)
    return FitResult(best_state, state.history, state.best_epoch, state.best_val_metric)


def _summarise(rows: Iterable[MetricReport]) -> Tuple[MetricReport, MetricReport]:
    table = np.array([[getattr(row, key) for key in METRIC_KEYS] for row in rows])
    mean, std = table.mean(axis=0), table.std(axis=0)
    return MetricReport(**dict(zip(METRIC_KEYS, mean.tolist()))), MetricReport(**dict(zip(METRIC_KEYS, std.tolist())))


def cross_validate(dataset: Sequence[Sample], net_config: NetworkConfig, train_config: TrainConfig,
                   loss_config: Optional[LossConfig] = None,
                   checkpoints: Optional[List[CSUNet3D]] = None) -> CrossValidationReport:
    """cross_validate

    a fresh seeded network per fold, trained with `fit` and scored on its
    validation fold with all four metrics; mean and population std over folds.
    Trained networks are appended to `checkpoints` when given.
    """
    loss_config = loss_config or LossConfig(class_count=net_config.num_classes)
    if len(dataset) < train_config.folds:
        raise ValueError(f"{len(dataset)} samples cannot fill {train_config.folds} folds")
    by_id = {sample.id: sample for sample in dataset}
    rows = []
    for fold, (train_ids, val_ids) in enumerate(kfold_split(list(by_id), train_config.folds, train_config.seed)):
        logger.info("fold %d/%d: %d train, %d val", fold + 1, train_config.folds, len(train_ids), len(val_ids))
        net = build(net_config)
        val_set = [by_id[i] for i in val_ids]
        result = fit(net, [by_id[i] for i in train_ids], val_set, train_config, loss_config)
        report = evaluate(net, val_set, loss_config, train_config.batch_size).report
        rows.append(FoldResult(fold=fold, best_epoch=result.best_epoch, epochs=len(result.history),
                               val_ids=val_ids, history=result.history, **report.model_dump()))
        if checkpoints is not None:
            checkpoints.append(net)

    mean, std = _summarise(MetricReport(**row.model_dump(include=set(METRIC_KEYS))) for row in rows)
    config = {"network": net_config.model_dump(mode="json"), "train": train_config.model_dump(mode="json"),
              "loss": loss_config.model_dump(mode="json")}
    return CrossValidationReport(folds=rows, mean=mean, std=std, config=config)


ABLATION_ORDER = (NetworkVariant.base_cr, NetworkVariant.base_res, NetworkVariant.base_u)


def ablate(dataset: Sequence[Sample], net_config: NetworkConfig, train_config: TrainConfig,
           loss_config: Optional[LossConfig] = None,
           variants: Sequence[NetworkVariant] = ABLATION_ORDER,
           seeds: Sequence[int] = (0, 1, 2)) -> AblationReport:
    """ablate

    cross-validated mean DSC per (variant, seed group). The expected ordering
    base_cr >= base_res >= base_u is recorded per group, never enforced.
    """
    rows = []
    for seed in seeds:
        for variant in variants:
            report = cross_validate(dataset, net_config.model_copy(update={"variant": variant, "seed": seed}),
                                    train_config.model_copy(update={"seed": seed}), loss_config)
            rows.append(AblationRow(variant=variant, seed=seed, dsc=report.mean.dsc))
            logger.info("ablation seed %d %s mean dsc %.4f", seed, variant.value, report.mean.dsc)

    ordered = 0
    for seed in seeds:
        scores = {row.variant: row.dsc for row in rows if row.seed == seed}
        ranked = [scores[v] for v in ABLATION_ORDER if v in scores]
        ordered += all(a >= b for a, b in zip(ranked, ranked[1:]))
    return AblationReport(rows=rows, ordered_groups=ordered, groups=len(seeds),
                          ordering_holds=ordered >= min(2, len(seeds)))
