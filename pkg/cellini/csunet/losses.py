"""
Segmentation losses (soft Dice, cross entropy) and the evaluation metrics
SEN, DSC, PRE and mIoU.
"""
from typing import Union

import numpy as np

from cellini.csunet.ops    import softmax_channels
from cellini.csunet.tensor import Tensor
from cellini.csunet.types  import ConfusionCounts, LossConfig, MetricReport
from cellini.csunet.utils  import InvalidTarget, ShapeError

PROBABILITY_FLOOR = 1e-12


def _array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    """ (N,D,H,W) integer labels -> (N,C,D,H,W) one-hot """
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= class_count:
        raise InvalidTarget(f"labels must lie in [0, {class_count - 1}]")
    encoded = np.eye(class_count)[labels.astype(np.int64)]
    return np.moveaxis(encoded, -1, 1)


def as_labels(target: Union[Tensor, np.ndarray]) -> np.ndarray:
    """ accept (N,D,H,W) labels or an (N,1,D,H,W) mask """
    target = _array(target)
    if target.ndim == 5:
        if target.shape[1] != 1:
            raise ShapeError(f"label volume must have a single channel, got shape {target.shape}")
        target = target[:, 0]
    return np.rint(target).astype(np.int64)


def foreground(probabilities: Tensor) -> Tensor:
    """ foreground probability: sum of channels 1..C-1 """
    return probabilities[:, 1:].sum(axis=1)


def ce_loss(logits: Tensor, target_onehot: Union[Tensor, np.ndarray], config: LossConfig) -> Tensor:
    """ce_loss

    mean over voxels of −Σ_c y_{p,c}·log y′_{p,c}, with y′ = softmax(logits)
    clamped to [1e-12, 1].
    """
    target = _array(target_onehot)
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if not (np.isin(target, (0, 1)).all() and np.all(target.sum(axis=1) == 1)):
        raise InvalidTarget("ce_loss target must be one-hot over the channel axis")
    voxels = target.size // target.shape[1]
    probabilities = softmax_channels(logits).clip(PROBABILITY_FLOOR, 1.0)
    return -(Tensor(target, dtype=logits.dtype) * probabilities.log()).sum() * (1.0 / voxels)


def dice_loss(probs_fg: Tensor, target_fg: Union[Tensor, np.ndarray], config: LossConfig) -> Tensor:
    """dice_loss

    1 − (2 Σ y′y + ε) / (Σ (y′ + y) + ε), one ratio over every voxel of the batch.
    """
    target = _array(target_fg)
    if target.shape != probs_fg.shape:
        raise ShapeError(f"target shape {target.shape} does not match probabilities {probs_fg.shape}")
    y = Tensor(target, dtype=probs_fg.dtype)
    eps = config.epsilon
    intersection = (probs_fg * y).sum()
    total = probs_fg.sum() + float(target.sum())
    return 1.0 - (2.0 * intersection + eps) / (total + eps)


def combined_loss(logits: Tensor, target: Union[Tensor, np.ndarray], config: LossConfig) -> Tensor:
    """combined_loss

    dice_loss + λ·ce_loss on integer label targets; λ = `config.ce_weight`.
    """
    labels = as_labels(target)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target shape {labels.shape} does not match logits {logits.shape}")
    loss = dice_loss(foreground(softmax_channels(logits)), (labels > 0).astype(np.float64), config)
    if config.ce_weight > 0:
        loss = loss + config.ce_weight * ce_loss(logits, one_hot(labels, logits.shape[1]), config)
    return loss


def predict_labels(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """ argmax over the class axis, ties resolved to the lower class index """
    return np.argmax(_array(logits), axis=1)


def confusion_counts(pred_labels: np.ndarray, target_labels: np.ndarray, class_count: int = 2) -> ConfusionCounts:
    """confusion_counts

    foreground = any non-zero label; intersection / union are tallied per class.
    """
    pred, target = np.asarray(pred_labels), np.asarray(target_labels)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {target.shape}")
    pred_fg, target_fg = pred != 0, target != 0
    intersection, union = [], []
    for c in range(class_count):
        p, t = pred == c, target == c
        intersection.append(int(np.count_nonzero(p & t)))
        union.append(int(np.count_nonzero(p | t)))
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred_fg & target_fg)),
        fp=int(np.count_nonzero(pred_fg & ~target_fg)),
        fn=int(np.count_nonzero(~pred_fg & target_fg)),
        tn=int(np.count_nonzero(~pred_fg & ~target_fg)),
        intersection=intersection,
        union=union,
    )


def _ratio(numerator: int, denominator: int, absent_in_both: bool) -> float:
    if denominator == 0:
        return 1.0 if absent_in_both else 0.0
    return numerator / denominator


def metrics(counts: ConfusionCounts) -> MetricReport:
    """metrics

    SEN = TP/(TP+FN), PRE = TP/(TP+FP), DSC = 2TP/(2TP+FP+FN), mIoU = mean of
    per-class I/U. An empty denominator yields 1 when the class is absent from
    both prediction and target, else 0.
    """
    no_foreground = counts.tp + counts.fp + counts.fn == 0
    ious = [_ratio(i, u, u == 0) for i, u in zip(counts.intersection, counts.union)]
    return MetricReport(
        sen=_ratio(counts.tp, counts.tp + counts.fn, no_foreground),
        dsc=_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, no_foreground),
        pre=_ratio(counts.tp, counts.tp + counts.fp, no_foreground),
        miou=float(np.mean(ious)) if ious else 0.0,
    )
