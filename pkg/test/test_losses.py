import unittest

import numpy as np

from cellini.csunet.losses import (
    ce_loss, combined_loss, confusion_counts, dice_loss, foreground, metrics, one_hot, predict_labels,
)
from cellini.csunet.ops    import softmax_channels
from cellini.csunet.tensor import Tensor, tape
from cellini.csunet.types  import ConfusionCounts, LossConfig
from cellini.csunet.utils  import InvalidTarget, ShapeError, precision, set_precision


def reset_engine():
    tape.clear()
    set_precision("float32")


class TestCrossEntropy(unittest.TestCase):

    def setUp(self):
        reset_engine()

    def test_confident_correct_prediction(self):
        labels = np.random.default_rng(0).integers(0, 2, size=(1, 3, 3, 3))
        target = one_hot(labels, 2)
        with precision("float64"):
            loss = ce_loss(Tensor(target * 60.0 - 30.0), target, LossConfig())
        self.assertLessEqual(loss.item(), 1e-11)

    def test_uniform_prediction(self):
        target = one_hot(np.zeros((1, 2, 2, 2), dtype=int), 2)
        with precision("float64"):
            loss = ce_loss(Tensor(np.zeros((1, 2, 2, 2, 2))), target, LossConfig())
        self.assertAlmostEqual(loss.item(), np.log(2), places=6)

    def test_direct_formula(self):
        rng = np.random.default_rng(1)
        logits, labels = rng.normal(size=(2, 3, 2, 3, 2)), rng.integers(0, 3, size=(2, 2, 3, 2))
        with precision("float64"):
            loss = ce_loss(Tensor(logits), one_hot(labels, 3), LossConfig(class_count=3)).item()
        total = 0.0
        for n, d, h, w in np.ndindex(labels.shape):
            z = logits[n, :, d, h, w]
            total -= np.log(np.exp(z[labels[n, d, h, w]]) / np.exp(z).sum())
        self.assertAlmostEqual(loss, total / labels.size, delta=1e-6)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=(1, 2, 2, 2))
        target = one_hot(labels, 2)
        with precision("float64"):
            logits = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
            ce_loss(logits, target, LossConfig()).backward()
            expected = (softmax_channels(logits.detach()).data - target) / labels.size
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)

    def test_target_must_be_one_hot(self):
        with self.assertRaises(InvalidTarget):
            ce_loss(Tensor(np.zeros((1, 2, 1, 1, 2))), np.ones((1, 2, 1, 1, 2)), LossConfig())


class TestDice(unittest.TestCase):

    def setUp(self):
        reset_engine()

    def test_identical_binary(self):
        y = np.random.default_rng(0).integers(0, 2, size=(2, 4, 4, 4)).astype(np.float64)
        with precision("float64"):
            self.assertEqual(dice_loss(Tensor(y), y, LossConfig()).item(), 0.0)

    def test_disjoint(self):
        y, p = np.zeros((1, 4, 4, 4)), np.zeros((1, 4, 4, 4))
        y[0, :2].reshape(-1)[:] = 1
        p[0, 2:].reshape(-1)[:] = 1
        with precision("float64"):
            self.assertAlmostEqual(dice_loss(Tensor(p), y, LossConfig()).item(), 1.0, delta=1e-4)

    def test_half_overlap(self):
        y, p = np.zeros(8), np.zeros(8)
        y[[0, 1, 2, 3]] = 1
        p[[2, 3, 4, 5]] = 1
        with precision("float64"):
            loss = dice_loss(Tensor(p.reshape(1, 2, 2, 2)), y.reshape(1, 2, 2, 2), LossConfig()).item()
        self.assertAlmostEqual(loss, 1 - (4 + 1e-5) / (8 + 1e-5), places=12)
        self.assertAlmostEqual(loss, 0.5, places=5)

    def test_adding_correct_voxel_never_increases(self):
        target = np.array([1, 1, 0, 1, 0, 0, 1, 0], dtype=np.float64).reshape(1, 2, 2, 2)
        with precision("float64"):
            for bits in range(256):
                p = np.array([(bits >> i) & 1 for i in range(8)], dtype=np.float64).reshape(1, 2, 2, 2)
                before = dice_loss(Tensor(p), target, LossConfig()).item()
                for voxel in np.flatnonzero((target.reshape(-1) == 1) & (p.reshape(-1) == 0)):
                    q = p.copy().reshape(-1)
                    q[voxel] = 1
                    after = dice_loss(Tensor(q.reshape(p.shape)), target, LossConfig()).item()
                    self.assertLessEqual(after, before + 1e-12)

    def test_hard_dsc_agrees(self):
        rng = np.random.default_rng(3)
        pred, target = rng.integers(0, 2, size=(1, 8, 8, 8)), rng.integers(0, 2, size=(1, 8, 8, 8))
        with precision("float64"):
            loss = dice_loss(Tensor(pred.astype(float)), target.astype(float), LossConfig()).item()
        dsc = metrics(confusion_counts(pred, target)).dsc
        self.assertAlmostEqual(dsc, 1 - loss, delta=1e-3)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 2, 3)), LossConfig())


class TestCombined(unittest.TestCase):

    def setUp(self):
        reset_engine()

    def test_dice_only_by_default(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(size=(2, 2, 3, 3, 3)), rng.integers(0, 2, size=(2, 3, 3, 3))
        with precision("float64"):
            combined = combined_loss(Tensor(logits), labels, LossConfig()).item()
            dice = dice_loss(foreground(softmax_channels(Tensor(logits))), (labels > 0).astype(float),
                             LossConfig()).item()
        self.assertEqual(combined, dice)

    def test_perfect_prediction(self):
        labels = np.random.default_rng(1).integers(0, 2, size=(1, 3, 3, 3))
        with precision("float64"):
            loss = combined_loss(Tensor(one_hot(labels, 2) * 60.0 - 30.0), labels, LossConfig(ce_weight=1.0))
        self.assertLess(loss.item(), 1e-6)

    def test_component_sum(self):
        rng = np.random.default_rng(2)
        logits, labels = rng.normal(size=(2, 2, 3, 3, 3)), rng.integers(0, 2, size=(2, 3, 3, 3))
        config = LossConfig(ce_weight=0.5)
        with precision("float64"):
            combined = combined_loss(Tensor(logits), labels, config).item()
            dice = dice_loss(foreground(softmax_channels(Tensor(logits))), (labels > 0).astype(float), config).item()
            ce = ce_loss(Tensor(logits), one_hot(labels, 2), config).item()
        self.assertAlmostEqual(combined, dice + 0.5 * ce, places=12)

    def test_mask_channel_axis_accepted(self):
        labels = np.random.default_rng(3).integers(0, 2, size=(1, 1, 2, 2, 2)).astype(np.uint8)
        loss = combined_loss(Tensor(np.zeros((1, 2, 2, 2, 2))), labels, LossConfig())
        self.assertTrue(np.isfinite(loss.item()))

    def test_labels_out_of_range(self):
        with self.assertRaises(InvalidTarget):
            combined_loss(Tensor(np.zeros((1, 2, 1, 1, 1))), np.full((1, 1, 1, 1), 2), LossConfig(ce_weight=1.0))


def voxel_loop_counts(pred, target):
    tp = fp = fn = tn = 0
    inter, union = [0, 0], [0, 0]
    for p, t in zip(pred.reshape(-1), target.reshape(-1)):
        tp += bool(p and t)
        fp += bool(p and not t)
        fn += bool(t and not p)
        tn += bool(not p and not t)
        for c in (0, 1):
            inter[c] += (p == c) and (t == c)
            union[c] += (p == c) or (t == c)
    return tp, fp, fn, tn, inter, union


class TestMetrics(unittest.TestCase):

    def test_identical_and_inverted(self):
        target = np.random.default_rng(0).integers(0, 2, size=(4, 4, 4))
        same = confusion_counts(target, target)
        self.assertEqual((same.fp, same.fn), (0, 0))
        inverted = confusion_counts(1 - target, target)
        self.assertEqual((inverted.tp, inverted.tn), (0, 0))
        self.assertEqual(metrics(same).model_dump(), {"sen": 1.0, "dsc": 1.0, "pre": 1.0, "miou": 1.0})

    def test_enumerated_table(self):
        pred, target = np.zeros(64, dtype=int), np.zeros(64, dtype=int)
        pred[[0, 1, 2, 3]] = 1
        target[[0, 1, 4, 5]] = 1
        counts = confusion_counts(pred.reshape(4, 4, 4), target.reshape(4, 4, 4))
        self.assertEqual((counts.tp, counts.fp, counts.fn, counts.tn), (2, 2, 2, 58))
        self.assertEqual(counts.total, 64)
        report = metrics(counts)
        self.assertEqual(report.sen, 0.5)
        self.assertEqual(report.pre, 0.5)
        self.assertEqual(report.dsc, 0.5)
        self.assertAlmostEqual(report.miou, (2 / 6 + 58 / 62) / 2, places=12)
        self.assertAlmostEqual(report.miou, 0.6344, places=4)

    def test_random_pairs_match_voxel_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            shape = tuple(int(e) for e in rng.integers(1, 5, size=3))
            pred, target = rng.integers(0, 2, size=shape), rng.integers(0, 2, size=shape)
            tp, fp, fn, tn, inter, union = voxel_loop_counts(pred, target)
            counts = confusion_counts(pred, target)
            self.assertEqual((counts.tp, counts.fp, counts.fn, counts.tn), (tp, fp, fn, tn))
            self.assertEqual((counts.intersection, counts.union), (inter, union))

            report = metrics(counts)
            sen = tp / (tp + fn) if tp + fn else float(tp + fp + fn == 0)
            pre = tp / (tp + fp) if tp + fp else float(tp + fp + fn == 0)
            dsc = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
            ious = [i / u if u else 1.0 for i, u in zip(inter, union)]
            self.assertEqual((report.sen, report.pre, report.dsc), (sen, pre, dsc))
            self.assertEqual(report.miou, float(np.mean(ious)))

    def test_empty_foreground(self):
        report = metrics(confusion_counts(np.zeros((2, 2, 2), dtype=int), np.zeros((2, 2, 2), dtype=int)))
        self.assertEqual(report.model_dump(), {"sen": 1.0, "dsc": 1.0, "pre": 1.0, "miou": 1.0})
        missed = metrics(confusion_counts(np.zeros((2, 2, 2), dtype=int), np.ones((2, 2, 2), dtype=int)))
        self.assertEqual((missed.sen, missed.pre, missed.dsc), (0.0, 0.0, 0.0))

    def test_pooled_counts(self):
        a = confusion_counts(np.array([1, 0]), np.array([1, 1]))
        b = confusion_counts(np.array([1, 1]), np.array([0, 1]))
        pooled = ConfusionCounts() + a + b
        self.assertEqual((pooled.tp, pooled.fp, pooled.fn, pooled.tn), (2, 1, 1, 0))
        self.assertEqual(metrics(pooled).dsc, 4 / 6)

    def test_argmax_ties_to_lower_class(self):
        self.assertEqual(predict_labels(np.zeros((1, 2, 1, 1, 1))).item(), 0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
