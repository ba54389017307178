import unittest

import numpy as np

from cellini.csunet.ops    import relu
from cellini.csunet.tensor import Parameter, Tensor, backward, no_grad, tape
from cellini.csunet.utils  import (
    NonFiniteError, TapeConsumedError, TapeError, get_precision, precision, set_precision,
)


def reset_engine():
    tape.clear()
    set_precision("float32")


class TestTensor(unittest.TestCase):

    def setUp(self):
        reset_engine()

    def test_default_precision_is_float32(self):
        self.assertEqual(Tensor([1, 2, 3]).dtype, np.float32)
        with precision("float64"):
            self.assertEqual(Tensor([1, 2, 3]).dtype, np.float64)
        self.assertEqual(get_precision(), np.float32)

    def test_unknown_precision(self):
        with self.assertRaises(ValueError):
            set_precision("float16")

    def test_row_major_layout(self):
        x = Tensor(np.arange(24).reshape(2, 3, 4))
        self.assertTrue(x.data.flags["C_CONTIGUOUS"])
        self.assertEqual(x.size, 24)
        self.assertEqual(x.data.reshape(-1)[5], 5)

    def test_non_finite_result_is_an_error(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with np.errstate(divide="ignore"):
            with self.assertRaises(NonFiniteError):
                x.log()


class TestBackward(unittest.TestCase):

    def setUp(self):
        reset_engine()

    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_relu_gives_indicator(self):
        x = Tensor(np.array([[[[[-1.0, 0.0, 2.0, -3.0, 4.0]]]]]), requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad.reshape(-1), [0, 0, 1, 0, 1])

    def test_product_rule(self):
        with precision("float64"):
            x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
            backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_broadcast_is_unbroadcast(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        backward((x * b + b).sum())
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_two_uses_accumulate(self):
        rng = np.random.default_rng(1)
        data, w1, w2 = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
        with precision("float64"):
            x = Tensor(data, requires_grad=True)
            backward((x * Tensor(w1) + x * Tensor(w2)).sum())
            together = x.grad.copy()

            separate = np.zeros(4)
            for w in (w1, w2):
                y = Tensor(data, requires_grad=True)
                backward((y * Tensor(w)).sum())
                separate += y.grad
        np.testing.assert_allclose(together, separate)

    def test_parameter_grad_accumulates_across_calls(self):
        p = Parameter([1.0, 2.0])
        backward((p * 3.0).sum())
        backward((p * 3.0).sum())
        np.testing.assert_array_equal(p.grad, [6.0, 6.0])
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_getitem_and_mean(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x[1, 1:].mean())
        np.testing.assert_allclose(x.grad, [[0, 0, 0], [0, 0.5, 0.5]])

    def test_backward_twice_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * 2.0).sum()
        backward(loss)
        with self.assertRaises(TapeConsumedError):
            backward(loss)

    def test_backward_on_non_scalar_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(TapeError):
            backward(x * 2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        self.assertFalse(y.requires_grad)
        self.assertEqual(len(tape.nodes), 0)

    def test_reverse_order_over_recorded_nodes(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        z = (y + y).sum()
        self.assertEqual([node.output for node in tape.nodes][-1], z)
        self.assertLess(y.tape_id[1], z.tape_id[1])
        backward(z)
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])
        self.assertEqual(len(tape.nodes), 0)
