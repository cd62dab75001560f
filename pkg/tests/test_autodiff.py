"""Tape mechanics: recording order, determinism, capture, and errors."""

import numpy as np
import pytest

from wirelens import ops
from wirelens.autodiff import GraphError, Tape, Tensor


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        loss = ops.sum_all(tape, x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_sum_of_squares_gradient_is_x(self):
        tape = Tape()
        x = Tensor(np.linspace(-2, 2, 10), requires_grad=True)
        sq = ops.multiply(tape, x, x)
        loss = ops.scale(tape, ops.sum_all(tape, sq), 0.5)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=0)

    def test_repeated_backward_is_bitwise_identical(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        y = ops.relu(tape, x)
        y = ops.normalize(tape, y, ops.NormConfig())
        loss = ops.sum_all(tape, ops.multiply(tape, y, y))
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
        assert np.array_equal(first, x.grad)

    def test_gradients_accumulate_across_consumers(self):
        tape = Tape()
        x = Tensor(np.full((2, 2), 3.0), requires_grad=True)
        a = ops.scale(tape, x, 2.0)
        b = ops.scale(tape, x, 5.0)
        loss = ops.sum_all(tape, ops.add_n(tape, [a, b]))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 7.0))


class TestCapture:
    def test_watched_interior_tensor_receives_gradient(self):
        tape = Tape()
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        mid = ops.scale(tape, x, 3.0)
        tape.watch(mid)
        loss = ops.sum_all(tape, ops.scale(tape, mid, 2.0))
        tape.backward(loss)
        np.testing.assert_array_equal(mid.grad, np.full((2, 2), 2.0))

    def test_unwatched_interior_stays_bare(self):
        tape = Tape()
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        mid = ops.scale(tape, x, 3.0)
        loss = ops.sum_all(tape, mid)
        tape.backward(loss)
        assert mid.grad is None

    def test_untouched_parameter_gets_zero_gradient(self):
        tape = Tape()
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum_all(tape, ops.add_n(tape, [x, unused]))
        # a second op involving only x; unused already participated above
        tape.backward(loss)
        np.testing.assert_array_equal(unused.grad, np.ones(3))


class TestErrors:
    def test_nonscalar_loss_rejected(self):
        tape = Tape()
        x = Tensor(np.ones(4), requires_grad=True)
        y = ops.scale(tape, x, 2.0)
        with pytest.raises(GraphError, match="scalar"):
            tape.backward(y)

    def test_off_tape_loss_rejected(self):
        tape = Tape()
        x = Tensor(np.ones(4), requires_grad=True)
        ops.scale(tape, x, 2.0)
        other = Tape()
        stray = ops.sum_all(other, Tensor(np.ones(2)))
        with pytest.raises(GraphError, match="not produced"):
            tape.backward(stray)


class TestBlockedBackward:
    def test_blocking_one_fanin_drops_its_contribution(self):
        tape = Tape()
        x = Tensor(np.ones(3), requires_grad=True)
        a = ops.scale(tape, x, 2.0)
        b = ops.scale(tape, x, 5.0)
        s = ops.add_n(tape, [a, b])
        loss = ops.sum_all(tape, s)
        grads = tape.backward(loss, blocked=frozenset({(id(s), id(b))}), assign=False)
        np.testing.assert_array_equal(grads[id(x)], np.full(3, 2.0))

    def test_blocked_pass_does_not_touch_grad_slots(self):
        tape = Tape()
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum_all(tape, ops.scale(tape, x, 2.0))
        tape.backward(loss)
        keep = x.grad
        tape.backward(loss, blocked=frozenset({(1, 2)}), assign=True)
        assert x.grad is keep
