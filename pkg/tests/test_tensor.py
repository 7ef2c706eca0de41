import numpy as np
import pytest

from voxreg import tensor as T
from voxreg.tensor import ShapeError, Tensor, TapeError, recording


def _grad_of(fn, *arrays):
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with recording() as tape:
        tape.backward(fn(*leaves))
    return [t.grad for t in leaves]


class TestElementwise:
    def test_leaky_relu_negative_value_and_slope(self):
        (g,) = _grad_of(lambda x: T.tsum(T.leaky_relu(x, 0.2)), [-2.0])
        with T.no_grad():
            out = T.leaky_relu(Tensor(np.array([-2.0])), 0.2)
        np.testing.assert_allclose(out.data, [-0.4])
        np.testing.assert_allclose(g, [0.2])

    def test_sum_of_ones(self):
        x = np.ones((2, 3))
        with T.no_grad():
            assert T.tsum(Tensor(x)).item() == 6.0
        (g,) = _grad_of(T.tsum, x)
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_sum_of_squares_gradient(self):
        (g,) = _grad_of(lambda x: T.tsum(T.square(x)), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(g, [2.0, 4.0, 6.0])

    def test_mean_gradient(self):
        (g,) = _grad_of(T.mean, np.zeros((4, 5)))
        np.testing.assert_allclose(g, np.full((4, 5), 1 / 20))

    def test_add_sub_mul(self, rng):
        a, b = rng.standard_normal((2, 3, 4))
        ga, gb = _grad_of(lambda x, y: T.tsum(T.mul(T.sub(T.add(x, y), y), y)), a, b)
        # d/da sum(a*b) = b, d/db = a (the add/sub of y cancels)
        np.testing.assert_allclose(ga, b)
        np.testing.assert_allclose(gb, a)

    def test_operators_match_functions(self, rng):
        a = Tensor(rng.standard_normal(5))
        b = Tensor(rng.standard_normal(5))
        np.testing.assert_allclose((a + b).data, a.data + b.data)
        np.testing.assert_allclose((a - b).data, a.data - b.data)
        np.testing.assert_allclose((a * b).data, a.data * b.data)
        np.testing.assert_allclose((2.0 * a).data, 2 * a.data)
        np.testing.assert_allclose((1.0 - a).data, 1 - a.data)
        np.testing.assert_allclose((-a).data, -a.data)

    def test_concat_splits_gradient(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
        proj = rng.standard_normal((3, 3))
        ga, gb = _grad_of(lambda x, y: T.tsum(T.mul(T.concat([x, y], 0), Tensor(proj))), a, b)
        np.testing.assert_allclose(ga, proj[:2])
        np.testing.assert_allclose(gb, proj[2:])

    def test_slice_scatters_gradient(self):
        (g,) = _grad_of(lambda x: T.tsum(x[1:, ::2]), np.zeros((3, 4)))
        expect = np.zeros((3, 4))
        expect[1:, ::2] = 1
        np.testing.assert_array_equal(g, expect)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_integer_input_becomes_float32(self):
        assert Tensor(np.arange(3)).dtype == np.float32


class TestTape:
    def test_fan_out_accumulates(self):
        # y = x*x + x  -> dy/dx = 2x + 1
        (g,) = _grad_of(lambda x: T.tsum(T.add(T.mul(x, x), x)), [3.0, -1.0])
        np.testing.assert_allclose(g, [7.0, -1.0])

    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with recording() as tape:
            loss = T.tsum(T.square(x))
            tape.backward(loss)
            with pytest.raises(TapeError):
                tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with recording() as tape:
            with pytest.raises(TapeError):
                tape.backward(T.square(x))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.square(x)
        assert y.is_leaf and not y.requires_grad

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with recording() as tape:
            T.tsum(T.leaky_relu(T.square(x)))
            outputs = {id(n.output): n.index for n in tape.nodes}
            for node in tape.nodes:
                for inp in node.inputs:
                    if id(inp) in outputs:
                        assert outputs[id(inp)] < node.index
            tape.clear()

    def test_leaf_grads_accumulate_across_sweeps(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with recording() as tape:
                tape.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
