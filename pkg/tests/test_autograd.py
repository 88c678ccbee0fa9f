import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distilqa.autograd import (
    DegenerateError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    embedding,
    finite_diff_check,
    gelu,
    layer_norm,
    log_softmax_lastdim,
    masked_fill,
    matmul,
    mse,
    reduce_sum,
    soft_cross_entropy,
    softmax_lastdim,
)

seeds = st.integers(0, 2**32 - 1)


def rand(rng, *shape, scale=2.0):
    return Tensor(rng.uniform(-scale, scale, size=shape))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_row_sum(self):
        out = matmul(Tensor([[1.0, 2.0, 3.0]]), Tensor([[1.0], [1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[6.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_rules(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor(np.eye(2), requires_grad=True)
        backward(matmul(a, b).sum())
        np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(b.grad, a.data.T @ np.ones((2, 2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)

    def test_single_survivor(self):
        out = softmax_lastdim(Tensor([5.0, 9.0]), mask=np.array([True, False]))
        assert out.data.tolist() == [1.0, 0.0]

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateError):
            softmax_lastdim(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, False], [False, False]]))

    @given(seeds)
    def test_rows_are_distributions(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(0, 5, size=(3, 7)))
        mask = rng.random((3, 7)) < 0.6
        mask[:, 0] = True
        p = softmax_lastdim(x, mask).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all((p >= 0) & (p <= 1))
        assert np.all(p[~mask] == 0.0)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_already_normal(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)

    def test_affine_collapse(self):
        out = layer_norm(Tensor([3.0, -7.0, 0.5]), Tensor(np.zeros(3)), Tensor(np.full(3, 1.25)))
        np.testing.assert_array_equal(out.data, [1.25, 1.25, 1.25])

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class TestGelu:
    def test_values(self):
        assert gelu(Tensor(0.0)).item() == 0.0
        assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-6
        # standard normal CDF at 1
        assert gelu(Tensor(1.0)).item() == pytest.approx(0.8413447460685429, abs=1e-15)

    @given(st.floats(-20, 20))
    def test_odd_part_is_identity(self, x):
        assert gelu(Tensor(x)).item() - gelu(Tensor(-x)).item() == pytest.approx(x, abs=1e-12)


class TestMse:
    def test_zero_on_equal(self):
        a = Tensor([1.0, -3.0, 2.0])
        assert mse(a, a).item() == 0.0

    def test_hand_value(self):
        assert mse(Tensor([0.0, 0.0]), Tensor([2.0, 0.0])).item() == 2.0

    def test_masked_mean(self):
        mask = np.array([True, True, False, False])
        assert mse(Tensor(np.ones(4)), Tensor(np.zeros(4)), mask).item() == 1.0

    def test_empty_mask(self):
        with pytest.raises(DegenerateError):
            mse(Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2, dtype=bool))

    @given(seeds)
    def test_symmetry_and_permutation(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=12), rng.normal(size=12)
        perm = rng.permutation(12)
        ab = mse(Tensor(a), Tensor(b)).item()
        assert ab == pytest.approx(mse(Tensor(b), Tensor(a)).item(), abs=1e-15)
        assert ab == pytest.approx(mse(Tensor(a[perm]), Tensor(b[perm])).item(), abs=1e-12)
        assert mse(Tensor(a), Tensor(a)).item() == 0.0


class TestSoftCrossEntropy:
    def test_one_hot_confident(self):
        logits = Tensor([[0.0, 800.0, 0.0]])
        assert soft_cross_entropy(logits, np.array([[0.0, 1.0, 0.0]]), 1.0).item() == 0.0

    def test_uniform_two(self):
        out = soft_cross_entropy(Tensor([[0.3, 0.3]]), np.array([[0.5, 0.5]]), 1.0)
        assert out.item() == pytest.approx(math.log(2), abs=1e-15)

    @given(seeds)
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2, 5))
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        matched = soft_cross_entropy(Tensor(z), p, 1.0).item()
        perturbed = soft_cross_entropy(Tensor(z + rng.normal(0, 0.5, size=z.shape)), p, 1.0).item()
        assert matched <= perturbed + 1e-12

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            soft_cross_entropy(Tensor([[0.0, 0.0]]), np.array([[0.5, 0.6]]), 1.0)


class TestBackward:
    def test_power_rule(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_mse_of_self(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(mse(x, x))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        backward(y * y + y)  # x^4 + x^2
        assert x.grad == pytest.approx(4 * 8 + 2 * 2)

    def test_tape_is_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        w = Tensor([3.0, 4.0], requires_grad=True)
        loss = reduce_sum(gelu(x * w) + x)
        tape = Tape.from_root(loss)
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(position) == len(tape.nodes)
        for node in tape.nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 3))
        x = rng.normal(size=(5, 4))

        def grads():
            wt = Tensor(w.copy(), requires_grad=True)
            h = softmax_lastdim(matmul(Tensor(x), wt))
            backward(mse(h, Tensor(np.full((5, 3), 1 / 3))) + reduce_sum(gelu(h)))
            return wt.grad

        assert np.array_equal(grads(), grads())

    def test_no_graph_without_grad(self):
        out = matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert not out.requires_grad and out._backward is None


class TestFiniteDiff:
    def test_sum_of_squares(self):
        x = rand(np.random.default_rng(1), 6)
        assert finite_diff_check(lambda t: reduce_sum(t * t), x, 1e-5) < 1e-7

    def test_constant(self):
        x = rand(np.random.default_rng(2), 3)
        assert finite_diff_check(lambda t: Tensor(4.0), x, 1e-5) == 0.0

    def test_restores_inputs(self):
        x = rand(np.random.default_rng(3), 4)
        before = x.data.copy()
        finite_diff_check(lambda t: reduce_sum(gelu(t)), x, 1e-5)
        np.testing.assert_array_equal(x.data, before)
        assert x.grad is None


def _weighted(rng, shape):
    r = Tensor(rng.normal(size=shape))
    return lambda out: reduce_sum(out * r)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w34, w32 = _weighted(rng, (3, 4)), _weighted(rng, (3, 2))
    gamma, beta = rand(rng, 4), rand(rng, 4)
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    p = rng.random((3, 4))
    p /= p.sum(-1, keepdims=True)
    ids = rng.integers(0, 3, size=(2, 2))
    cases = [
        (lambda t: w32(matmul(t, b)), a),
        (lambda t: w32(matmul(a, t)), b),
        (lambda t: w34(softmax_lastdim(t, mask)), a),
        (lambda t: w34(log_softmax_lastdim(t)), a),
        (lambda t: w34(layer_norm(t, gamma, beta)), a),
        (lambda t: w34(layer_norm(a, t, beta)), gamma),
        (lambda t: w34(gelu(t)), a),
        (lambda t: mse(t, Tensor(p), mask), a),
        (lambda t: soft_cross_entropy(t, p, 1.7), a),
        (lambda t: w34(masked_fill(t, ~mask, -5.0)), a),
        (lambda t: w34(t / (t * t + 1.0)), a),
        (lambda t: reduce_sum(embedding(t, ids) * 1.5), a),
        (lambda t: w34(t.transpose(1, 0).reshape(4, 3).transpose(1, 0) * 1.0), a),
    ]
    for f, x in cases:
        assert finite_diff_check(f, x, 1e-5) < 1e-6
