"""Tests for tensor module"""

import numpy as np
import pytest

from src.errors import ContractError, DimensionError
from src.tensor import (
    ComputationRecord,
    Tensor,
    backward,
    concat,
    cross_entropy,
    finite_difference_gradient,
    gelu,
    layer_norm_rows,
    matmul,
    no_grad,
    relative_error,
    softmax_rows,
    take_rows,
)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _fd_agrees(loss_fn, tensors, tolerance=1e-3):
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    for t in tensors:
        estimate = finite_difference_gradient(lambda _: loss_fn(), t)
        assert relative_error(t.grad, estimate) < tolerance


class TestTensorBasics:
    def test_model_state_is_float32(self):
        """Test tensors default to float32"""
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.shape == (2, 2)

    def test_rejects_zero_dimension(self):
        """Test empty dimensions are refused"""
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_item_requires_single_element(self):
        """Test item() on a matrix is a contract error"""
        with pytest.raises(ContractError):
            Tensor([[1.0, 2.0]]).item()

    def test_constants_do_not_track(self):
        """Test operations on non-grad tensors record nothing"""
        out = Tensor([1.0, 2.0]) * 3.0
        assert not out.requires_grad
        assert len(ComputationRecord.trace(out)) == 1


class TestMatmul:
    def test_small_product(self):
        """Test [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]"""
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_identity(self, rng):
        """Test multiplying by the identity returns the input"""
        a = Tensor(rng.uniform(-1, 1, size=(3, 4)))
        np.testing.assert_array_equal(matmul(a, Tensor(np.eye(4))).data, a.data)

    def test_inner_dimension_mismatch_names_both_shapes(self):
        """Test 2x3 @ 2x3 raises a dimension error naming both shapes"""
        with pytest.raises(DimensionError) as exc_info:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert "(2, 3)" in str(exc_info.value)

    def test_gradient(self, rng):
        """Test matmul gradients match finite differences"""
        a, b = _param(rng, 3, 4), _param(rng, 4, 2)
        direction = Tensor(rng.uniform(-1, 1, size=(3, 2)))
        _fd_agrees(lambda: (matmul(a, b) * direction).sum(), [a, b])


class TestSoftmaxRows:
    def test_uniform_row(self):
        """Test equal logits give equal probabilities"""
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-7)

    def test_large_logits_stay_finite(self):
        """Test [1000, 0] gives [1, 0] without overflow"""
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-7)

    def test_known_values(self):
        """Test softmax([1, 2]) = [0.268941, 0.731059]"""
        out = softmax_rows(Tensor([[1.0, 2.0]]))
        np.testing.assert_allclose(out.data, [[0.268941, 0.731059]], atol=1e-6)

    def test_one_to_three_odds(self):
        """Test softmax([0, ln 3]) = [0.25, 0.75]"""
        out = softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-6)

    def test_shift_invariant(self, rng):
        """Test adding a constant to a row leaves its softmax unchanged"""
        x = rng.normal(0, 3, size=(4, 6))
        shifts = np.array([[-50.0], [0.5], [7.0], [100.0]])
        np.testing.assert_allclose(
            softmax_rows(Tensor(x + shifts)).data, softmax_rows(Tensor(x)).data, atol=1e-5
        )

    def test_rows_sum_to_one(self, rng):
        """Test rows are probability vectors"""
        out = softmax_rows(Tensor(rng.normal(0, 5, size=(6, 9))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_gradient_cross_check(self, rng):
        """Test backward agrees with the oracle through softmax_rows + sum"""
        x = _param(rng, 3, 4)
        direction = Tensor(rng.uniform(-1, 1, size=(3, 4)))
        _fd_agrees(lambda: (softmax_rows(x) * direction).sum(), [x], tolerance=1e-4)


class TestBackward:
    def test_linear(self, rng):
        """Test grad of sum(x) is all ones"""
        x = _param(rng, 2, 3)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self, rng):
        """Test grad of sum(x * x) is 2x"""
        x = _param(rng, 2, 3)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_accumulates_until_zeroed(self, rng):
        """Test repeated backward calls add up"""
        x = _param(rng, 4)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression(self):
        """Test a tensor used twice receives both contributions"""
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_non_scalar_is_contract_error(self, rng):
        """Test backward on a matrix is refused"""
        x = _param(rng, 2, 2)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_no_grad_disables_recording(self, rng):
        """Test operations inside no_grad are not differentiable"""
        x = _param(rng, 2, 2)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        with pytest.raises(ContractError):
            backward(y)

    def test_record_is_topological(self, rng):
        """Test parents precede the tensors computed from them"""
        a, b = _param(rng, 2, 2), _param(rng, 2, 2)
        loss = (matmul(a, b) + a).sum()
        nodes = list(ComputationRecord.trace(loss))
        position = {id(n): i for i, n in enumerate(nodes)}
        for node in nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert nodes[-1] is loss


class TestFusedOps:
    def test_gelu_gradient(self, rng):
        """Test gelu gradient against finite differences"""
        x = _param(rng, 4, 5, scale=3.0)
        _fd_agrees(lambda: gelu(x).sum(), [x])

    def test_gelu_zero(self):
        """Test gelu(0) = 0"""
        assert gelu(Tensor([0.0])).item() == 0.0

    def test_gelu_known_values(self):
        """Test gelu(1) = 0.8412 and gelu(10) is within 1e-4 of 10"""
        assert gelu(Tensor([1.0])).item() == pytest.approx(0.8412, abs=1e-4)
        assert gelu(Tensor([10.0])).item() == pytest.approx(10.0, abs=1e-4)

    def test_layer_norm_rows_gradient(self, rng):
        """Test fused layer norm gradients for input, gamma and beta"""
        x, gamma, beta = _param(rng, 3, 6), _param(rng, 6), _param(rng, 6)
        direction = Tensor(rng.uniform(-1, 1, size=(3, 6)))
        _fd_agrees(lambda: (layer_norm_rows(x, gamma, beta, 1e-5) * direction).sum(), [x, gamma, beta])

    def test_cross_entropy_uniform_logits(self):
        """Test uniform logits give log(C)"""
        loss = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        assert loss.item() == pytest.approx(np.log(4), rel=1e-6)

    def test_cross_entropy_gradient(self, rng):
        """Test cross-entropy gradient against finite differences"""
        logits = _param(rng, 3, 4, scale=2.0)
        _fd_agrees(lambda: cross_entropy(logits, [1, 0, 3]), [logits])

    def test_cross_entropy_label_range(self):
        """Test labels outside the class range are refused"""
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_take_rows_scatters_repeated_ids(self):
        """Test a row gathered twice gets twice the gradient"""
        table = Tensor(np.arange(6).reshape(3, 2), requires_grad=True)
        backward(take_rows(table, [2, 0, 2]).sum())
        np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])

    def test_concat_gradient_splits(self, rng):
        """Test concat routes gradient slices back to each input"""
        a, b = _param(rng, 1, 3), _param(rng, 2, 3)
        backward((concat([a, b], axis=0) * 2.0).sum())
        np.testing.assert_array_equal(a.grad, np.full((1, 3), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((2, 3), 2.0))

    def test_index_gradient(self, rng):
        """Test slicing scatters gradient into the sliced columns only"""
        x = _param(rng, 2, 4)
        backward(x[:, 1:3].sum())
        np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])


class TestFiniteDifference:
    def test_linear_function(self, rng):
        """Test f = sum gives all ones"""
        x = _param(rng, 3, 3)
        estimate = finite_difference_gradient(lambda t: t.sum(), x)
        np.testing.assert_allclose(estimate.data, np.ones((3, 3)), atol=1e-6)

    def test_quadratic_function(self):
        """Test d/dx x^2 at 3 is 6"""
        x = Tensor([3.0], requires_grad=True)
        estimate = finite_difference_gradient(lambda t: (t * t).sum(), x)
        assert estimate.data[0] == pytest.approx(6.0, abs=1e-6)

    def test_runs_in_float64_and_restores_data(self, rng):
        """Test the oracle is float64 and leaves the input untouched"""
        x = _param(rng, 2, 2)
        before = x.data.copy()
        estimate = finite_difference_gradient(lambda t: (t * t).sum(), x)
        assert estimate.dtype == np.float64
        assert x.dtype == np.float32
        np.testing.assert_array_equal(x.data, before)

    def test_rejects_nonpositive_epsilon(self, rng):
        """Test epsilon must be positive"""
        with pytest.raises(ContractError):
            finite_difference_gradient(lambda t: t.sum(), _param(rng, 2), epsilon=0.0)


def test_relative_error_is_normwise():
    """Test relative error uses vector norms"""
    assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(1.0)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
