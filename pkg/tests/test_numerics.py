import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.numerics import (
    DegenerateVectorError, DimensionError, EvaluationError, NonFiniteError, ParameterError,
    Tensor, backward, checked_mode, concat, cosine_similarity, grad_check, index, is_checked_mode,
    layer_norm, log_softmax, matmul, no_grad, normalize, reduce_max, reduce_sum, softmax, stack
)


def test_matmul_identity_and_hand_example():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    assert_array_equal(matmul(np.eye(2), m).data, m)
    assert_array_equal(matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3) x (2, 3)" in str(e.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(3, 2))
    error = grad_check(lambda a: reduce_sum(matmul(reshape_3x3(a), b)), rng.normal(size=9))
    assert error < 1e-8


def reshape_3x3(a):
    return a.reshape(3, 3)


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-10


def test_softmax_symmetry_and_shift_invariance():
    assert_allclose(softmax([0.0, 0.0]).data, [0.5, 0.5])
    v = np.array([0.3, -1.2, 2.5])
    assert np.max(np.abs(softmax(v + 7.0).data - softmax(v).data)) < 1e-12


def test_softmax_temperature_oracle():
    v = [1.0, 0.5, 1.0 / 3.0]
    weights = [math.exp(x / 0.8) for x in v]
    expected = [w / sum(weights) for w in weights]
    assert_allclose(softmax(v, 0.8).data, expected, rtol=0, atol=1e-15)
    assert abs(softmax(v, 0.8).data.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("temperature", [0.0, -0.5])
def test_softmax_rejects_non_positive_temperature(temperature):
    with pytest.raises(ParameterError):
        softmax([1.0, 2.0], temperature)


def test_log_softmax_matches_log_of_softmax():
    v = np.array([0.2, 1.7, -0.4, 3.1])
    assert_allclose(log_softmax(v, 0.8).data, np.log(softmax(v, 0.8).data), atol=1e-14)


def test_layer_norm_examples():
    gain = Tensor(np.ones(2))
    assert_allclose(layer_norm([[1.0, -1.0]], gain).data, [[1.0, -1.0]], atol=1e-8)
    assert_array_equal(layer_norm([[4.0, 4.0, 4.0]], Tensor([2.0, 2.0, 2.0])).data, [[0.0, 0.0, 0.0]])


def test_layer_norm_rejects_empty_axis():
    with pytest.raises(DimensionError):
        layer_norm(np.zeros((2, 0)), Tensor(np.zeros(0)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    weights = rng.normal(size=(3, 4))
    gain = rng.normal(size=4)

    def f(x):
        return reduce_sum(layer_norm(x.reshape(3, 4), Tensor(gain)) * weights)

    assert grad_check(f, rng.normal(size=12)) < 1e-6


def test_cosine_similarity_examples():
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert cosine_similarity([0.3, -2.0], [0.3, -2.0]).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]).item() == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-15)


def test_cosine_similarity_rejects_zero_vector():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DegenerateVectorError):
        normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_grad_check_on_square():
    assert grad_check(lambda x: reduce_sum(x * x), [3.0]) < 1e-9


@pytest.mark.parametrize("h", [1e-7, 1e-3])
def test_grad_check_rejects_step_outside_range(h):
    with pytest.raises(ParameterError):
        grad_check(lambda x: reduce_sum(x), [1.0], h=h)


def test_grad_check_reports_non_finite_loss():
    with checked_mode(False):
        with pytest.raises(EvaluationError):
            grad_check(lambda x: reduce_sum(x * np.inf), [1.0])


def test_checked_mode_rejects_nan():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with checked_mode(False):
        assert math.isnan(Tensor([float("nan")]).item())


def test_checked_mode_contexts_nest():
    assert is_checked_mode()
    with checked_mode(False):
        assert not is_checked_mode()
        with checked_mode(True):
            assert is_checked_mode()
        assert not is_checked_mode()
    assert is_checked_mode()


def test_shared_leaf_gradients_accumulate():
    x = Tensor([2.0, -1.0], requires_grad=True)
    y = reduce_sum(x * x + x * 3.0)
    assert_allclose(backward(y)[x], [7.0, 1.0])


def test_repeated_index_accumulates_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = reduce_sum(index(x, np.array([0, 0, 2])))
    assert_array_equal(backward(y)[x], [2.0, 0.0, 1.0])


def test_concat_stack_and_max_gradients():
    a = Tensor([[1.0, 5.0]], requires_grad=True)
    b = Tensor([[3.0, 2.0]], requires_grad=True)
    top = reduce_max(concat([a, b], axis=0), axis=0)
    grads = backward(reduce_sum(top * Tensor([10.0, 100.0])))
    assert_array_equal(grads[a], [[0.0, 100.0]])
    assert_array_equal(grads[b], [[10.0, 0.0]])
    assert stack([a, b]).shape == (2, 1, 2)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert x not in backward(reduce_sum(y))


def test_tensors_are_immutable():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0
