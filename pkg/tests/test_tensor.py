import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmatch import tensor as T
from xmatch.errors import ContractError, DimensionError, DomainError, NormalizationError, NumericalError
from xmatch.tensor import Tensor, no_grad

finite = st.floats(-20, 20, allow_nan=False, width=64)


def matrices(min_side=1, max_side=6):
    return st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_softmax_of_one_zero():
    # e / (1 + e) to 12 digits from tests/oracles/reference_values.py
    out = T.softmax(Tensor(np.array([[1.0, 0.0]])), axis=1).data[0]
    np.testing.assert_allclose(out, [0.731058578630, 0.268941421370], atol=1e-12)


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_softmax_survives_large_logits():
    out = T.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]])), axis=1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(), 1.0)


@given(matrices())
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= 1)


@given(matrices())
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(
        T.log_softmax(Tensor(x), axis=1).data, np.log(T.softmax(Tensor(x), axis=1).data), atol=1e-9
    )


@given(matrices())
def test_l2_normalize_gives_unit_rows(x):
    x = x + np.where(np.abs(x).sum(axis=1, keepdims=True) == 0, 1.0, 0.0)
    out = T.l2_normalize(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_sum_gives_ones_gradient():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_product_of_scalars():
    x, y = leaf(3.0), leaf(-2.0)
    (x * y).backward()
    assert x.grad == -2.0 and y.grad == 3.0


def test_fan_out_accumulates_branch_gradients():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum() + (x * 3.0).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = leaf([1.0])
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones((1, 4)))
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_concat_and_reshape_route_gradients():
    a, b = leaf(np.ones((2, 1))), leaf(np.ones((2, 2)))
    out = T.concat([a, b], axis=1).reshape(6)
    (out * Tensor(np.arange(6.0))).sum().backward()
    np.testing.assert_array_equal(a.grad[:, 0], [0.0, 3.0])
    np.testing.assert_array_equal(b.grad, [[1.0, 2.0], [4.0, 5.0]])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_rejects_non_finite_loss():
    x = leaf([np.inf])
    with pytest.raises(NumericalError):
        x.sum().backward()


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_zero_vector_cannot_be_normalized():
    with pytest.raises(NormalizationError):
        T.l2_normalize(Tensor(np.zeros((1, 3))), axis=1)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = (x * x).sum()
    assert y._backward is None and not y.requires_grad


def test_tape_is_topological():
    x = leaf([1.0])
    y = T.exp(x)
    z = y * x + y
    order = T.topological_order(z)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


@given(matrices(2, 5))
def test_forward_is_deterministic(x):
    a = T.softmax(Tensor(x) @ Tensor(x.T), axis=1).data
    b = T.softmax(Tensor(x) @ Tensor(x.T), axis=1).data
    assert a.tobytes() == b.tobytes()
