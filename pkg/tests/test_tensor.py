import math

import numpy as np
import pytest

from lst import ops
from lst.errors import ContractError, DimensionError, EmptyLossError, VocabularyIndexError
from lst.gradcheck import check_gradients, relative_error
from lst.tensor import Tensor, is_grad_enabled, no_grad
from tests.conftest import LSTTester


def leaf(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_add_mul_backward():
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    ops.sum(a * b + a).backward()
    np.testing.assert_array_equal(a.grad, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0, 3.0])


def test_shared_input_accumulates():
    x = Tensor([2.0], requires_grad=True)
    ops.sum(x * x + x).backward()
    np.testing.assert_array_equal(x.grad, [5.0])


def test_broadcast_gradient_is_reduced(rng):
    x = leaf(rng, 4, 3)
    bias = leaf(rng, 3)
    ops.sum(ops.add(x, bias)).backward()
    np.testing.assert_array_equal(bias.grad, np.full(3, 4.0))


@pytest.mark.parametrize(
    "build",
    [
        lambda x, w: ops.sum(ops.silu(x @ w)),
        lambda x, w: ops.sum(ops.gelu(x @ w)),
        lambda x, w: ops.mean(ops.rms_norm(x @ w)),
        lambda x, w: ops.mean(ops.layer_norm(x @ w) * ops.layer_norm(x @ w)),
        lambda x, w: ops.sum(ops.softmax(x @ w) * ops.softmax(x @ w)),
        lambda x, w: ops.sum(ops.rotary_position_embed(x @ w, np.arange(4), 1e4) * (x @ w)),
    ],
    ids=["silu", "gelu", "rms_norm", "layer_norm", "softmax", "rotary"],
)
def test_ops_match_finite_differences(rng, build):
    x = leaf(rng, 4, 6, name="x")
    w = leaf(rng, 6, 4, name="w")
    LSTTester.assert_gradients_match(check_gradients(lambda: build(x, w), [x, w]))


def test_indexing_ops_match_finite_differences(rng):
    table = leaf(rng, 5, 4, name="table")
    other = leaf(rng, 2, 4, name="other")

    def loss():
        rows = ops.embedding_lookup(table, [0, 3, 3, 1])
        stacked = ops.concat_rows([rows, other])
        picked = ops.take_rows(stacked, [5, 0, 2])
        return ops.sum(ops.reshape(ops.transpose(picked), (12,)) * ops.reshape(ops.transpose(picked), (12,)))

    LSTTester.assert_gradients_match(check_gradients(loss, [table, other]))


def test_unused_embedding_rows_get_zero_gradient(rng):
    table = leaf(rng, 5, 3)
    ops.sum(ops.embedding_lookup(table, [1, 1, 4])).backward()
    np.testing.assert_array_equal(table.grad[[0, 2, 3]], 0.0)
    np.testing.assert_array_equal(table.grad[1], 2.0)


def test_masked_softmax_fully_masked_row_is_zero(rng):
    x = leaf(rng, 3, 4)
    mask = np.array([[True, True, False, False], [False, False, False, False], [True, True, True, True]])
    y = ops.masked_softmax(x, mask)
    np.testing.assert_array_equal(y.data[1], 0.0)
    np.testing.assert_allclose(y.data[[0, 2]].sum(axis=-1), 1.0)
    np.testing.assert_array_equal(y.data[0, 2:], 0.0)
    ops.sum(y * y).backward()
    np.testing.assert_array_equal(x.grad[1], 0.0)


def test_rotary_preserves_norm(rng):
    x = Tensor(rng.normal(size=(5, 8)))
    y = ops.rotary_position_embed(x, np.arange(5), 5e5)
    np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1))


def test_masked_softmax_rows_sum_to_one(rng):
    x = Tensor(10.0 * rng.normal(size=(6, 9)))
    mask = rng.random((6, 9)) < 0.6
    mask[:, 0] = True
    y = ops.masked_softmax(x, mask)
    assert np.max(np.abs(y.data.sum(axis=-1) - 1.0)) <= 1e-12


def test_rotary_scores_depend_only_on_offsets(rng):
    q, k = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(6, 8)))
    positions = np.arange(6)

    def scores(shift: int) -> np.ndarray:
        rq = ops.rotary_position_embed(q, positions + shift, 5e5)
        rk = ops.rotary_position_embed(k, positions + shift, 5e5)
        return rq.data @ rk.data.T

    np.testing.assert_allclose(scores(137), scores(0), rtol=0, atol=1e-9)
    np.testing.assert_allclose(scores(4096), scores(0), rtol=0, atol=1e-9)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 501)), requires_grad=True)
    loss = ops.softmax_cross_entropy(logits, [4, 17, 500])
    assert loss.item() == pytest.approx(math.log(501))


def test_cross_entropy_confident_logits():
    loss = ops.softmax_cross_entropy(Tensor(np.array([[10.0, 0.0, 0.0, 0.0]])), [0])
    assert loss.item() == pytest.approx(math.log1p(3 * math.exp(-10)), rel=1e-9)
    assert loss.item() == pytest.approx(1.36e-4, rel=0.01)


def test_cross_entropy_ignores_positions(rng):
    logits = leaf(rng, 4, 6, name="logits")
    targets = np.array([1, -100, 5, -100])
    loss = ops.softmax_cross_entropy(logits, targets)
    expected = ops.softmax_cross_entropy(Tensor(logits.data[[0, 2]]), [1, 5]).item()
    assert loss.item() == pytest.approx(expected)
    loss.backward()
    np.testing.assert_array_equal(logits.grad[[1, 3]], 0.0)
    LSTTester.assert_gradients_match(check_gradients(lambda: ops.softmax_cross_entropy(logits, targets), [logits]))


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(EmptyLossError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-100, -100])


def test_cross_entropy_target_out_of_range():
    with pytest.raises(VocabularyIndexError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


def test_matmul_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        ops.matmul(leaf(rng, 2, 3), leaf(rng, 4, 2))


def test_item_needs_single_element():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    with pytest.raises(ContractError):
        Tensor(np.zeros(3)).item()


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with no_grad():
        assert not is_grad_enabled()
        y = ops.sum(x * x)
    assert is_grad_enabled()
    assert y.is_leaf


def test_zero_grad_resets(rng):
    x = leaf(rng, 3)
    ops.sum(x).backward()
    x.zero_grad()
    assert x.grad is None


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-5)
    assert relative_error(1.0, 1.0 + 1e-8) < 1e-8
