import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainmt import tensor as T
from conftest import gradcheck

TOL = 1e-4
small = st.integers(1, 4)


def rand(rng, *shape):
    return rng.normal(size=shape)


def weighted(t, rng):
    # a random linear read-out keeps the checked gradient non-trivial
    return T.sum_(T.mul(t, T.Tensor(rng.normal(size=t.shape))))


@settings(max_examples=8, deadline=None)
@given(a=small, b=small, seed=st.integers(0, 10_000))
def test_elementwise_grads(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rand(rng, a, b), rand(rng, a, b)
    assert gradcheck(lambda p, q: weighted(T.add(p, q), np.random.default_rng(seed)), x, y) < TOL
    assert gradcheck(lambda p, q: weighted(T.sub(p, q), np.random.default_rng(seed)), x, y) < TOL
    assert gradcheck(lambda p, q: weighted(T.mul(p, q), np.random.default_rng(seed)), x, y) < TOL
    assert gradcheck(lambda p: weighted(T.exp(p), np.random.default_rng(seed)), x) < TOL
    assert gradcheck(lambda p: weighted(T.log(p), np.random.default_rng(seed)), np.abs(x) + 0.5) < TOL


def test_broadcast_add_mul_grads(rng):
    x, b = rand(rng, 3, 4), rand(rng, 4)
    assert gradcheck(lambda p, q: weighted(T.add(p, q), np.random.default_rng(0)), x, b) < TOL
    assert gradcheck(lambda p, q: weighted(T.mul(p, q), np.random.default_rng(1)), x, rand(rng, 3, 1)) < TOL


def test_relu_grad_away_from_kink(rng):
    x = rand(rng, 3, 5)
    x[np.abs(x) < 0.05] = 0.3
    assert gradcheck(lambda p: weighted(T.relu(p), np.random.default_rng(2)), x) < TOL


@settings(max_examples=8, deadline=None)
@given(b=small, n=small, k=small, m=small, seed=st.integers(0, 10_000))
def test_matmul_grad(b, n, k, m, seed):
    rng = np.random.default_rng(seed)
    assert gradcheck(lambda p, q: weighted(T.matmul(p, q), np.random.default_rng(seed)),
                     rand(rng, b, n, k), rand(rng, k, m)) < TOL


def test_matmul_matches_triple_loop(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, want, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))


def test_shape_ops_grads(rng):
    x = rand(rng, 2, 3, 4)
    assert gradcheck(lambda p: weighted(T.reshape(p, (6, 4)), np.random.default_rng(3)), x) < TOL
    assert gradcheck(lambda p: weighted(T.transpose(p, (2, 0, 1)), np.random.default_rng(4)), x) < TOL
    assert gradcheck(lambda p: weighted(T.getitem(p, (slice(None), 1)), np.random.default_rng(5)), x) < TOL
    assert gradcheck(lambda p, q: weighted(T.concat([p, q], axis=1), np.random.default_rng(6)), x, rand(rng, 2, 2, 4)) < TOL
    assert gradcheck(lambda p: weighted(T.sum_(p, axis=1), np.random.default_rng(7)), x) < TOL
    assert gradcheck(lambda p: weighted(T.mean(p, axis=(0, 2), keepdims=True), np.random.default_rng(8)), x) < TOL


def test_repeated_index_accumulates():
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    T.backward(T.sum_(T.getitem(x, np.array([1, 1, 3]))))
    np.testing.assert_array_equal(x.grad, [0, 2, 0, 1])


@settings(max_examples=8, deadline=None)
@given(a=small, v=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_softmax_family_grads(a, v, seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, a, v) * 2
    assert gradcheck(lambda p: weighted(T.softmax(p, -1), np.random.default_rng(seed)), x) < TOL
    assert gradcheck(lambda p: weighted(T.log_softmax(p, -1), np.random.default_rng(seed)), x) < TOL


def test_softmax_rows_sum_to_one_and_survive_large_logits(rng):
    x = rand(rng, 4, 7) * 1000
    p = T.softmax(T.Tensor(x)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    lp = T.log_softmax(T.Tensor(x)).data
    assert np.all(np.isfinite(lp))
    ok = p > 1e-200
    np.testing.assert_allclose(lp[ok], np.log(p[ok]), atol=1e-9, rtol=0)


def test_softmax_bad_axis():
    with pytest.raises(T.ShapeError):
        T.softmax(T.Tensor(np.ones((2, 3))), axis=2)


def test_layer_norm_grad(rng):
    x, g, b = rand(rng, 2, 3, 5), rand(rng, 5), rand(rng, 5)
    assert gradcheck(lambda p, q, r: weighted(T.layer_norm(p, q, r), np.random.default_rng(9)), x, g, b) < TOL


def test_layer_norm_normalises(rng):
    y = T.layer_norm(T.Tensor(rand(rng, 4, 8) * 5 + 3), T.Tensor(np.ones(8)), T.Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-3)


def test_embedding_grad_and_range(rng):
    w = rand(rng, 6, 3)
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    assert gradcheck(lambda p: weighted(T.embedding(p, ids), np.random.default_rng(10)), w) < TOL
    with pytest.raises(IndexError):
        T.embedding(T.Tensor(w), np.array([6]))


def test_cross_entropy_value_grad_and_mask(rng):
    logits = rand(rng, 2, 3, 5)
    tgt = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    want = -np.mean([lp[i, j, tgt[i, j]] for i, j in zip(*np.nonzero(mask))])
    got = float(T.cross_entropy(T.Tensor(logits), tgt, mask).data)
    assert got == pytest.approx(want, rel=1e-12)
    assert gradcheck(lambda p: T.cross_entropy(p, tgt, mask), logits) < TOL
    # masked positions get exactly zero gradient
    x = T.Tensor(logits, requires_grad=True)
    T.backward(T.cross_entropy(x, tgt, mask))
    assert np.all(x.grad[~mask] == 0)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_dropout_is_identity_without_rng_and_scaled_with_it(rng):
    x = T.Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.1, None) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs((y == 0).mean() - 0.25) < 0.02


def test_backward_contract():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.GraphError):
        T.backward(T.mul(x, 2.0))
    loss = T.sum_(T.mul(x, x))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2, 2, 2])
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_gradient_of_shared_subexpression():
    x = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum_(T.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)
