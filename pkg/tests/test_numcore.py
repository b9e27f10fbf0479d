import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftopk.numcore import (ShapeError, SparseLayerMatrix, gradcheck, matmul_dense_sparse,
                              matmul_sparse_dense, softmax_cross_entropy, softmax_row)


def random_layer(n, rng):
    """Random comparator layer: disjoint pairs with random mixing weights."""
    perm = rng.permutation(n)
    n_pairs = int(rng.integers(0, n // 2 + 1))
    pairs = [(int(perm[2 * i]), int(perm[2 * i + 1])) for i in range(n_pairs)]
    return SparseLayerMatrix.from_comparators(n, pairs, rng.uniform(size=n_pairs))


def test_identity_layer_is_noop():
    A = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(matmul_dense_sparse(A, SparseLayerMatrix.identity(4)), A)


def test_two_by_two_average():
    L = SparseLayerMatrix(2, ((0, 0, .5), (0, 1, .5), (1, 0, .5), (1, 1, .5)))
    np.testing.assert_array_equal(matmul_dense_sparse(np.array([[1.0, 2.0]]), L), [[1.5, 1.5]])


def test_random_k3_n8_matches_dense():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 8))
    L = random_layer(8, rng)
    assert np.max(np.abs(matmul_dense_sparse(A, L) - A @ L.to_dense())) < 1e-12


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul_dense_sparse(np.ones((2, 3)), SparseLayerMatrix.identity(4))
    with pytest.raises(ShapeError):
        matmul_sparse_dense(SparseLayerMatrix.identity(4), np.ones((3, 2)))


def test_layer_rejects_three_entries_per_row():
    with pytest.raises(ValueError):
        SparseLayerMatrix(3, ((0, 0, .3), (0, 1, .3), (0, 2, .4), (1, 1, 1.), (2, 2, 1.)))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 64), k=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_dense_sparse_matches_dense_product(n, k, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((k, n))
    L = random_layer(n, rng)
    assert np.max(np.abs(matmul_dense_sparse(A, L) - A @ L.to_dense()), initial=0) < 1e-12
    B = rng.standard_normal((n, k))
    assert np.max(np.abs(matmul_sparse_dense(L, B) - L.to_dense() @ B), initial=0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 32), depth=st.integers(1, 40), seed=st.integers(0, 2**31))
def test_chained_layers_keep_rows_stochastic(n, depth, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(3, n))
    A /= A.sum(axis=1, keepdims=True)
    for _ in range(depth):
        L = random_layer(n, rng)
        assert L.is_doubly_stochastic()
        A = matmul_dense_sparse(A, L)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9, rtol=0)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_row([0, 0], 1.0), [0.5, 0.5], atol=0)
    np.testing.assert_array_equal(softmax_row([1.0], 7.0), [1.0])
    # exp(i) / sum_j exp(j), i = 1, 2, 3
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax_row([1, 2, 3], 1.0), e / e.sum(), rtol=1e-15)
    np.testing.assert_allclose(softmax_row([1, 2, 3], 1.0), [0.09003057, 0.24472847, 0.66524096],
                               atol=5e-9)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax_row([1.0, np.nan])
    with pytest.raises(ValueError):
        softmax_row([1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(0.01, 100))
def test_softmax_sums_to_one(v, tau):
    p = softmax_row(v, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_gradcheck_sum_of_squares():
    rep = gradcheck(lambda x: (float(np.sum(x**2)), 2 * x), [1.0, 2.0], step=1e-5)
    assert rep.max_rel_err < 1e-8


def test_gradcheck_softmax_cross_entropy():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(10)
    rep = gradcheck(lambda x: softmax_cross_entropy(x, 4), s)
    assert rep.max_rel_err < 1e-6


def test_gradcheck_constant():
    rep = gradcheck(lambda x: (3.0, np.zeros_like(x)), [0.5, -1.0, 2.0])
    assert rep.max_abs_err < 1e-9


def test_gradcheck_flags_wrong_gradient():
    rep = gradcheck(lambda x: (float(np.sum(x**2)), x), [1.0, 2.0])
    assert rep.max_rel_err > 0.4
    assert rep.worst_index in {(0,), (1,)}


def test_gradcheck_non_finite():
    with pytest.raises(ValueError), np.errstate(divide="ignore"):
        gradcheck(lambda x: (float(np.log(x[0])), 1 / x), [0.0])
