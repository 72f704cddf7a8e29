import numpy as np
import pytest
from hypothesis import given, strategies as st

from permprune.linalg import (
    ShapeError,
    apply_cols,
    apply_rows,
    check_perm,
    matmul,
    perm_compose,
    perm_invert,
    perm_to_matrix,
)


def perms(max_n=24):
    return st.integers(1, max_n).flatmap(lambda n: st.permutations(list(range(n)))).map(np.array)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_trivial():
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul([[1, 0], [0, 0]], [[5, 6], [7, 8]]), [[5, 6], [0, 0]])


def test_matmul_against_loops(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=1e-12)
    a, b = rng.standard_normal((16, 16)), rng.standard_normal((16, 16))
    ref = triple_loop(a, b)
    assert np.max(np.abs(matmul(a, b) - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_matmul_shape_error_names_both():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_perm_to_matrix_examples():
    assert np.array_equal(perm_to_matrix([0, 1, 2]), np.eye(3))
    assert np.array_equal(perm_to_matrix([1, 0]), [[0, 1], [1, 0]])


def test_invert_examples():
    assert perm_invert([0, 1, 2]).tolist() == [0, 1, 2]
    assert perm_invert([2, 0, 1]).tolist() == [1, 2, 0]


def test_check_perm_rejects():
    for bad in ([0, 0], [1, 2], [[0, 1]], [0.5, 1]):
        with pytest.raises((ValueError, ShapeError)):
            check_perm(bad)
    with pytest.raises((ValueError, ShapeError)):
        check_perm([0, 1], 3)


def test_apply_examples(rng):
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(apply_rows([0, 1], m), m)
    assert np.array_equal(apply_rows([1, 0], m), [[3, 4], [1, 2]])
    p = rng.permutation(8)
    x = rng.standard_normal((8, 8))
    assert np.array_equal(apply_rows(p, x), perm_to_matrix(p) @ x)
    assert np.array_equal(apply_cols(p, x), x @ perm_to_matrix(p).T)


@given(perms())
def test_matrix_orthogonal_and_doubly_stochastic(p):
    m = perm_to_matrix(p)
    assert np.array_equal(m @ m.T, np.eye(p.size))
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert np.array_equal(m.sum(0), np.ones(p.size)) and np.array_equal(m.sum(1), np.ones(p.size))


@given(perms())
def test_invert_roundtrip(p):
    q = perm_invert(p)
    assert np.array_equal(perm_invert(q), p)
    assert np.array_equal(perm_compose(p, q), np.arange(p.size))
    assert np.array_equal(perm_compose(q, p), np.arange(p.size))


@given(perms(12), st.integers(0, 2**32 - 1))
def test_gather_inverse_exact(p, seed):
    m = np.random.default_rng(seed).standard_normal((p.size, 3))
    assert np.array_equal(apply_rows(p, apply_rows(perm_invert(p), m)), m)
