import numba
import numpy as np
import pytest
from numba.core.runtime import _nrt_python, rtsys

from sortbench import smallmat as sm
from sortbench.kalman import KalmanModel

from conftest import random_spd


def test_matmul_examples():
    P = np.arange(49.0).reshape(7, 7)
    np.testing.assert_array_equal(sm.matmul(np.eye(7), P), P)
    H = KalmanModel.constant_velocity().H
    assert sm.matmul(H, P).shape == (4, 7)
    np.testing.assert_array_equal(sm.matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]]), [[19, 22], [43, 50]])


def test_matvec_examples():
    x = np.arange(7.0)
    np.testing.assert_array_equal(sm.matvec(np.eye(7), x), x)
    assert sm.matvec(KalmanModel.constant_velocity().F, x).shape == (7,)
    np.testing.assert_array_equal(sm.matvec([[1, 0], [0, 2]], [3, 4]), [3, 8])


def test_transpose_examples(rng):
    np.testing.assert_array_equal(sm.transpose(np.eye(7)), np.eye(7))
    assert sm.transpose(KalmanModel.constant_velocity().H).shape == (7, 4)
    a = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(sm.transpose(sm.transpose(a)), a)


def test_cholesky_examples():
    np.testing.assert_array_equal(sm.cholesky(np.eye(4)), np.eye(4))
    L = sm.cholesky([[4, 2], [2, 3]])
    np.testing.assert_allclose(L, [[2, 0], [1, np.sqrt(2)]], atol=1e-15)
    np.testing.assert_allclose(L @ L.T, [[4, 2], [2, 3]], atol=1e-12)
    with pytest.raises(sm.DecompositionError):
        sm.cholesky([[1, 2], [2, 1]])


def test_cholesky_rejects_asymmetric():
    with pytest.raises(sm.DecompositionError):
        sm.cholesky([[4, 2], [2.1, 3]])


def test_inverse_examples():
    np.testing.assert_array_equal(sm.inverse_spd(np.eye(4)), np.eye(4))
    np.testing.assert_allclose(sm.inverse_spd(2 * np.eye(4)), 0.5 * np.eye(4), atol=1e-15)
    np.testing.assert_allclose(sm.inverse_spd([[4, 2], [2, 3]]), np.array([[3, -2], [-2, 4]]) / 8, atol=1e-15)
    with pytest.raises(sm.DecompositionError):
        sm.inverse_spd([[1, 2], [2, 1]])


def test_elementwise_and_scale(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(sm.ew_binary("add", a, np.zeros_like(a)), a)
    z, hx = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_array_equal(sm.ew_binary("sub", z, hx), z - hx)
    np.testing.assert_array_equal(sm.ew_binary("min", [1, 5], [3, 2]), [1, 2])
    np.testing.assert_array_equal(sm.ew_binary("mul", [2, 3], [4, 5]), [8, 15])
    np.testing.assert_array_equal(sm.scale(a, 1), a)
    np.testing.assert_array_equal(sm.scale(np.eye(7), 10), 10 * np.eye(7))
    np.testing.assert_array_equal(sm.scale([1, 2], -0.5), [-0.5, -1])


@pytest.mark.parametrize("call", [
    lambda: sm.matmul(np.ones((2, 3)), np.ones((2, 3))),
    lambda: sm.matvec(np.ones((2, 3)), np.ones(2)),
    lambda: sm.ew_binary("add", np.ones(3), np.ones(4)),
    lambda: sm.matmul(np.ones((17, 2)), np.ones((2, 2))),
    lambda: sm.cholesky(np.ones((2, 3))),
])
def test_shape_errors(call):
    with pytest.raises(sm.ShapeError):
        call()


def test_rejects_non_finite_and_unknown_op():
    with pytest.raises(ValueError):
        sm.matmul([[np.nan]], [[1.0]])
    with pytest.raises(ValueError):
        sm.ew_binary("div", [1.0], [1.0])


def test_out_buffer_is_reused():
    out = np.empty((2, 2))
    res = sm.matmul([[1, 2], [3, 4]], np.eye(2), out=out)
    assert res is out
    with pytest.raises(sm.ShapeError):
        sm.matmul(np.eye(2), np.eye(2), out=np.empty((3, 3)))


def test_associativity_and_transpose_rule(rng):
    for _ in range(200):
        n, k, l, m = rng.integers(1, 9, size=4)
        A, B, C = rng.normal(size=(n, k)), rng.normal(size=(k, l)), rng.normal(size=(l, m))
        left = sm.matmul(sm.matmul(A, B), C)
        right = sm.matmul(A, sm.matmul(B, C))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9 * np.abs(left).max())
        np.testing.assert_allclose(sm.transpose(sm.matmul(A, B)), sm.matmul(sm.transpose(B), sm.transpose(A)),
                                   rtol=0, atol=1e-12)


@pytest.mark.parametrize("n", [4, 7])
def test_inverse_of_random_spd(rng, n):
    for _ in range(200):
        A = random_spd(rng, n)
        assert np.abs(A @ sm.inverse_spd(A) - np.eye(n)).max() < 1e-8


def test_cholesky_recovers_factor(rng):
    for _ in range(200):
        n = int(rng.integers(1, 8))
        L = np.tril(rng.normal(size=(n, n)))
        L[np.diag_indices(n)] = rng.uniform(0.5, 2.0, size=n)
        np.testing.assert_allclose(sm.cholesky(L @ L.T), L, atol=1e-9)


@numba.njit
def _drive(a, v, out, work, vo, flat, fo, reps):
    for _ in range(reps):
        sm.matmul_into(a, a, out)
        sm.matmul_nt_into(a, a, out)
        sm.matvec_into(a, v, vo)
        sm.transpose_into(a, out)
        sm.cholesky_into(a, out)
        sm.inverse_spd_into(a, out, work)
        sm.ew_into(sm.EW_SUB, flat, flat, fo)
        sm.scale_into(flat, 2.0, fo)


def _allocs(args, reps):
    before = rtsys.get_allocation_stats()
    _drive(*args, reps)
    after = rtsys.get_allocation_stats()
    return after.alloc - before.alloc


def test_kernels_do_not_allocate():
    # boxing at the Python boundary costs a fixed number of runtime
    # allocations per call; the kernels themselves must add none per rep
    _nrt_python.memsys_enable_stats()
    a = random_spd(np.random.default_rng(0), 7)
    args = (a, np.ones(7), np.empty((7, 7)), np.empty((7, 7)), np.empty(7), a.reshape(-1), np.empty(49))
    _drive(*args, 1)
    assert _allocs(args, 1) == _allocs(args, 1000)
