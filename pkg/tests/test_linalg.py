import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from goaliga.errors import SolverError
from goaliga.linalg import Factorization, gen_eig_largest, gen_eig_smallest, solve, symmetry_defect


def laplacian(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def test_solve_tridiagonal():
    K = laplacian(50)
    x = np.linspace(0, 1, 50) ** 2
    np.testing.assert_allclose(solve(K, K @ x), x, rtol=1e-10, atol=1e-13)


def test_singular_matrix_raises():
    K = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        Factorization(K)
    with pytest.raises(SolverError):
        Factorization(sp.csr_matrix(np.ones((2, 3))))


def test_empty_system():
    f = Factorization(sp.csr_matrix((0, 0)))
    assert f.solve(np.zeros(0)).shape == (0,)
    assert f.det_sign() == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
def test_det_sign_matches_dense(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) + n * np.eye(n) * rng.choice([-1, 1], n)
    sign, _ = np.linalg.slogdet(A)
    assert Factorization(sp.csc_matrix(A)).det_sign() == int(sign)


def test_symmetry_defect():
    assert symmetry_defect(laplacian(5)) == 0.0
    A = laplacian(5).tolil()
    A[0, 1] = -1.5
    assert symmetry_defect(A) == pytest.approx(0.25)
    assert symmetry_defect(sp.csr_matrix((3, 3))) == 0.0


@pytest.mark.parametrize("dense_limit", [0, 10_000])
def test_smallest_eigenpairs_of_discrete_laplacian(dense_limit):
    n = 60
    mu, V = gen_eig_smallest(laplacian(n), sp.eye(n), 4, dense_limit=dense_limit)
    k = np.arange(1, 5)
    np.testing.assert_allclose(mu, 2 - 2 * np.cos(k * np.pi / (n + 1)), rtol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-10)


@pytest.mark.parametrize("dense_limit", [0, 10_000])
def test_largest_eigenpairs_generalized(dense_limit):
    n = 40
    B = sp.diags(np.linspace(1, 2, n))
    th, V = gen_eig_largest(laplacian(n), B, 3, dense_limit=dense_limit)
    import scipy.linalg as sla

    ref = sla.eigh(laplacian(n).toarray(), B.toarray(), eigvals_only=True)[::-1][:3]
    np.testing.assert_allclose(th, ref, rtol=1e-10)
    np.testing.assert_allclose(V.T @ (B @ V), np.eye(3), atol=1e-10)


def test_indefinite_reference_matrix_raises():
    with pytest.raises(SolverError):
        gen_eig_smallest(laplacian(4), -sp.eye(4), 2)
