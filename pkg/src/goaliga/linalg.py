"""Sparse direct solves and smallest generalized eigenpairs."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError

__all__ = ["Factorization", "solve", "gen_eig_smallest", "gen_eig_largest", "symmetry_defect", "DENSE_LIMIT"]

DENSE_LIMIT = 2000


def symmetry_defect(K) -> float:
    """``max|K - K^T| / max|K|`` (0 for an empty matrix)."""
    K = sp.csr_matrix(K)
    scale = abs(K).max() if K.nnz else 0.0
    if scale == 0:
        return 0.0
    return float(abs(K - K.T).max() / scale)


class Factorization:
    """Reusable LU factorization of a square sparse matrix."""

    def __init__(self, K):
        K = sp.csc_matrix(K)
        if K.shape[0] != K.shape[1]:
            raise SolverError("matrix is not square", shape=K.shape)
        self.K = K
        self.n = K.shape[0]
        if self.n == 0:
            self._lu = None
            return
        try:
            self._lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # exactly singular
            raise SolverError("singular matrix: %s" % exc, n=self.n) from exc
        d = np.abs(self._lu.U.diagonal())
        self.min_pivot = float(d.min())
        self.max_pivot = float(d.max())
        if not np.isfinite(d).all() or self.min_pivot <= 1e-14 * self.max_pivot:
            raise SolverError(
                "numerically singular matrix (pivot ratio %.2e)" % (self.min_pivot / max(self.max_pivot, 1e-300)),
                min_pivot=self.min_pivot,
                max_pivot=self.max_pivot,
            )

    def solve(self, b: np.ndarray, check: float | None = 1e-10) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        if check is not None:
            nb = np.linalg.norm(b)
            if nb > 0:
                res = np.linalg.norm(self.K @ x - b) / nb
                # a few steps of iterative refinement before giving up
                for _ in range(3):
                    if res < check:
                        break
                    x = x + self._lu.solve(b - self.K @ x)
                    res = np.linalg.norm(self.K @ x - b) / nb
                if not res < check:
                    raise SolverError("linear solve residual %.2e" % res, residual=res, min_pivot=self.min_pivot)
        return x

    def det_sign(self) -> int:
        """Sign of the determinant (limit-point detection)."""
        if self.n == 0:
            return 1
        sgn = np.prod(np.sign(self._lu.U.diagonal()))
        # permutation parities
        for perm in (self._lu.perm_r, self._lu.perm_c):
            sgn *= _perm_sign(perm)
        return int(sgn)


def _perm_sign(perm: np.ndarray) -> int:
    seen = np.zeros(perm.size, dtype=bool)
    sign = 1
    for i in range(perm.size):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def solve(K, b: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Direct solve of ``K x = b`` with a relative residual check."""
    return Factorization(K).solve(b, check=tol)


def gen_eig_smallest(A, B, nev: int, tol: float = 1e-8, dense_limit: int = DENSE_LIMIT):
    """Smallest eigenpairs of ``A v = mu B v`` with ``B`` SPD.

    Returns ascending ``mu`` and B-normalized eigenvectors (columns).
    """
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    n = A.shape[0]
    nev = int(min(nev, n))
    if nev <= 0:
        raise ValueError("nev must be positive")
    if n <= dense_limit or nev >= n - 1:
        Ad, Bd = A.toarray(), B.toarray()
        Ad = 0.5 * (Ad + Ad.T)
        Bd = 0.5 * (Bd + Bd.T)
        try:
            mu, V = sla.eigh(Ad, Bd, subset_by_index=[0, nev - 1])
        except np.linalg.LinAlgError as exc:
            raise SolverError("mass-like matrix is not positive definite") from exc
    else:
        try:
            mu, V = spla.eigsh(A, k=nev, M=B, sigma=0.0, which="LM", tol=0.0)
        except (spla.ArpackNoConvergence, RuntimeError) as exc:
            raise SolverError("shift-invert eigensolver failed: %s" % exc) from exc
        order = np.argsort(mu)
        mu, V = mu[order], V[:, order]
    # B-normalize and check
    for k in range(V.shape[1]):
        bn = float(V[:, k] @ (B @ V[:, k]))
        if bn <= 0:
            raise SolverError("eigenvector with non-positive B-norm", mode=k, value=bn)
        V[:, k] /= np.sqrt(bn)
    AV = A @ V
    res = np.linalg.norm(AV - (B @ V) * mu, axis=0) / np.maximum(np.linalg.norm(AV, axis=0), 1e-300)
    if not np.all(res < tol):
        raise SolverError("eigenpair residual %.2e exceeds %.1e" % (res.max(), tol), residual=float(res.max()))
    return mu, V


def gen_eig_largest(G, B, nev: int, tol: float = 1e-8, dense_limit: int = DENSE_LIMIT):
    """Largest eigenpairs of ``G v = theta B v`` with ``B`` SPD and ``G`` symmetric.

    Returned in descending ``theta`` with B-normalized vectors.
    """
    G = sp.csr_matrix(G)
    B = sp.csr_matrix(B)
    n = G.shape[0]
    nev = int(min(nev, n))
    if n <= dense_limit or nev >= n - 1:
        Gd, Bd = G.toarray(), B.toarray()
        try:
            th, V = sla.eigh(0.5 * (Gd + Gd.T), 0.5 * (Bd + Bd.T), subset_by_index=[n - nev, n - 1])
        except np.linalg.LinAlgError as exc:
            raise SolverError("reference matrix is not positive definite") from exc
    else:
        try:
            lu = spla.splu(sp.csc_matrix(B))
            Binv = spla.LinearOperator(B.shape, matvec=lu.solve, dtype=float)
            th, V = spla.eigsh(G, k=nev, M=B, Minv=Binv, which="LA", tol=0.0)
        except (spla.ArpackNoConvergence, RuntimeError) as exc:
            raise SolverError("eigensolver failed: %s" % exc) from exc
    order = np.argsort(-th)
    th, V = th[order], V[:, order]
    for k in range(V.shape[1]):
        V[:, k] /= np.sqrt(float(V[:, k] @ (B @ V[:, k])))
    GV = G @ V
    res = np.linalg.norm(GV - (B @ V) * th, axis=0) / np.maximum(np.linalg.norm(GV, axis=0), 1e-300)
    if not np.all(res < tol):
        raise SolverError("eigenpair residual %.2e exceeds %.1e" % (res.max(), tol), residual=float(res.max()))
    return th, V
