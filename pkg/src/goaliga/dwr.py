"""Goal functionals and dual-weighted residual error estimation.

Static problems use ``Delta L = R(u_h, xi~ - xi_h)`` with ``R = lam F - f_int``;
eigenvalue problems use the eigen residual weighted by an eigenvector from the
enriched space.  Both are split into signed cell contributions ``r`` and
non-negative squared-integrand contributions ``s``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimatorError, SolverError
from .linalg import Factorization
from .shell import (
    MeshField,
    ShellProblem,
    StateVector,
    _edge_quadrature,
    assembler,
    kinematics,
    material_voigt,
    variation_operators,
)
from .thb import ThbSpace

__all__ = [
    "GoalFunctional",
    "ErrorField",
    "QUANTITIES",
    "goal_value",
    "goal_integrand",
    "goal_linearization",
    "solve_dual",
    "enriched_space",
    "solve_dual_enriched",
    "estimate_static",
    "estimate_eigen",
    "estimate_goal",
]

log = logging.getLogger(__name__)

# quantity -> (dimension, kind)
QUANTITIES = {
    "displacement": (3, "vector"),
    "strain": (3, "tensor"),
    "curvature": (3, "tensor"),
    "force": (3, "tensor"),
    "moment": (3, "tensor"),
    "stretch": (2, "principal"),
    "principal_stress": (2, "principal"),
}
_ALIASES = {"membrane_strain": "strain", "membrane_force": "force", "bending_moment": "moment", "u": "displacement"}


@dataclass(frozen=True)
class GoalFunctional:
    """Scalar quantity of interest.

    ``quantity`` is one of :data:`QUANTITIES`.  ``form='norm'`` integrates the
    squared norm (for tensors ``A11^2 + A22^2 + 2 A12^2`` in a local Cartesian
    frame), ``form='component'`` integrates entry ``component``.  Tensor
    entries are ordered ``[11, 22, 12]``; principal values are sorted
    descending.  ``region`` is ``domain``, ``boundary`` (with ``side``) or
    ``points`` (parametric ``points``).
    """

    quantity: str = "displacement"
    form: str = "norm"
    component: int = 0
    region: str = "domain"
    side: str | None = None
    points: tuple = ()
    n_quad: int | None = None

    def __post_init__(self):
        q = _ALIASES.get(self.quantity, self.quantity)
        object.__setattr__(self, "quantity", q)
        if q not in QUANTITIES:
            raise ValueError("unknown goal quantity %r" % self.quantity)
        if self.form not in ("norm", "component"):
            raise ValueError("goal form must be 'norm' or 'component'")
        if self.form == "component" and not 0 <= self.component < QUANTITIES[q][0]:
            raise ValueError("component %d out of range for %s" % (self.component, q))
        if self.region not in ("domain", "boundary", "points"):
            raise ValueError("unknown goal region %r" % self.region)
        if self.region == "boundary" and self.side not in ("u0", "u1", "v0", "v1"):
            raise ValueError("boundary goals need side u0, u1, v0 or v1")
        if self.region == "points":
            pts = np.atleast_2d(np.asarray(self.points, dtype=float))
            if pts.size == 0 or pts.shape[1] != 2:
                raise ValueError("point goals need parametric (u, v) points")
            object.__setattr__(self, "points", tuple(map(tuple, pts)))

    @property
    def label(self) -> str:
        tail = "norm" if self.form == "norm" else "c%d" % self.component
        return "%s-%s-%s" % (self.region, self.quantity, tail)


@dataclass
class ErrorField:
    """Signed total with per-cell indicators on the cells of ``space``."""

    total: float
    r: np.ndarray
    s: np.ndarray
    space: ThbSpace
    n_primal: int = 0
    n_enriched: int = 0
    info: dict = field(default_factory=dict)

    @property
    def e(self) -> float:
        return float(self.s.sum())

    @property
    def blocked(self) -> float:
        """Squared-indicator mass on cells that can no longer be refined."""
        top = self.space.mesh.max_levels - 1
        return float(self.s[self.space.cell_level >= top].sum())

    @property
    def blocked_fraction(self) -> float:
        e = self.e
        return self.blocked / e if e > 0 else 0.0

    def report(self) -> dict:
        return {
            "dL": self.total,
            "e": self.e,
            "blocked": self.blocked_fraction,
            "dofs": 3 * self.n_primal,
            "dofs_enriched": 3 * self.n_enriched,
        }


# ----------------------------------------------------------------------------
# sampling of the goal region
# ----------------------------------------------------------------------------
def _check_points(space: ThbSpace, pts: np.ndarray) -> None:
    for d, kv in enumerate(space.mesh.base.kvs):
        lo, hi = kv.domain
        if np.any(pts[:, d] < lo - 1e-12) or np.any(pts[:, d] > hi + 1e-12):
            raise ValueError("goal point outside the parametric domain")


def _samples(problem: ShellProblem, space: ThbSpace, goal: GoalFunctional, chunk: int = 4096):
    """Yield (cells, params, weights) blocks; weights include the surface/line measure."""
    geo = problem.geometry
    if goal.region == "points":
        pts = np.asarray(goal.points, dtype=float)
        _check_points(space, pts)
        yield space.locate(pts), pts, np.ones(len(pts))
        return
    n = goal.n_quad or max(space.mesh.degree) + 3
    if goal.region == "boundary":
        cells, pts, wts, e = _edge_quadrature(space, goal.side, n)
        X = geo.derivatives(pts)
        yield cells, pts, wts * np.linalg.norm(X[:, 1 + e], axis=1)
        return
    cells, pts, wts = space.quadrature(n)
    cells, pts, wts = cells.ravel(), pts.reshape(-1, 2), wts.ravel()
    for a in range(0, cells.size, chunk):
        sl = slice(a, a + chunk)
        X = geo.derivatives(pts[sl])
        meas = np.linalg.norm(np.cross(X[:, 1], X[:, 2]), axis=1)
        yield cells[sl], pts[sl], wts[sl] * meas


# ----------------------------------------------------------------------------
# integrands
# ----------------------------------------------------------------------------
def _frame_maps(kin):
    """Voigt-to-Cartesian maps for covariant (engineering Voigt) and contravariant tensors."""
    A = kin.A
    e1 = A[:, 0] / np.linalg.norm(A[:, 0], axis=1)[:, None]
    e2 = np.cross(kin.A3, e1)
    E = np.stack([e1, e2], 1)  # (q, 2, 3)
    Ginv = np.linalg.inv(kin.metric0)
    Gcon = np.einsum("qab,qbi->qai", Ginv, A)
    Qcov = np.einsum("qji,qai->qja", E, Gcon)  # [i, alpha] = G^alpha . e_i
    Qcon = np.einsum("qji,qai->qja", E, A)
    return _voigt_map(Qcov, engineering=True), _voigt_map(Qcon, engineering=False)


def _voigt_map(Q: np.ndarray, engineering: bool) -> np.ndarray:
    """(q, 3, 3) linear map from curvilinear Voigt to Cartesian ``[11, 22, 12]``."""
    q = Q.shape[0]
    T = np.zeros((q, 3, 3))
    off = 0.5 if engineering else 1.0
    basis = [np.array([[1.0, 0], [0, 0]]), np.array([[0, 0], [0, 1.0]]), np.array([[0, off], [off, 0]])]
    for k, Bk in enumerate(basis):
        C = np.einsum("qia,ab,qjb->qij", Q, Bk, Q)
        T[:, :, k] = np.stack([C[:, 0, 0], C[:, 1, 1], C[:, 0, 1]], 1)
    return T


def _principal(A: np.ndarray, dA: np.ndarray):
    """Descending eigenvalues of symmetric 2x2 tensors in Voigt form and their variations."""
    M = np.stack([np.stack([A[:, 0], A[:, 2]], -1), np.stack([A[:, 2], A[:, 1]], -1)], 1)
    w, V = np.linalg.eigh(M)
    w, V = w[:, ::-1], V[:, :, ::-1]
    gap = np.abs(w[:, 0] - w[:, 1])
    scale = np.maximum(np.abs(w).max(axis=1), 1e-300)
    close = gap <= 1e-10 * scale
    if np.any(close):
        # coalescent values: the variation of the sum is used for both
        V[close] = np.eye(2)[None] / 1.0
    # d lambda_i = v_i^T dA v_i with dA in Voigt form
    P = np.stack([V[:, 0, :] ** 2, V[:, 1, :] ** 2, 2 * V[:, 0, :] * V[:, 1, :]], 1)  # (q, 3, 2)
    dl = np.einsum("qki,qkz->qiz", P, dA)
    if np.any(close):
        avg = 0.5 * (dl[close, 0] + dl[close, 1])
        dl[close, 0] = avg
        dl[close, 1] = avg
    return w, dl


def _quantity(problem: ShellProblem, X: np.ndarray, U: np.ndarray, quantity: str):
    """Values (q, dim) and their variations with respect to the 18-vector ``z`` (q, dim, 18)."""
    q = X.shape[0]
    if quantity == "displacement":
        d = np.zeros((q, 3, 18))
        d[:, :, 0:3] = np.eye(3)
        return U[:, 0].copy(), d
    kin = kinematics(X, U)
    Lm, _, _, Lb = variation_operators(kin)
    Tcov, Tcon = _frame_maps(kin)
    t = problem.thickness
    if quantity in ("force", "moment", "principal_stress"):
        D = material_voigt(problem.material, kin.metric0)
    if quantity in ("strain", "stretch"):
        A, dA = kin.eps, Lm
        T = Tcov
    elif quantity == "curvature":
        A, dA, T = kin.kappa, -Lb, Tcov
    elif quantity in ("force", "principal_stress"):
        c = t if quantity == "force" else 1.0
        A = c * np.einsum("qij,qj->qi", D, kin.eps)
        dA = c * np.matmul(D, Lm)
        T = Tcon
    elif quantity == "moment":
        c = t**3 / 12
        A = c * np.einsum("qij,qj->qi", D, kin.kappa)
        dA = -c * np.matmul(D, Lb)
        T = Tcon
    else:  # pragma: no cover - guarded by GoalFunctional
        raise ValueError(quantity)
    Ac = np.einsum("qij,qj->qi", T, A)
    dAc = np.matmul(T, dA)
    if quantity == "stretch":
        C = np.column_stack([1 + 2 * Ac[:, 0], 1 + 2 * Ac[:, 1], 2 * Ac[:, 2]])
        return _principal(C, 2 * dAc)
    if quantity == "principal_stress":
        return _principal(Ac, dAc)
    return Ac, dAc


def goal_integrand(problem: ShellProblem, X: np.ndarray, U: np.ndarray, goal: GoalFunctional):
    """Pointwise integrand ``g`` (q,) and its variation ``dg`` (q, 18)."""
    A, dA = _quantity(problem, X, U, goal.quantity)
    if goal.form == "component":
        return A[:, goal.component], dA[:, goal.component]
    wts = np.ones(A.shape[1])
    if QUANTITIES[goal.quantity][1] == "tensor":
        wts[2] = 2.0
    g = np.einsum("k,qk->q", wts, A**2)
    dg = 2 * np.einsum("k,qk,qkz->qz", wts, A, dA)
    return g, dg


def _field_derivs(u, space: ThbSpace, cells, pts, nd=2):
    if callable(u) and not isinstance(u, MeshField):
        return np.asarray(u(pts), dtype=float)
    return u.derivs(cells, pts, nd)


def _as_field(u, space: ThbSpace | None = None):
    if isinstance(u, StateVector):
        return MeshField((u.space, u.u))
    if isinstance(u, MeshField) or callable(u):
        return u
    return MeshField((space, u))


def goal_value(problem: ShellProblem, state, goal: GoalFunctional, space: ThbSpace | None = None) -> float:
    """Goal value for a state.

    ``state`` may be a :class:`StateVector`, a :class:`MeshField` or a callable
    returning displacement derivatives (npts, 6, 3) at parametric points (for
    analytic solutions); ``space`` then supplies the sampling cells.
    """
    space = state.space if isinstance(state, StateVector) else space
    if space is None:
        raise ValueError("goal_value needs a space to sample the region")
    u = _as_field(state, space)
    total = 0.0
    for cells, pts, w in _samples(problem, space, goal):
        X = problem.geometry.derivatives(pts)
        U = _field_derivs(u, space, cells, pts)
        g, _ = goal_integrand(problem, X, U, goal)
        total += float(g @ w)
    return total


def goal_linearization(problem: ShellProblem, state, goal: GoalFunctional, space: ThbSpace | None = None) -> np.ndarray:
    """Full-length vector of ``L'(u_h; phi_i)`` over the functions of ``space``.

    ``space`` defaults to the state's space; passing the enriched space gives
    the right-hand side of the enriched dual problem.
    """
    if space is None:
        space = state.space
    u = _as_field(state, space)
    out = np.zeros(3 * space.n_functions)
    for cells, pts, w in _samples(problem, space, goal):
        X = problem.geometry.derivatives(pts)
        U = _field_derivs(u, space, cells, pts)
        _, dg = goal_integrand(problem, X, U, goal)
        N = space.cell_values(cells, pts, 2)  # (q, 6, nf)
        F = space.cell_funs[cells]
        contrib = np.einsum("qtf,qtk->qfk", N, (w[:, None] * dg).reshape(-1, 6, 3))
        ok = F >= 0
        dof = 3 * F[..., None] + np.arange(3)
        out += np.bincount(dof[ok].ravel(), contrib[ok].ravel(), minlength=out.size)
    return out


# ----------------------------------------------------------------------------
# dual problems
# ----------------------------------------------------------------------------
class _DualOperator:
    """Factorized tangent at ``u_h`` on one space (reused across goals)."""

    def __init__(self, problem, space, u_field, lam):
        asm = assembler(problem, space)
        self.cm = asm.constraint_map()
        uu = np.zeros(asm.n_dofs) if problem.linear else u_field
        K = self.cm.reduce_matrix(asm.tangent(uu, lam))
        try:
            self.fac = Factorization(K)
        except SolverError as exc:
            raise EstimatorError("dual problem is singular: %s" % exc, **exc.info) from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        try:
            return self.cm.expand(self.fac.solve(self.cm.reduce(rhs), check=1e-6))
        except SolverError as exc:
            raise EstimatorError("dual solve failed: %s" % exc, **exc.info) from exc


def solve_dual(problem: ShellProblem, state: StateVector, goal: GoalFunctional, _op=None) -> np.ndarray:
    """Discrete adjoint ``K(u_h)^T xi_h = L'(u_h)`` (K is symmetric)."""
    op = _op or _DualOperator(problem, state.space, state.u, state.lam)
    return op.solve(goal_linearization(problem, state, goal))


def enriched_space(space: ThbSpace) -> ThbSpace:
    """THB space of one degree higher (same regularity) on the same mesh."""
    return ThbSpace(space.mesh, enriched=True)


def solve_dual_enriched(
    problem: ShellProblem, state: StateVector, goal: GoalFunctional, space_e: ThbSpace | None = None, _op=None
) -> tuple[ThbSpace, np.ndarray]:
    """Adjoint solution in the enriched space, linearized at the primal ``u_h``."""
    space_e = space_e or enriched_space(state.space)
    u = MeshField((state.space, state.u))
    op = _op or _DualOperator(problem, space_e, u, state.lam)
    return space_e, op.solve(goal_linearization(problem, u, goal, space_e))


def estimate_static(
    problem: ShellProblem, state: StateVector, xi_h: np.ndarray, space_e: ThbSpace, xi_e: np.ndarray
) -> ErrorField:
    """``Delta L = R(u_h, xi~ - xi_h)`` split over cells."""
    asm = assembler(problem, space_e)
    u = MeshField((state.space, state.u))
    w = MeshField((space_e, xi_e), (state.space, -np.asarray(xi_h)))
    r, s = asm.cell_residual(u, w, state.lam)
    return ErrorField(float(r.sum()), r, s, space_e, state.space.n_functions, space_e.n_functions)


def estimate_goal(problem: ShellProblem, state: StateVector, goal, space_e: ThbSpace | None = None):
    """Both dual solves and the static estimate.

    ``goal`` may be a list of goals; the two tangents are then factorized once
    and a list of :class:`ErrorField` is returned.
    """
    goals = list(goal) if isinstance(goal, (list, tuple)) else [goal]
    space_e = space_e or enriched_space(state.space)
    op_h = _DualOperator(problem, state.space, state.u, state.lam)
    op_e = _DualOperator(problem, space_e, MeshField((state.space, state.u)), state.lam)
    out = []
    for g in goals:
        xi_h = solve_dual(problem, state, g, op_h)
        _, xi_e = solve_dual_enriched(problem, state, g, space_e, op_e)
        ef = estimate_static(problem, state, xi_h, space_e, xi_e)
        ef.info["goal"] = g.label
        out.append(ef)
    return out if isinstance(goal, (list, tuple)) else out[0]


# ----------------------------------------------------------------------------
# eigenvalue problems
# ----------------------------------------------------------------------------
def _match(overlaps: np.ndarray, values: np.ndarray, cluster: float):
    """Best-overlap candidate and the (near-)degenerate group around it."""
    best = int(np.argmax(np.abs(overlaps)))
    group = np.flatnonzero(np.abs(values - values[best]) <= cluster * max(abs(values[best]), 1e-300))
    rest = np.setdiff1d(np.arange(values.size), group)
    if rest.size:
        second = np.abs(overlaps[rest]).max()
        if second >= 0.99 * np.abs(overlaps[best]):
            warnings.warn("ambiguous eigenmode matching between primal and enriched spaces", RuntimeWarning)
    return best, group


def estimate_eigen(
    problem: ShellProblem,
    primal,
    enriched,
    mode: int = 0,
    kind: str = "modal",
    lam_L: float | None = None,
    u_L: StateVector | None = None,
    cluster: float = 1e-4,
) -> ErrorField:
    """Eigenvalue error ``mu - mu_h`` of ``mode`` from an enriched eigen solve.

    ``primal`` and ``enriched`` are :class:`~goaliga.solve.EigenResult`.  For
    ``kind='modal'`` the pencil is ``(K0, M)`` and the estimate refers to
    ``mu = omega^2``.  For ``kind='buckling'`` the pencil is
    ``(K0 - K(u_L), K0)`` in the variable ``theta = 1 - mu``; the estimate refers
    to ``theta`` and ``u_L`` is the primal pre-buckling state.  Degenerate
    enriched eigenvalues (relative spread below ``cluster``) are combined into
    the B-projection of ``v_h`` onto their span.
    """
    space, space_e = primal.space, enriched.space
    asm = assembler(problem, space_e)
    v = MeshField((space, primal.modes[:, mode]))
    if kind == "modal":
        mu_h = float(primal.mu[mode])
        vals_e = np.asarray(enriched.mu, dtype=float)

        def A(a, b):
            return asm.cell_bilinear(a, b)

        def B(a, b):
            return asm.cell_bilinear(a, b, mass=True)

    elif kind == "buckling":
        if u_L is None or lam_L is None:
            raise ValueError("buckling estimates need the pre-buckling state and load level")
        mu_h = float(1.0 - primal.mu[mode])
        vals_e = 1.0 - np.asarray(enriched.mu, dtype=float)
        uL = MeshField((u_L.space, u_L.u))

        def B(a, b):
            return asm.cell_bilinear(a, b)

        def A(a, b):
            r0, s0 = asm.cell_bilinear(a, b)
            r1, _ = asm.cell_bilinear(a, b, uL, lam_L)
            return r0 - r1, s0

    else:
        raise ValueError("kind must be 'modal' or 'buckling'")
    cands = [MeshField((space_e, enriched.modes[:, j])) for j in range(vals_e.size)]
    ov = np.array([B(c, v)[0].sum() for c in cands])
    best, group = _match(ov, vals_e, cluster)
    coef = ov[group]
    psi = MeshField(*[(space_e, enriched.modes[:, j] * c) for j, c in zip(group, coef)])
    norm = np.sqrt(float(coef @ coef))
    psi = MeshField(*[(sp_, c / norm) for sp_, c in psi.terms])
    eta_e = float(coef**2 @ vals_e[group]) / norm**2
    w = MeshField(*psi.terms, (space, -primal.modes[:, mode]))
    ra, sa = A(w, v)
    rb, sb = B(w, v)
    bvv, _ = B(v, v)
    nv = float(bvv.sum())
    guard = (eta_e - mu_h) * (bvv - bvv / nv)
    r = ra - mu_h * rb + guard
    s = sa + mu_h**2 * sb
    ef = ErrorField(float(r.sum()), r, s, space_e, space.n_functions, space_e.n_functions)
    ef.info.update(mode=mode, matched=int(best), group=group.tolist(), value=mu_h, enriched_value=eta_e, kind=kind)
    return ef


def eigen_pencil(problem: ShellProblem, space: ThbSpace, kind: str, nev: int, lam_L: float = 1e-4):
    """Convenience: solve the modal or buckling pencil (see :mod:`goaliga.solve`)."""
    from .solve import buckling_analysis, modal_analysis

    if kind == "modal":
        return modal_analysis(problem, space, nev)
    return buckling_analysis(problem, space, lam_L, nev)


