"""Kirchhoff-Love shell mechanics on THB spaces.

Unknowns are mid-surface displacement coefficients, three per active basis
function, numbered ``3 * function + component``.  All integrals are taken over
the undeformed mid-surface with a tensor Gauss rule on every active cell.

Per quadrature point the variation of a basis function is collected in an
18-vector ``z`` holding the six derivative types ``[N, N_1, N_2, N_11, N_22,
N_12]`` of each of the three displacement components (slot ``3 * type +
component``).  Membrane strain, bending strain and their second variations are
linear/bilinear forms in ``z``, so the element residual and tangent reduce to
contractions with an 18-vector and an 18x18 matrix per point.
"""

from __future__ import annotations

import collections
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ContractError, GeometryError
from .splines import GeometryMap
from .thb import ThbSpace, gauss_legendre

__all__ = [
    "Material",
    "Constraint",
    "PointLoad",
    "EdgeLoad",
    "ShellProblem",
    "StateVector",
    "ConstraintMap",
    "ShellAssembler",
    "MeshField",
    "variation_operators",
    "assembler",
    "material_tensor",
    "material_voigt",
    "kinematics",
    "strains",
    "stress_resultants",
    "assemble_residual",
    "assemble_tangent",
    "assemble_mass",
    "assemble_load",
    "apply_constraints",
    "energy",
]

SIDES = ("u0", "u1", "v0", "v1")
_VOIGT = ((0, 0), (1, 1), (0, 1))


# ----------------------------------------------------------------------------
# problem description
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class Material:
    """Saint-Venant Kirchhoff material; ``rho`` is the volumetric density."""

    E: float
    nu: float
    rho: float = 0.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        if self.rho < 0:
            raise ValueError("density must be non-negative")

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))

    @property
    def mu(self) -> float:
        return self.E / (2 * (1 + self.nu))

    def flexural_rigidity(self, t: float) -> float:
        return self.E * t**3 / (12 * (1 - self.nu**2))


@dataclass(frozen=True)
class Constraint:
    """Homogeneous boundary condition on one side (or corner) of the patch.

    ``kind``:

    * ``"fix"``: zero displacement components on the boundary row;
    * ``"clamp"``: additionally fix the second row (zero normal derivative);
    * ``"symmetry"``: ``components`` name the displacement components normal
      to the symmetry plane, which are fixed; the remaining components get a
      zero parametric normal derivative along the side.

    ``side`` is one of ``u0, u1, v0, v1`` or a corner ``u0v0`` etc.
    """

    side: str
    components: tuple[int, ...] = (0, 1, 2)
    kind: str = "fix"

    def __post_init__(self):
        sides = _parse_side(self.side)
        if self.kind not in ("fix", "clamp", "symmetry"):
            raise ValueError("unknown constraint kind %r" % self.kind)
        if self.kind != "fix" and len(sides) != 1:
            raise ValueError("%s constraints need a single side" % self.kind)
        if any(c not in (0, 1, 2) for c in self.components):
            raise ValueError("components must be in 0..2")


@dataclass(frozen=True)
class PointLoad:
    """Dead point load at a parametric location."""

    xi: tuple[float, float]
    vector: tuple[float, float, float]


@dataclass(frozen=True)
class EdgeLoad:
    """Dead line load (force per unit length of the undeformed edge)."""

    side: str
    traction: tuple[float, float, float] | Callable = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError("edge loads act on a side, got %r" % self.side)


@dataclass(frozen=True)
class ShellProblem:
    """Geometry, material, boundary conditions and reference loads.

    ``surface_load`` is a constant vector or a callable mapping physical points
    ``(n, 3)`` to load densities ``(n, 3)`` (dead).  ``pressure`` is a follower
    load along the deformed normal.  All loads scale with the load factor.
    ``linear=True`` replaces the internal force by ``K(0) u`` (geometrically
    linear analysis).
    """

    geometry: GeometryMap
    material: Material
    constraints: tuple[Constraint, ...] = ()
    surface_load: Sequence[float] | Callable | None = None
    pressure: float = 0.0
    point_loads: tuple[PointLoad, ...] = ()
    edge_loads: tuple[EdgeLoad, ...] = ()
    quad_extra: int = 0
    linear: bool = False

    @property
    def thickness(self) -> float:
        return float(self.geometry.thickness)

    def __post_init__(self):
        if self.linear and self.pressure:
            raise ValueError("follower pressure needs the nonlinear formulation")
        for pl in self.point_loads:
            (a, b), (c, d) = self.geometry.param_domain
            if not (a <= pl.xi[0] <= b and c <= pl.xi[1] <= d):
                raise ValueError("point load outside the parametric domain")


@dataclass
class StateVector:
    """Displacement coefficients on a space, with the load factor."""

    space: ThbSpace
    u: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        if self.u.size != 3 * self.space.n_functions:
            raise ContractError("state length does not match the space")

    @property
    def coefs(self) -> np.ndarray:
        return self.u.reshape(-1, 3)


def _parse_side(side: str) -> list[str]:
    out = [side[i : i + 2] for i in range(0, len(side), 2)]
    if not out or any(s not in SIDES for s in out) or len(side) % 2:
        raise ValueError("unknown side %r" % side)
    if len(out) == 2 and out[0][0] == out[1][0]:
        raise ValueError("a corner joins a u-side and a v-side")
    return out


# ----------------------------------------------------------------------------
# material and kinematics
# ----------------------------------------------------------------------------
def material_tensor(material: Material, metric: np.ndarray) -> np.ndarray:
    """Plane-stress tensor C^{abcd} (..., 2, 2, 2, 2) from the covariant metric."""
    G = np.linalg.inv(np.asarray(metric, dtype=float))
    lam, mu = material.lam, material.mu
    c0 = 2 * lam * mu / (lam + 2 * mu)
    return c0 * np.einsum("...ab,...cd->...abcd", G, G) + mu * (
        np.einsum("...ac,...bd->...abcd", G, G) + np.einsum("...ad,...bc->...abcd", G, G)
    )


def material_voigt(material: Material, metric: np.ndarray) -> np.ndarray:
    """3x3 matrix acting on ``[e11, e22, 2 e12]`` and returning ``[s11, s22, s12]``."""
    C = material_tensor(material, metric)
    out = np.empty(C.shape[:-4] + (3, 3))
    for I, (a, b) in enumerate(_VOIGT):
        for J, (c, d) in enumerate(_VOIGT):
            out[..., I, J] = C[..., a, b, c, d]
    return out


def _skew(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1)
    return v / n[..., None], n


def _voigt_to_tensor(v: np.ndarray, engineering: bool) -> np.ndarray:
    T = np.empty(v.shape[:-1] + (2, 2))
    off = v[..., 2] / 2 if engineering else v[..., 2]
    T[..., 0, 0], T[..., 1, 1] = v[..., 0], v[..., 1]
    T[..., 0, 1] = T[..., 1, 0] = off
    return T


@dataclass
class Kinematics:
    """Point-wise shell state; strains in Voigt form with doubled shear."""

    A: np.ndarray  # (q, 2, 3) undeformed tangents
    a: np.ndarray  # (q, 2, 3) deformed tangents
    ah: np.ndarray  # (q, 3, 3) deformed second derivatives (11, 22, 12)
    a3: np.ndarray
    abar: np.ndarray
    A3: np.ndarray
    Abar: np.ndarray
    metric0: np.ndarray  # (q, 2, 2)
    metric: np.ndarray
    curv0: np.ndarray  # (q, 2, 2)
    curv: np.ndarray
    eps: np.ndarray  # (q, 3)
    kappa: np.ndarray  # (q, 3)


def kinematics(X: np.ndarray, U: np.ndarray) -> Kinematics:
    """Strain measures from geometry ``X`` and displacement ``U`` derivatives (q, 6, 3)."""
    A = X[:, 1:3]
    a = A + U[:, 1:3]
    Ah = X[:, 3:6]
    ah = Ah + U[:, 3:6]
    A3, Abar = _unit(np.cross(A[:, 0], A[:, 1]))
    if np.any(Abar <= 0):
        raise GeometryError("degenerate surface metric")
    a3, abar = _unit(np.cross(a[:, 0], a[:, 1]))
    g0 = np.einsum("qai,qbi->qab", A, A)
    g = np.einsum("qai,qbi->qab", a, a)
    B0 = np.einsum("qhi,qi->qh", Ah, A3)
    B = np.einsum("qhi,qi->qh", ah, a3)
    eps = np.stack([0.5 * (g[:, 0, 0] - g0[:, 0, 0]), 0.5 * (g[:, 1, 1] - g0[:, 1, 1]), g[:, 0, 1] - g0[:, 0, 1]], 1)
    dB = B - B0
    kappa = -np.stack([dB[:, 0], dB[:, 1], 2 * dB[:, 2]], 1)
    curv0 = _voigt_to_tensor(B0, engineering=False)
    curv = _voigt_to_tensor(B, engineering=False)
    return Kinematics(A, a, ah, a3, abar, A3, Abar, g0, g, curv0, curv, eps, kappa)


# ----------------------------------------------------------------------------
# constraints
# ----------------------------------------------------------------------------
@dataclass
class ConstraintMap:
    """Homogeneous constraints as a null-space basis: ``u = Z @ ubar``.

    ``Z`` has orthonormal columns.  ``fixed`` lists dofs removed outright; the
    remaining dofs are free except for the symmetry couplings in ``Z``.
    """

    n_dofs: int
    fixed: np.ndarray
    Z: sp.csr_matrix

    @property
    def n_free(self) -> int:
        return self.Z.shape[1]

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.fixed] = False
        return np.flatnonzero(mask)

    def reduce(self, v: np.ndarray) -> np.ndarray:
        return self.Z.T @ v

    def expand(self, vbar: np.ndarray) -> np.ndarray:
        return self.Z @ vbar

    def reduce_matrix(self, K: sp.spmatrix) -> sp.csr_matrix:
        return (self.Z.T @ K @ self.Z).tocsr()

    def project(self, v: np.ndarray) -> np.ndarray:
        return self.Z @ (self.Z.T @ v)


def _boundary_rows(space: ThbSpace, side: str, depth: int) -> np.ndarray:
    """Functions whose tensor index (own level) is within ``depth`` rows of a side."""
    lev, idx = space.function_tensor_index(np.arange(space.n_functions))
    d = 0 if side[0] == "u" else 1
    if side[1] == "0":
        return np.flatnonzero(idx[d] < depth)
    n = np.array([space.bases[ell].shape[d] for ell in range(space.n_levels)])[lev]
    return np.flatnonzero(idx[d] >= n - depth)


def _edge_quadrature(space: ThbSpace, side: str, n: int):
    """Gauss points on the active cells touching ``side``: (cells, params, weights, tangent dir)."""
    d = 0 if side[0] == "u" else 1
    e = 1 - d
    x, w = gauss_legendre(n)
    box = space.cell_boxes()
    (lo_u, hi_u), (lo_v, hi_v) = space.mesh.base.kvs[0].domain, space.mesh.base.kvs[1].domain
    bound = [(lo_u, hi_u), (lo_v, hi_v)][d][0 if side[1] == "0" else 1]
    sel = np.flatnonzero(np.isclose(box[:, d, 0 if side[1] == "0" else 1], bound))
    cells = np.repeat(sel, n)
    pts = np.empty((cells.size, 2))
    pts[:, d] = bound
    h = box[sel, e, 1] - box[sel, e, 0]
    pts[:, e] = (box[sel, e, 0][:, None] + x[None] * h[:, None]).ravel()
    wts = (w[None] * h[:, None]).ravel()
    return cells, pts, wts, e


def apply_constraints(problem: ShellProblem, space: ThbSpace) -> ConstraintMap:
    """Build the constraint null-space for ``problem.constraints`` on ``space``."""
    ndof = 3 * space.n_functions
    fixed: set[int] = set()
    sym_rows = []
    for c in problem.constraints:
        sides = _parse_side(c.side)
        if c.kind == "fix" and len(sides) == 2:
            fs = np.intersect1d(_boundary_rows(space, sides[0], 1), _boundary_rows(space, sides[1], 1))
        elif c.kind == "clamp":
            fs = _boundary_rows(space, sides[0], 2)
        else:
            fs = _boundary_rows(space, sides[0], 1)
        fixed.update(int(3 * f + k) for f in fs for k in c.components)
        if c.kind == "symmetry":
            free_comp = [k for k in range(3) if k not in c.components]
            cells, pts, _, e = _edge_quadrature(space, sides[0], max(space.degree) + 2)
            d = 1 - e
            V = space.cell_values(cells, pts, 1)[:, 1 + d]  # normal derivative
            F = space.cell_funs[cells]
            for k in free_comp:
                for q in range(len(cells)):
                    ok = (F[q] >= 0) & (np.abs(V[q]) > 1e-13)
                    sym_rows.append((3 * F[q][ok] + k, V[q][ok]))
    fixed_arr = np.array(sorted(fixed), dtype=int)
    mask = np.ones(ndof, dtype=bool)
    mask[fixed_arr] = False
    free = np.flatnonzero(mask)
    if not sym_rows:
        Z = sp.csr_matrix((np.ones(free.size), (free, np.arange(free.size))), shape=(ndof, free.size))
        return ConstraintMap(ndof, fixed_arr, Z)
    # dense null space over the dofs touched by derivative conditions
    cols = np.unique(np.concatenate([r[0] for r in sym_rows]))
    cols = cols[mask[cols]]
    pos = {int(c): i for i, c in enumerate(cols)}
    C = np.zeros((len(sym_rows), cols.size))
    for r, (dofs, vals) in enumerate(sym_rows):
        for dof, v in zip(dofs, vals):
            if int(dof) in pos:
                C[r, pos[int(dof)]] += v
    C /= np.maximum(np.abs(C).max(axis=1, keepdims=True), 1e-300)
    null = sla.null_space(C, rcond=1e-10)
    rest = np.setdiff1d(free, cols)
    rows = np.r_[rest, np.repeat(cols, null.shape[1])]
    colidx = np.r_[np.arange(rest.size), rest.size + np.tile(np.arange(null.shape[1]), cols.size)]
    vals = np.r_[np.ones(rest.size), null.ravel()]
    keep = np.abs(vals) > 1e-14
    Z = sp.csr_matrix((vals[keep], (rows[keep], colidx[keep])), shape=(ndof, rest.size + null.shape[1]))
    return ConstraintMap(ndof, fixed_arr, Z)


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------
def _slot(t: int, k: int) -> int:
    return 3 * t + k


def _expand(N: np.ndarray) -> np.ndarray:
    """(..., 6, nf) basis derivatives to the (..., 18, 3 nf) map from dofs to ``z``."""
    out = np.zeros(N.shape[:-2] + (6, 3, N.shape[-1], 3))
    for k in range(3):
        out[..., :, k, :, k] = N
    return out.reshape(N.shape[:-2] + (18, 3 * N.shape[-1]))


class MeshField:
    """Sum of displacement fields living on spaces that share one mesh.

    ``terms`` are ``(space, coefficients)`` pairs; cell numbers are common to
    all spaces built on the same hierarchical mesh.
    """

    def __init__(self, *terms):
        self.terms = [(sp_, np.asarray(c, dtype=float).reshape(-1, 3)) for sp_, c in terms]

    def derivs(self, cells: np.ndarray, pts: np.ndarray, nd: int = 2) -> np.ndarray:
        out = None
        for space, c in self.terms:
            V = space.cell_values(cells, pts, nd)
            F = space.cell_funs[cells]
            cf = np.where((F >= 0)[..., None], c[np.maximum(F, 0)], 0.0)
            val = np.einsum("qtf,qfk->qtk", V, cf)
            out = val if out is None else out + val
        return out


def variation_operators(kin: Kinematics):
    """Linear maps from ``z`` to ``d eps`` (Lm), ``d a3~`` (LT), ``d a3`` (LP) and ``d b`` (Lb)."""
    q = kin.a.shape[0]
    a1, a2 = kin.a[:, 0], kin.a[:, 1]
    a3, abar = kin.a3, kin.abar
    Lm = np.zeros((q, 3, 18))
    LT = np.zeros((q, 3, 18))
    for k in range(3):
        Lm[:, 0, _slot(1, k)] = a1[:, k]
        Lm[:, 1, _slot(2, k)] = a2[:, k]
        Lm[:, 2, _slot(1, k)] = a2[:, k]
        Lm[:, 2, _slot(2, k)] = a1[:, k]
    LT[:, :, 3:6] = -_skew(a2)
    LT[:, :, 6:9] = _skew(a1)
    P = np.eye(3) - np.einsum("qi,qj->qij", a3, a3)
    LP = np.matmul(P / abar[:, None, None], LT)
    Lb = np.matmul(kin.ah, LP)
    for h in range(3):
        Lb[:, h, 3 * (3 + h) : 3 * (4 + h)] += a3
    Lb[:, 2] *= 2
    return Lm, LT, LP, Lb


class ShellAssembler:
    """Quadrature data and element kernels for one problem on one space.

    Methods taking a displacement accept either a coefficient vector on
    ``space`` or a :class:`MeshField` (for instance a primal solution seen from
    the enriched space).
    """

    chunk = 256

    def __init__(self, problem: ShellProblem, space: ThbSpace, n_quad: int | None = None):
        self.problem = problem
        self.space = space
        self.n_quad = n_quad or max(space.degree) + 1 + problem.quad_extra
        cells, pts, wts = space.quadrature(self.n_quad)
        nc, nq = wts.shape
        self.ncell, self.nq = nc, nq
        self.points = pts
        flat = pts.reshape(-1, 2)
        X = problem.geometry.derivatives(flat)
        self.X = X.reshape(nc, nq, 6, 3)
        self.N = space.cell_values(cells.ravel(), flat, 2).reshape(nc, nq, 6, -1)
        self.funs = space.cell_funs
        A3t = np.cross(X[:, 1], X[:, 2])
        measure = np.linalg.norm(A3t, axis=1)
        problem.geometry.check_regular(measure)
        self.param_weights = wts
        self.weights = wts * measure.reshape(nc, nq)
        g0 = np.einsum("qai,qbi->qab", X[:, 1:3], X[:, 1:3])
        self.D = material_voigt(problem.material, g0).reshape(nc, nq, 3, 3)
        self.n_dofs = 3 * space.n_functions
        self._load = None
        self._cmap = None

    # -- fields ------------------------------------------------------------------
    def displacement_derivs(self, u, sl=slice(None)) -> np.ndarray:
        """Displacement derivatives (c, q, 6, 3) at the quadrature points of cells ``sl``."""
        if isinstance(u, MeshField):
            idx = np.arange(self.ncell)[sl]
            cells = np.repeat(idx, self.nq)
            return u.derivs(cells, self.points[sl].reshape(-1, 2)).reshape(len(idx), self.nq, 6, 3)
        c = np.asarray(u, dtype=float).reshape(-1, 3)
        F = self.funs[sl]
        cf = np.where((F >= 0)[..., None], c[np.maximum(F, 0)], 0.0)
        return np.einsum("cqtf,cfk->cqtk", self.N[sl], cf)

    def constraint_map(self) -> ConstraintMap:
        if self._cmap is None:
            self._cmap = apply_constraints(self.problem, self.space)
        return self._cmap

    def _chunks(self):
        for s in range(0, self.ncell, self.chunk):
            yield slice(s, min(s + self.chunk, self.ncell))

    def _scatter_vec(self, Fe: np.ndarray, sl) -> np.ndarray:
        """Element vectors (c, nf, 3) into a global vector."""
        F = self.funs[sl]
        dof = 3 * F[..., None] + np.arange(3)
        ok = np.broadcast_to((F >= 0)[..., None], dof.shape)
        return np.bincount(dof[ok], Fe[ok], minlength=self.n_dofs)

    def _scatter_mat(self, Ke: np.ndarray, sl) -> sp.coo_matrix:
        """Element matrices (c, 3 nf, 3 nf) into a global COO matrix."""
        F = self.funs[sl]
        dof = (3 * F[..., None] + np.arange(3)).reshape(F.shape[0], -1)
        ok = (F >= 0).repeat(3, axis=1)
        c, n = dof.shape
        Ke = Ke.reshape(c, n, n)
        I = np.broadcast_to(dof[:, :, None], Ke.shape)
        J = np.broadcast_to(dof[:, None, :], Ke.shape)
        m = ok[:, :, None] & ok[:, None, :] & (Ke != 0)
        return sp.coo_matrix((Ke[m], (I[m], J[m])), shape=(self.n_dofs, self.n_dofs))

    # -- point kernels ---------------------------------------------------------------
    def _point_terms(self, kin: Kinematics, D: np.ndarray, w: np.ndarray, tangent: bool = True):
        """Internal-force 18-vectors and tangent 18x18 matrices per point."""
        t = self.problem.thickness
        Lm, LT, LP, Lb = variation_operators(kin)
        n = t * np.einsum("qij,qj->qi", D, kin.eps)
        m = t**3 / 12 * np.einsum("qij,qj->qi", D, kin.kappa)
        rho = w[:, None] * (np.einsum("qiz,qi->qz", Lm, n) - np.einsum("qiz,qi->qz", Lb, m))
        if not tangent:
            return rho, None
        q = w.size
        S = t * np.matmul(Lm.transpose(0, 2, 1), np.matmul(D, Lm))
        S += t**3 / 12 * np.matmul(Lb.transpose(0, 2, 1), np.matmul(D, Lb))
        I3 = np.eye(3)
        for (r, c), val in (((1, 1), n[:, 0]), ((2, 2), n[:, 1]), ((1, 2), n[:, 2]), ((2, 1), n[:, 2])):
            S[:, 3 * r : 3 * r + 3, 3 * c : 3 * c + 3] += val[:, None, None] * I3
        # bending geometric part (contracted with m)
        Eh = np.zeros((q, 3, 18))
        for k in range(3):
            Eh[:, k, _slot(3, k)] = m[:, 0]
            Eh[:, k, _slot(4, k)] = m[:, 1]
            Eh[:, k, _slot(5, k)] = 2 * m[:, 2]
        a3, abar = kin.a3, kin.abar
        V = m[:, 0, None] * kin.ah[:, 0] + m[:, 1, None] * kin.ah[:, 1] + 2 * m[:, 2, None] * kin.ah[:, 2]
        c = np.einsum("qi,qi->q", V, a3) / abar
        wv = V / abar[:, None] - c[:, None] * a3
        aa = np.einsum("qi,qj->qij", a3, a3)
        STT = (
            -(np.einsum("qi,qj->qij", V, a3) + np.einsum("qi,qj->qij", a3, V)) / abar[:, None, None] ** 2
            - (c / abar)[:, None, None] * (I3 - aa)
            + (2 * c / abar)[:, None, None] * aa
        )
        G = np.matmul(Eh.transpose(0, 2, 1), LP)
        G = G + G.transpose(0, 2, 1)
        G += np.matmul(LT.transpose(0, 2, 1), np.matmul(STT, LT))
        W = _skew(wv)
        G[:, 3:6, 6:9] -= W
        G[:, 6:9, 3:6] += W
        S -= G
        S *= w[:, None, None]
        return rho, S

    def _follower(self, kin: Kinematics, lam: float, wparam: np.ndarray, tangent: bool):
        """Follower-pressure load per point (right-hand side) and its linearization."""
        p = lam * self.problem.pressure
        a3t = kin.a3 * kin.abar[:, None]
        f = np.zeros((wparam.size, 18))
        f[:, 0:3] = p * wparam[:, None] * a3t
        if not tangent:
            return f, None
        _, LT, _, _ = variation_operators(kin)
        Sf = np.zeros((wparam.size, 18, 18))
        Sf[:, 0:3, :] = p * wparam[:, None, None] * LT
        return f, Sf

    def _point_state(self, sl, u, lam, tangent, w=None, wparam=None):
        """Internal force minus follower load (per point) and tangent, for cells ``sl``."""
        X = self.X[sl].reshape(-1, 6, 3)
        U = self.displacement_derivs(u, sl).reshape(-1, 6, 3)
        D = self.D[sl].reshape(-1, 3, 3)
        w = self.weights[sl].ravel() if w is None else w
        if self.problem.linear:
            _, S = self._point_terms(kinematics(X, np.zeros_like(U)), D, w, True)
            rho = np.matmul(S, U.reshape(-1, 18, 1))[..., 0]
            return rho, S
        kin = kinematics(X, U)
        rho, S = self._point_terms(kin, D, w, tangent)
        if self.problem.pressure and lam:
            wp = self.param_weights[sl].ravel() if wparam is None else wparam
            f, Sf = self._follower(kin, lam, wp, tangent)
            rho = rho - f
            if tangent:
                S = S - Sf
        return rho, S

    def _element(self, sl, u, lam, tangent):
        nc = sl.stop - sl.start
        rho, S = self._point_state(sl, u, lam, tangent)
        N = self.N[sl]
        Fe = np.einsum("cqtf,cqtk->cfk", N, rho.reshape(nc, self.nq, 6, 3))
        if not tangent:
            return Fe, None
        B = _expand(N)  # (c, q, 18, 3 nf)
        T = np.matmul(S.reshape(nc, self.nq, 18, 18), B)
        nz = B.shape[-1]
        Ke = np.matmul(B.reshape(nc, -1, nz).transpose(0, 2, 1), T.reshape(nc, -1, nz))
        return Fe, Ke

    # -- loads -------------------------------------------------------------------------
    def _surface_density(self, sl) -> np.ndarray | None:
        """Dead surface load (c, q, 3) at the quadrature points or None."""
        pr = self.problem
        if pr.surface_load is None:
            return None
        x = self.X[sl][:, :, 0].reshape(-1, 3)
        if callable(pr.surface_load):
            f = np.asarray(pr.surface_load(x), dtype=float).reshape(-1, 3)
        else:
            f = np.broadcast_to(np.asarray(pr.surface_load, dtype=float), x.shape)
        return f.reshape(sl.stop - sl.start, self.nq, 3)

    def _edge_terms(self):
        """Per edge load: (cells, points, weights*ds, traction)."""
        out = []
        for el in self.problem.edge_loads:
            cells, pts, wts, e = _edge_quadrature(self.space, el.side, self.n_quad + 1)
            X = self.problem.geometry.derivatives(pts)
            ds = np.linalg.norm(X[:, 1 + e], axis=1)
            if callable(el.traction):
                tr = np.asarray(el.traction(X[:, 0]), dtype=float).reshape(-1, 3)
            else:
                tr = np.broadcast_to(np.asarray(el.traction, dtype=float), (len(pts), 3))
            out.append((cells, pts, wts * ds, tr))
        return out

    def _point_terms_loads(self):
        """Per point load: (cell, parametric point, vector)."""
        out = []
        for pl in self.problem.point_loads:
            xi = np.array([pl.xi], dtype=float)
            out.append((self.space.locate(xi), xi, np.asarray(pl.vector, dtype=float)))
        return out

    def load_vector(self) -> np.ndarray:
        """Reference (dead) load vector ``F`` for load factor one."""
        if self._load is not None:
            return self._load
        F = np.zeros(self.n_dofs)
        for sl in self._chunks():
            f = self._surface_density(sl)
            if f is None:
                break
            f = f * self.weights[sl][..., None]
            F += self._scatter_vec(np.einsum("cqf,cqk->cfk", self.N[sl][:, :, 0], f), sl)
        for cell, xi, vec in self._point_terms_loads():
            V = self.space.cell_values(cell, xi, 0)[0, 0]
            for f, v in zip(self.space.cell_funs[cell[0]], V):
                if f >= 0:
                    F[3 * f : 3 * f + 3] += v * vec
        for cells, pts, wds, tr in self._edge_terms():
            V = self.space.cell_values(cells, pts, 0)[:, 0]
            Fs = self.space.cell_funs[cells]
            contrib = wds[:, None, None] * V[:, :, None] * tr[:, None, :]
            ok = Fs >= 0
            dof = 3 * Fs[..., None] + np.arange(3)
            F += np.bincount(dof[ok].ravel(), contrib[ok].ravel(), minlength=self.n_dofs)
        self._load = F
        return F

    # -- global operators --------------------------------------------------------------
    def internal_force(self, u, lam: float = 0.0) -> np.ndarray:
        out = np.zeros(self.n_dofs)
        for sl in self._chunks():
            Fe, _ = self._element(sl, u, lam, False)
            out += self._scatter_vec(Fe, sl)
        return out

    def residual(self, u, lam: float) -> np.ndarray:
        """Internal minus external forces (unconstrained); the negative of R."""
        return self.internal_force(u, lam) - lam * self.load_vector()

    def tangent(self, u, lam: float = 0.0) -> sp.csr_matrix:
        parts = []
        for sl in self._chunks():
            _, Ke = self._element(sl, u, lam, True)
            parts.append(self._scatter_mat(Ke, sl))
        return sum(parts[1:], parts[0]).tocsr()

    def mass(self) -> sp.csr_matrix:
        pr = self.problem
        rho_t = pr.material.rho * pr.thickness
        parts = []
        for sl in self._chunks():
            N0 = self.N[sl][:, :, 0]
            Me = np.matmul(N0.transpose(0, 2, 1) * (rho_t * self.weights[sl])[:, None, :], N0)
            Ke = np.einsum("cfg,kl->cfkgl", Me, np.eye(3))
            parts.append(self._scatter_mat(Ke, sl))
        return sum(parts[1:], parts[0]).tocsr()

    def energy(self, u, lam: float = 0.0) -> float:
        """Strain energy minus dead-load work (follower pressure excluded)."""
        t = self.problem.thickness
        total = 0.0
        for sl in self._chunks():
            X = self.X[sl].reshape(-1, 6, 3)
            U = self.displacement_derivs(u, sl).reshape(-1, 6, 3)
            D = self.D[sl].reshape(-1, 3, 3)
            if self.problem.linear:
                _, S = self._point_terms(kinematics(X, np.zeros_like(U)), D, self.weights[sl].ravel(), True)
                z = U.reshape(-1, 18)
                total += 0.5 * float(np.einsum("qz,qzy,qy->", z, S, z))
                continue
            kin = kinematics(X, U)
            dens = t * np.einsum("qi,qij,qj->q", kin.eps, D, kin.eps)
            dens += t**3 / 12 * np.einsum("qi,qij,qj->q", kin.kappa, D, kin.kappa)
            total += 0.5 * float(dens @ self.weights[sl].ravel())
        F = self.load_vector()
        if isinstance(u, MeshField):
            raise ContractError("energy needs coefficients on the assembler space")
        return total - lam * float(F @ u)

    # -- cellwise forms (error indicators) ------------------------------------------------
    def cell_residual(self, u, weight: MeshField, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """Per cell ``R(u, weight)`` (``R = lam f - internal``) and the squared-density integral."""
        r = np.zeros(self.ncell)
        s = np.zeros(self.ncell)
        for sl in self._chunks():
            nc = sl.stop - sl.start
            w = self.weights[sl].ravel()
            ones = np.ones_like(w)
            rho, _ = self._point_state(sl, u, lam, False, ones, self.param_weights[sl].ravel() / w)
            Z = self.displacement_derivs(weight, sl).reshape(-1, 18)
            g = -np.einsum("qz,qz->q", rho, Z)
            f = self._surface_density(sl)
            if f is not None:
                g += lam * np.einsum("qk,qk->q", f.reshape(-1, 3), Z[:, 0:3])
            g = g.reshape(nc, self.nq)
            r[sl] = np.einsum("cq,cq->c", g, self.weights[sl])
            s[sl] = np.einsum("cq,cq->c", g**2, self.weights[sl])
        # concentrated terms enter s smeared over their cell so that all
        # contributions share the units of an area integral of a squared density
        area = self.weights.sum(axis=1)
        for cell, xi, vec in self._point_terms_loads():
            val = lam * float(weight.derivs(cell, xi, 0)[0, 0] @ vec)
            r[cell[0]] += val
            s[cell[0]] += val**2 / area[cell[0]]
        for cells, pts, wds, tr in self._edge_terms():
            vals = lam * wds * np.einsum("qk,qk->q", weight.derivs(cells, pts, 0)[:, 0], tr)
            np.add.at(r, cells, vals)
            line = np.zeros(self.ncell)
            sq = np.zeros(self.ncell)
            np.add.at(line, cells, wds)
            np.add.at(sq, cells, vals**2 / np.maximum(wds, 1e-300))
            s += sq * line / area
        return r, s

    def cell_bilinear(self, a: MeshField, b: MeshField, u=None, lam: float = 0.0, mass: bool = False):
        """Per cell ``a^T K(u) b`` (or the mass form) and the squared-density integral."""
        r = np.zeros(self.ncell)
        s = np.zeros(self.ncell)
        rho_t = self.problem.material.rho * self.problem.thickness
        for sl in self._chunks():
            nc = sl.stop - sl.start
            A = self.displacement_derivs(a, sl).reshape(-1, 18)
            B = self.displacement_derivs(b, sl).reshape(-1, 18)
            if mass:
                g = rho_t * np.einsum("qk,qk->q", A[:, 0:3], B[:, 0:3])
            else:
                ones = np.ones(A.shape[0])
                uu = np.zeros(self.n_dofs) if u is None else u
                _, S = self._point_state(sl, uu, lam, True, ones, self.param_weights[sl].ravel() / self.weights[sl].ravel())
                g = np.einsum("qz,qzy,qy->q", A, S, B)
            g = g.reshape(nc, self.nq)
            r[sl] = np.einsum("cq,cq->c", g, self.weights[sl])
            s[sl] = np.einsum("cq,cq->c", g**2, self.weights[sl])
        return r, s


_CACHE: "weakref.WeakKeyDictionary[ThbSpace, dict]" = weakref.WeakKeyDictionary()
_RECENT: "collections.deque" = collections.deque()
CACHE_SIZE = 6


def assembler(problem: ShellProblem, space: ThbSpace, n_quad: int | None = None) -> ShellAssembler:
    """Cached :class:`ShellAssembler` for (problem, space, quadrature order).

    Only the ``CACHE_SIZE`` most recently created assemblers are kept; states
    that outlive their mesh (adaptive histories) do not pin quadrature data.
    """
    store = _CACHE.setdefault(space, {})
    key = (id(problem), n_quad)
    hit = store.get(key)
    if hit is None or hit[0] is not problem:
        hit = (problem, ShellAssembler(problem, space, n_quad))
        store[key] = hit
        _RECENT.append((weakref.ref(space), key))
        while len(_RECENT) > CACHE_SIZE:
            ref, old = _RECENT.popleft()
            sp_old = ref()
            if sp_old is not None and sp_old in _CACHE:
                _CACHE[sp_old].pop(old, None)
    return hit[1]


# ----------------------------------------------------------------------------
# functional interface
# ----------------------------------------------------------------------------
def _point_state(problem: ShellProblem, state: StateVector, points) -> tuple[np.ndarray, Kinematics]:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    X = problem.geometry.derivatives(pts)
    U = state.space.evaluate(state.coefs, pts, 2)
    return X, kinematics(X, U)


def strains(problem: ShellProblem, state: StateVector, points) -> dict:
    """Membrane and bending strains (2x2 tensors) and fundamental forms at points."""
    _, kin = _point_state(problem, state, points)
    return {
        "eps": _voigt_to_tensor(kin.eps, engineering=True),
        "kappa": _voigt_to_tensor(kin.kappa, engineering=True),
        "a": kin.metric,
        "b": kin.curv,
        "a0": kin.metric0,
        "b0": kin.curv0,
    }


def stress_resultants(problem: ShellProblem, state: StateVector, points) -> dict:
    """Normal force ``n`` and bending moment ``m`` tensors (contravariant)."""
    _, kin = _point_state(problem, state, points)
    D = material_voigt(problem.material, kin.metric0)
    t = problem.thickness
    n = t * np.einsum("qij,qj->qi", D, kin.eps)
    m = t**3 / 12 * np.einsum("qij,qj->qi", D, kin.kappa)
    return {"n": _voigt_to_tensor(n, engineering=False), "m": _voigt_to_tensor(m, engineering=False)}


def assemble_residual(problem: ShellProblem, space: ThbSpace, u: np.ndarray, lam: float) -> np.ndarray:
    """Residual with constrained directions projected out."""
    asm = assembler(problem, space)
    return asm.constraint_map().project(asm.residual(u, lam))


def assemble_tangent(problem: ShellProblem, space: ThbSpace, u: np.ndarray, lam: float = 0.0) -> sp.csr_matrix:
    return assembler(problem, space).tangent(u, lam)


def assemble_mass(problem: ShellProblem, space: ThbSpace) -> sp.csr_matrix:
    return assembler(problem, space).mass()


def assemble_load(problem: ShellProblem, space: ThbSpace) -> np.ndarray:
    return assembler(problem, space).load_vector()


def energy(problem: ShellProblem, space: ThbSpace, u: np.ndarray, lam: float = 0.0) -> float:
    return assembler(problem, space).energy(u, lam)
