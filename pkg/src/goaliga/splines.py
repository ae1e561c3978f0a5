"""Univariate and tensor-product B-spline bases and NURBS geometry maps.

Basis evaluation uses the triangular-table scheme (Piegl & Tiller, A2.2/A2.3),
vectorised over evaluation points. Knot insertion matrices come from the Oslo
algorithm, so they are exact up to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError

__all__ = [
    "KnotVector",
    "TensorBasis",
    "GeometryMap",
    "eval_basis",
    "eval_basis_derivs",
    "basis_derivs",
    "insert_knots",
    "dyadic_refine",
    "elevate_knots",
    "elevate_degree_same_regularity",
    "elevation_matrix",
    "eval_surface",
    "read_geometry",
    "write_geometry",
    "derivative_types",
]


# ----------------------------------------------------------------------------
# knot vectors
# ----------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open (clamped) knot vector of degree ``degree``."""

    degree: int
    knots: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self) -> int:
        return hash((self.degree, self.knots.tobytes()))

    def __post_init__(self):
        p = int(self.degree)
        t = np.asarray(self.knots, dtype=float).copy()
        t.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", t)
        if p < 1:
            raise ValueError("degree must be >= 1")
        if t.ndim != 1 or t.size < 2 * (p + 1):
            raise ValueError("knot vector too short for degree %d" % p)
        if np.any(np.diff(t) < 0) or not np.all(np.isfinite(t)):
            raise ValueError("knots must be finite and non-decreasing")
        if t[0] == t[-1]:
            raise ValueError("empty parametric interval")
        brk, mult = np.unique(t, return_counts=True)
        if mult[0] != p + 1 or mult[-1] != p + 1:
            raise ValueError("boundary knots must have multiplicity p+1")
        if mult.size > 2 and mult[1:-1].max() > p:
            raise ValueError("interior knot multiplicity exceeds degree")

    @classmethod
    def uniform(cls, degree: int, n_spans: int, a: float = 0.0, b: float = 1.0) -> "KnotVector":
        interior = np.linspace(a, b, n_spans + 1)[1:-1]
        return cls(degree, np.r_[[a] * (degree + 1), interior, [b] * (degree + 1)])

    @property
    def n_functions(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def breaks(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def multiplicities(self) -> np.ndarray:
        return np.unique(self.knots, return_counts=True)[1]

    @property
    def n_spans(self) -> int:
        return self.breaks.size - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def span_knot_index(self) -> np.ndarray:
        """Knot index k of every nonzero span [t_k, t_{k+1})."""
        t = self.knots
        return np.nonzero(t[1:] > t[:-1])[0]

    def find_span(self, u) -> np.ndarray:
        """Knot index k with t_k <= u < t_{k+1} (last span for u = end)."""
        u = np.asarray(u, dtype=float)
        k = np.searchsorted(self.knots, u, side="right") - 1
        return np.clip(k, self.degree, self.n_functions - 1)

    def cell_index(self, u) -> np.ndarray:
        """Index of the nonzero span containing u."""
        u = np.asarray(u, dtype=float)
        c = np.searchsorted(self.breaks, u, side="right") - 1
        return np.clip(c, 0, self.n_spans - 1)

    def greville(self) -> np.ndarray:
        p, t = self.degree, self.knots
        return np.array([t[i + 1:i + p + 1].mean() for i in range(self.n_functions)])

    def function_spans(self) -> tuple[np.ndarray, np.ndarray]:
        """First and last nonzero-span index covered by each function's support."""
        p, t, brk = self.degree, self.knots, self.breaks
        i = np.arange(self.n_functions)
        lo = np.searchsorted(brk, t[i], side="left")
        hi = np.searchsorted(brk, t[i + p + 1], side="left") - 1
        return lo, hi

    def span_functions(self) -> np.ndarray:
        """First function index nonzero on each nonzero span."""
        return self.span_knot_index() - self.degree

    def _check_inside(self, u: np.ndarray) -> None:
        a, b = self.domain
        tol = 1e-13 * (b - a)
        if np.any(u < a - tol) or np.any(u > b + tol):
            raise ValueError("parameter outside the interval [%g, %g]" % (a, b))


# ----------------------------------------------------------------------------
# basis evaluation
# ----------------------------------------------------------------------------
def basis_derivs(kv: KnotVector, u, nd: int = 0, cell=None) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero basis functions and derivatives at many points.

    Returns ``first`` (npts,) and ``ders`` (npts, nd+1, p+1) where
    ``ders[q, k, r]`` is the k-th derivative of function ``first[q] + r``.
    Derivative orders above the degree are returned as zeros. ``cell`` forces
    the polynomial piece of the given nonzero span (useful on cell borders).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    kv._check_inside(u)
    p, t = kv.degree, kv.knots
    u = np.clip(u, *kv.domain)
    if cell is None:
        span = kv.find_span(u)
    else:
        span = kv.span_knot_index()[np.broadcast_to(np.asarray(cell), u.shape)]
    npts = u.size
    n = min(nd, p)

    ndu = np.empty((p + 1, p + 1, npts))
    left = np.empty((p + 1, npts))
    right = np.empty((p + 1, npts))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = u - t[span + 1 - j]
        right[j] = t[span + j] - u
        saved = np.zeros(npts)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((npts, nd + 1, p + 1))
    ders[:, 0, :] = ndu[:, p, :].T
    if n > 0:
        a = np.zeros((2, p + 1, npts))
        for r in range(p + 1):
            s1, s2 = 0, 1
            a[0, 0] = 1.0
            for k in range(1, n + 1):
                d = np.zeros(npts)
                rk, pk = r - k, p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d = d + a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d = d + a[s2, k] * ndu[r, pk]
                ders[:, k, r] = d
                s1, s2 = s2, s1
        fac = float(p)
        for k in range(1, n + 1):
            ders[:, k, :] *= fac
            fac *= p - k
    return span - p, ders


def eval_basis(kv: KnotVector, u: float) -> tuple[int, np.ndarray]:
    """First index and values of the p+1 functions nonzero at ``u``."""
    first, d = basis_derivs(kv, [u], 0)
    return int(first[0]), d[0, 0].copy()


def eval_basis_derivs(kv: KnotVector, u: float, max_order: int) -> tuple[int, np.ndarray]:
    """First index and derivative table (max_order+1, p+1) at ``u``."""
    if not 0 <= max_order <= 2:
        raise ValueError("max_order must be 0, 1 or 2")
    if max_order > kv.degree:
        raise ValueError("max_order exceeds the degree")
    first, d = basis_derivs(kv, [u], max_order)
    return int(first[0]), d[0].copy()


# ----------------------------------------------------------------------------
# refinement and elevation
# ----------------------------------------------------------------------------
def _blossom_row(tau: np.ndarray, p: int, mu: int, xs: np.ndarray) -> np.ndarray:
    """Values B_{mu-p..mu}[xs] of the blossomed coarse basis."""
    b = np.ones(1)
    for d in range(1, p + 1):
        x = xs[d - 1]
        new = np.zeros(d + 1)
        for r in range(d + 1):
            i = mu - d + r
            if r >= 1:  # omega_{i,d} * B_{i,d-1}
                den = tau[i + d] - tau[i]
                if den > 0:
                    new[r] += (x - tau[i]) / den * b[r - 1]
            if r <= d - 1:  # (1 - omega_{i+1,d}) * B_{i+1,d-1}
                den = tau[i + 1 + d] - tau[i + 1]
                if den > 0:
                    new[r] += (tau[i + 1 + d] - x) / den * b[r]
        b = new
    return b


def _insertion_matrix(coarse: KnotVector, fine: KnotVector) -> np.ndarray:
    p, tau, t = coarse.degree, coarse.knots, fine.knots
    nc, nf = coarse.n_functions, fine.n_functions
    M = np.zeros((nf, nc))
    for i in range(nf):
        mu = int(np.searchsorted(tau, t[i], side="right")) - 1
        mu = min(max(mu, p), nc - 1)
        M[i, mu - p:mu + 1] = _blossom_row(tau, p, mu, t[i + 1:i + p + 1])
    return M


def insert_knots(kv: KnotVector, new_knots: Sequence[float]) -> tuple[KnotVector, np.ndarray]:
    """Insert knots; returns the refined vector and M with B_coarse = M^T B_fine."""
    new = np.asarray(new_knots, dtype=float).ravel()
    a, b = kv.domain
    if np.any(new <= a) or np.any(new >= b):
        raise ValueError("inserted knots must lie inside the parametric interval")
    t = np.sort(np.r_[kv.knots, new])
    mult = np.unique(t, return_counts=True)[1]
    if mult.size > 2 and mult[1:-1].max() > kv.degree:
        raise ValueError("knot multiplicity would exceed the degree")
    fine = KnotVector(kv.degree, t)
    if new.size == 0:
        return fine, np.eye(kv.n_functions)
    return fine, _insertion_matrix(kv, fine)


def dyadic_refine(kv: KnotVector) -> KnotVector:
    """Halve every nonzero span, repeating midpoints to keep local regularity."""
    brk, mult = np.unique(kv.knots, return_counts=True)
    mids = 0.5 * (brk[:-1] + brk[1:])
    # midpoint multiplicity follows the minimum interior multiplicity (1 for
    # ordinary bases, 2 for the same-regularity elevated bases)
    m = int(mult[1:-1].min()) if mult.size > 2 else 1
    return KnotVector(kv.degree, np.sort(np.r_[kv.knots, np.repeat(mids, m)]))


def elevate_knots(kv: KnotVector) -> KnotVector:
    brk, mult = np.unique(kv.knots, return_counts=True)
    return KnotVector(kv.degree + 1, np.repeat(brk, mult + 1))


def elevation_matrix(kv: KnotVector, elevated: KnotVector | None = None) -> np.ndarray:
    """Matrix E with B_coarse = E^T B_elevated (collocation at Greville points)."""
    el = elevate_knots(kv) if elevated is None else elevated
    g = el.greville()
    Cf = collocation_matrix(el, g)
    Cc = collocation_matrix(kv, g)
    E = np.linalg.solve(Cf, Cc)
    E[np.abs(E) < 1e-15] = 0.0
    return E


def collocation_matrix(kv: KnotVector, u) -> np.ndarray:
    first, d = basis_derivs(kv, u, 0)
    C = np.zeros((len(first), kv.n_functions))
    for r in range(kv.degree + 1):
        C[np.arange(len(first)), first + r] = d[:, 0, r]
    return C


# ----------------------------------------------------------------------------
# tensor bases
# ----------------------------------------------------------------------------
def derivative_types(dim: int) -> list[tuple[int, ...]]:
    """Derivative multi-indices in storage order: value, firsts, seconds."""
    if dim == 1:
        return [(0,), (1,), (2,)]
    if dim == 2:
        return [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    raise ValueError("only 1D and 2D bases are supported")


@dataclass(frozen=True)
class TensorBasis:
    """Tensor product of univariate open B-spline bases."""

    kvs: tuple[KnotVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "kvs", tuple(self.kvs))
        if len(self.kvs) not in (1, 2):
            raise ValueError("only 1D and 2D bases are supported")

    @property
    def dim(self) -> int:
        return len(self.kvs)

    @property
    def degree(self) -> tuple[int, ...]:
        return tuple(k.degree for k in self.kvs)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(k.n_functions for k in self.kvs)

    @property
    def n_functions(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(k.n_spans for k in self.kvs)

    def refine(self) -> "TensorBasis":
        return TensorBasis(tuple(dyadic_refine(k) for k in self.kvs))

    def elevate(self) -> "TensorBasis":
        return elevate_degree_same_regularity(self)

    def local_derivs(self, pts, nd: int = 2, cells=None) -> tuple[np.ndarray, np.ndarray]:
        """Tensor basis on the nonzero functions at each point.

        Returns ``first`` (npts, dim) and ``vals`` (npts, ntypes, nloc) with
        the local functions ordered lexicographically (last direction fastest)
        and derivative types as in :func:`derivative_types` (truncated to order nd).
        ``cells`` (npts, dim) optionally pins the span used per direction.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError("points must have %d columns" % self.dim)
        f = []
        d = []
        for k, kv in enumerate(self.kvs):
            fk, dk = basis_derivs(kv, pts[:, k], nd, None if cells is None else np.asarray(cells)[:, k])
            f.append(fk)
            d.append(dk)
        first = np.stack(f, axis=1)
        types = [ty for ty in derivative_types(self.dim) if sum(ty) <= nd]
        if self.dim == 1:
            vals = np.stack([d[0][:, ty[0], :] for ty in types], axis=1)
        else:
            vals = np.stack(
                [(d[0][:, ty[0], :, None] * d[1][:, ty[1], None, :]).reshape(len(pts), -1) for ty in types],
                axis=1,
            )
        return first, vals

    def local_indices(self, first: np.ndarray) -> np.ndarray:
        """Flat function indices of the local functions for each point/cell."""
        first = np.atleast_2d(first)
        if self.dim == 1:
            return first[:, :1] + np.arange(self.kvs[0].degree + 1)[None, :]
        p1, p2 = self.degree
        n2 = self.shape[1]
        i = first[:, 0, None, None] + np.arange(p1 + 1)[None, :, None]
        j = first[:, 1, None, None] + np.arange(p2 + 1)[None, None, :]
        return (i * n2 + j).reshape(len(first), -1)

    def evaluate(self, coefs: np.ndarray, pts, nd: int = 0) -> np.ndarray:
        """Evaluate a spline with coefficients (n_functions, ncomp)."""
        coefs = np.asarray(coefs, dtype=float).reshape(self.n_functions, -1)
        first, vals = self.local_derivs(pts, nd)
        idx = self.local_indices(first)
        return np.einsum("qtl,qlc->qtc", vals, coefs[idx])


def elevate_degree_same_regularity(tb: TensorBasis) -> TensorBasis:
    """Raise the degree by one and every knot multiplicity by one."""
    return TensorBasis(tuple(elevate_knots(k) for k in tb.kvs))


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class GeometryMap:
    """Rational or polynomial surface patch x(u, v) with a thickness."""

    basis: TensorBasis
    control_points: np.ndarray
    weights: np.ndarray | None = None
    thickness: float = 1.0
    _scale: float = field(init=False, repr=False, default=1.0)

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        shape = self.basis.shape
        if self.basis.dim != 2:
            raise ValueError("geometry maps are surfaces (2D bases)")
        cp = cp.reshape(shape + (3,)) if cp.size == np.prod(shape) * 3 else cp
        if cp.shape != shape + (3,):
            raise ValueError("control net shape %s does not match basis %s" % (cp.shape, shape))
        object.__setattr__(self, "control_points", cp)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(shape)
            if np.any(w <= 0):
                raise ValueError("NURBS weights must be positive")
            object.__setattr__(self, "weights", w)
        if not self.thickness > 0:
            raise ValueError("thickness must be positive")
        diag = float(np.linalg.norm(cp.reshape(-1, 3).max(0) - cp.reshape(-1, 3).min(0)))
        object.__setattr__(self, "_scale", diag if diag > 0 else 1.0)

    @property
    def rational(self) -> bool:
        return self.weights is not None

    @property
    def param_domain(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return tuple(k.domain for k in self.basis.kvs)  # type: ignore[return-value]

    def derivatives(self, pts) -> np.ndarray:
        """Position and derivatives (npts, 6, 3) in :func:`derivative_types` order."""
        first, vals = self.basis.local_derivs(pts, 2)
        idx = self.basis.local_indices(first)
        P = self.control_points.reshape(-1, 3)
        if not self.rational:
            return np.einsum("qtl,qlc->qtc", vals, P[idx])
        w = self.weights.ravel()[idx]
        Aw = np.einsum("qtl,ql,qlc->qtc", vals, w, P[idx])
        W = np.einsum("qtl,ql->qt", vals, w)
        X = np.empty_like(Aw)
        X[:, 0] = Aw[:, 0] / W[:, 0, None]
        for t in (1, 2):
            X[:, t] = (Aw[:, t] - W[:, t, None] * X[:, 0]) / W[:, 0, None]
        X[:, 3] = (Aw[:, 3] - 2 * W[:, 1, None] * X[:, 1] - W[:, 3, None] * X[:, 0]) / W[:, 0, None]
        X[:, 4] = (Aw[:, 4] - 2 * W[:, 2, None] * X[:, 2] - W[:, 4, None] * X[:, 0]) / W[:, 0, None]
        X[:, 5] = (
            Aw[:, 5] - W[:, 1, None] * X[:, 2] - W[:, 2, None] * X[:, 1] - W[:, 5, None] * X[:, 0]
        ) / W[:, 0, None]
        return X

    def check_regular(self, measure: np.ndarray) -> None:
        if np.any(measure < 1e-14 * self._scale ** 2):
            raise GeometryError("degenerate surface Jacobian")


def eval_surface(g: GeometryMap, u: float, v: float, order: int = 2) -> dict:
    """Surface point with covariant basis, second derivatives and unit normal."""
    if not 0 <= order <= 2:
        raise ValueError("order must be 0, 1 or 2")
    X = g.derivatives([[u, v]])[0]
    out = {"x": X[0]}
    if order >= 1:
        a1, a2 = X[1], X[2]
        n = np.cross(a1, a2)
        meas = float(np.linalg.norm(n))
        g.check_regular(np.array([meas]))
        out.update(a1=a1, a2=a2, a3=n / meas, measure=meas)
    if order >= 2:
        out.update(a11=X[3], a22=X[4], a12=X[5])
        a3 = out["a3"]
        out["b"] = np.array([[a3 @ X[3], a3 @ X[5]], [a3 @ X[5], a3 @ X[4]]])
    return out


# ----------------------------------------------------------------------------
# geometry text format
# ----------------------------------------------------------------------------
def write_geometry(g: GeometryMap, path) -> None:
    """Write the documented text format (see README)."""
    lines = ["# goaliga geometry v1"]
    lines.append("degree %d %d" % g.basis.degree)
    for name, kv in zip(("knots_u", "knots_v"), g.basis.kvs):
        lines.append(name + " " + " ".join(repr(float(x)) for x in kv.knots))
    lines.append("thickness %r" % float(g.thickness))
    lines.append("rational %d" % int(g.rational))
    n1, n2 = g.basis.shape
    lines.append("points %d %d" % (n1, n2))
    w = g.weights if g.rational else np.ones((n1, n2))
    for j in range(n2):
        for i in range(n1):
            x, y, z = g.control_points[i, j]
            lines.append("%r %r %r %r" % (float(x), float(y), float(z), float(w[i, j])))
    Path(path).write_text("\n".join(lines) + "\n")


def read_geometry(path) -> GeometryMap:
    """Read a geometry file; unknown keywords raise ValueError."""
    rows = [ln.split("#", 1)[0].split() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r]
    head: dict[str, list[str]] = {}
    it = iter(rows)
    pts: list[list[float]] = []
    for r in it:
        key = r[0]
        if key not in ("degree", "knots_u", "knots_v", "thickness", "rational", "points"):
            raise ValueError("unknown geometry keyword %r" % key)
        head[key] = r[1:]
        if key == "points":
            n1, n2 = int(r[1]), int(r[2])
            for _ in range(n1 * n2):
                pts.append([float(x) for x in next(it)])
            break
    for key in ("degree", "knots_u", "knots_v", "points"):
        if key not in head:
            raise ValueError("geometry file lacks %r" % key)
    p1, p2 = (int(x) for x in head["degree"])
    basis = TensorBasis(
        (KnotVector(p1, [float(x) for x in head["knots_u"]]), KnotVector(p2, [float(x) for x in head["knots_v"]]))
    )
    n1, n2 = int(head["points"][0]), int(head["points"][1])
    arr = np.array(pts, dtype=float)
    cp = arr[:, :3].reshape(n2, n1, 3).transpose(1, 0, 2)
    rational = bool(int(head.get("rational", ["0"])[0]))
    w = arr[:, 3].reshape(n2, n1).T if rational else None
    t = float(head.get("thickness", ["1.0"])[0])
    return GeometryMap(basis, cp, w, t)
