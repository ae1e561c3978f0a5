"""Truncated hierarchical B-splines on nested dyadic grids.

The mesh stores, per level, a boolean array over that level's cell grid marking
the subdomain Omega^l. A cell is active when it lies in Omega^l but not in
Omega^(l+1). Works in one and two parametric dimensions.
"""

from __future__ import annotations

import itertools
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ContractError
from .splines import TensorBasis, _insertion_matrix, derivative_types

__all__ = [
    "CellId",
    "HierarchicalMesh",
    "ThbSpace",
    "RefineReport",
    "multi_level_support_extension",
    "refinement_neighborhood",
    "coarsening_neighborhood",
    "coarsening_neighborhood_marked",
    "refine",
    "refine_closure",
    "coarsen",
    "is_admissible",
    "eval_thb",
    "gauss_legendre",
]


class CellId(NamedTuple):
    level: int
    index: tuple[int, ...]

    def parent(self) -> "CellId":
        if self.level == 0:
            raise ContractError("level-0 cells have no parent")
        return CellId(self.level - 1, tuple(i >> 1 for i in self.index))

    def children(self) -> list["CellId"]:
        return [
            CellId(self.level + 1, tuple(2 * i + o for i, o in zip(self.index, off)))
            for off in itertools.product((0, 1), repeat=len(self.index))
        ]

    def ancestor(self, level: int) -> "CellId":
        s = self.level - level
        if s < 0:
            raise ValueError("ancestor level above the cell level")
        return CellId(level, tuple(i >> s for i in self.index))


class RefineReport(NamedTuple):
    refined: frozenset
    skipped: frozenset


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# ----------------------------------------------------------------------------
# hierarchical mesh
# ----------------------------------------------------------------------------
class HierarchicalMesh:
    """Nested dyadic hierarchy over a base tensor basis."""

    def __init__(self, base: TensorBasis, max_levels: int = 10, m: int = 2):
        if m < 2:
            raise ValueError("admissibility class m must be >= 2")
        if max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        self.base = base
        self.max_levels = int(max_levels)
        self.m = int(m)
        self.domains: list[np.ndarray] = [np.ones(base.cell_shape, dtype=bool)]
        self._bases: list[TensorBasis] = [base]
        self._ext: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}

    # -- construction helpers -------------------------------------------------
    @classmethod
    def uniform(cls, base: TensorBasis, level: int, max_levels: int | None = None, m: int = 2) -> "HierarchicalMesh":
        mesh = cls(base, max_levels if max_levels is not None else level + 1, m)
        for lev in range(1, level + 1):
            mesh._ensure_level(lev)
            mesh.domains[lev][...] = True
        return mesh

    def copy(self) -> "HierarchicalMesh":
        new = HierarchicalMesh.__new__(HierarchicalMesh)
        new.base, new.max_levels, new.m = self.base, self.max_levels, self.m
        new.domains = [d.copy() for d in self.domains]
        new._bases = self._bases
        new._ext = self._ext
        return new

    def _ensure_level(self, lev: int) -> None:
        while len(self.domains) <= lev:
            self.domains.append(np.zeros(self.cell_shape(len(self.domains)), dtype=bool))

    def _trim(self) -> None:
        while len(self.domains) > 1 and not self.domains[-1].any():
            self.domains.pop()

    # -- geometry of the grids ------------------------------------------------
    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def degree(self) -> tuple[int, ...]:
        return self.base.degree

    @property
    def n_levels(self) -> int:
        return len(self.domains)

    def cell_shape(self, lev: int) -> tuple[int, ...]:
        return tuple(n << lev for n in self.base.cell_shape)

    def level_basis(self, lev: int) -> TensorBasis:
        while len(self._bases) <= lev:
            self._bases.append(self._bases[-1].refine())
        return self._bases[lev]

    def breaks(self, lev: int) -> list[np.ndarray]:
        return [kv.breaks for kv in self.level_basis(lev).kvs]

    def cell_box(self, cell: CellId) -> np.ndarray:
        """(dim, 2) array of the parametric extent of a cell."""
        br = self.breaks(cell.level)
        return np.array([[b[i], b[i + 1]] for b, i in zip(br, cell.index)])

    def _extension_1d(self, lev: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per direction, span ranges [lo, hi] of the level-lev support extension of each cell."""
        if lev not in self._ext:
            out = []
            for kv in self.level_basis(lev).kvs:
                flo, fhi = kv.function_spans()
                first = kv.span_functions()
                out.append((flo[first], fhi[first + kv.degree]))
            self._ext[lev] = out
        return self._ext[lev]

    def _children_mask(self, lev: int) -> np.ndarray:
        """Omega^(lev+1) expressed on the level-lev grid."""
        shape = self.cell_shape(lev)
        if lev + 1 >= self.n_levels:
            return np.zeros(shape, dtype=bool)
        d = self.domains[lev + 1]
        if self.dim == 1:
            return d.reshape(shape[0], 2).any(axis=1)
        return d.reshape(shape[0], 2, shape[1], 2).any(axis=(1, 3))

    def active_mask(self, lev: int) -> np.ndarray:
        if lev >= self.n_levels:
            return np.zeros(self.cell_shape(lev), dtype=bool)
        return self.domains[lev] & ~self._children_mask(lev)

    def active_cells(self) -> list[CellId]:
        """Active cells sorted by (level, index)."""
        out = []
        for lev in range(self.n_levels):
            for idx in np.argwhere(self.active_mask(lev)):
                out.append(CellId(lev, tuple(int(i) for i in idx)))
        return out

    def n_active(self) -> int:
        return int(sum(self.active_mask(lev).sum() for lev in range(self.n_levels)))

    def in_domain(self, cell: CellId) -> bool:
        return cell.level < self.n_levels and bool(self.domains[cell.level][cell.index])

    def is_active(self, cell: CellId) -> bool:
        if not self.in_domain(cell):
            return False
        return not any(self.in_domain(c) for c in cell.children()[:1])

    def locate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Level and per-direction cell index of the active cell containing each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        lev = np.zeros(n, dtype=int)
        idx = np.stack([kv.cell_index(pts[:, k]) for k, kv in enumerate(self.base.kvs)], axis=1)
        todo = np.ones(n, dtype=bool)
        for ell in range(1, self.n_levels):
            kvs = self.level_basis(ell).kvs
            cand = np.stack([kv.cell_index(pts[:, k]) for k, kv in enumerate(kvs)], axis=1)
            inside = self.domains[ell][tuple(cand.T)] & todo
            lev[inside] = ell
            idx[inside] = cand[inside]
            todo = inside
            if not todo.any():
                break
        return lev, idx

    def total_area(self) -> float:
        tot = 0.0
        for lev in range(self.n_levels):
            br = self.breaks(lev)
            h = np.diff(br[0]) if self.dim == 1 else np.outer(np.diff(br[0]), np.diff(br[1]))
            tot += float(h[self.active_mask(lev)].sum())
        return tot

    # -- neighborhoods ----------------------------------------------------------
    def extension_box(self, cell: CellId, k: int) -> list[tuple[int, int]]:
        """Inclusive per-direction index ranges of S(cell, k) on the level-k grid."""
        if k > cell.level or k < 0:
            raise ValueError("extension level must satisfy 0 <= k <= cell level")
        anc = cell.ancestor(k)
        ext = self._extension_1d(k)
        return [(int(lo[i]), int(hi[i])) for (lo, hi), i in zip(ext, anc.index)]

    def _box_cells(self, lev: int, box: list[tuple[int, int]]) -> list[CellId]:
        rng = [range(a, b + 1) for a, b in box]
        return [CellId(lev, tuple(ix)) for ix in itertools.product(*rng)]

    def _box_slices(self, box: list[tuple[int, int]], shift: int = 0) -> tuple[slice, ...]:
        """Slices covering the box after refining it ``shift`` levels."""
        return tuple(slice(a << shift, (b + 1) << shift) for a, b in box)

    def to_dump(self, indicators: dict | None = None) -> list[tuple]:
        rows = []
        for c in self.active_cells():
            box = self.cell_box(c)
            val = float("nan") if indicators is None else float(indicators.get(c, float("nan")))
            rows.append((c.level, *box.ravel().tolist(), val))
        return rows

    def dump(self, path, indicators: dict | None = None) -> None:
        """Write one CSV row per active cell: level, box bounds, indicator."""
        cols = ["level"] + [f"{a}{d}" for d in ("u", "v")[: self.dim] for a in ("lo_", "hi_")] + ["indicator"]
        lines = [",".join(cols)]
        for row in self.to_dump(indicators):
            lines.append(",".join([str(row[0])] + ["%.17g" % x for x in row[1:]]))
        Path(path).write_text("\n".join(lines) + "\n")

    def __repr__(self) -> str:
        counts = [int(self.active_mask(lev).sum()) for lev in range(self.n_levels)]
        return f"HierarchicalMesh(active per level={counts}, m={self.m}, max_levels={self.max_levels})"


def multi_level_support_extension(mesh: HierarchicalMesh, Q: CellId, k: int) -> set[CellId]:
    """Level-k cells meeting supports of level-k B-splines that are nonzero on Q."""
    return set(mesh._box_cells(k, mesh.extension_box(Q, k)))


def refinement_neighborhood(mesh: HierarchicalMesh, Q: CellId, m: int | None = None) -> set[CellId]:
    m = mesh.m if m is None else m
    lev = Q.level - m + 1
    if lev < 0:
        return set()
    box = mesh.extension_box(Q, lev + 1)
    pbox = [(a >> 1, b >> 1) for a, b in box]
    act = mesh.active_mask(lev)
    return {c for c in mesh._box_cells(lev, pbox) if act[c.index]}


def _coarsening_region(mesh: HierarchicalMesh, Q: CellId) -> list[tuple[int, int]]:
    """Union (a box) of S(Q'', l) over the level-l children Q'' of P(Q)."""
    P = Q.parent()
    boxes = [mesh.extension_box(c, Q.level) for c in P.children()]
    return [(min(b[d][0] for b in boxes), max(b[d][1] for b in boxes)) for d in range(mesh.dim)]


def coarsening_neighborhood(mesh: HierarchicalMesh, Q: CellId, m: int | None = None) -> set[CellId]:
    """Active cells of level >= l+m-1 inside the region of the siblings' extensions."""
    m = mesh.m if m is None else m
    if Q.level == 0:
        raise ContractError("level-0 cells cannot be coarsened")
    region = _coarsening_region(mesh, Q)
    out: set[CellId] = set()
    for lev in range(Q.level + m - 1, mesh.n_levels):
        act = mesh.active_mask(lev)
        sl = mesh._box_slices(region, lev - Q.level)
        for idx in np.argwhere(act[sl]):
            out.add(CellId(lev, tuple(int(i) + s.start for i, s in zip(idx, sl))))
    return out


def coarsening_neighborhood_marked(
    mesh: HierarchicalMesh, Q: CellId, m: int | None, marked: Iterable[CellId]
) -> set[CellId]:
    """Cells of ``marked`` with level >= l+m-2 inside the coarsening region of Q."""
    m = mesh.m if m is None else m
    if Q.level == 0:
        raise ContractError("level-0 cells cannot be coarsened")
    region = _coarsening_region(mesh, Q)
    out = set()
    for c in marked:
        if c.level >= Q.level + m - 2:
            a = c.ancestor(Q.level).index
            if all(lo <= i <= hi for i, (lo, hi) in zip(a, region)):
                out.add(c)
    return out


def refine_closure(mesh: HierarchicalMesh, cells: Iterable[CellId], m: int | None = None) -> tuple[set, set]:
    """Recursive closure of ``cells`` under the refinement neighborhood.

    Returns (cells to refine, cells skipped because they sit at the level cap).
    """
    m = mesh.m if m is None else m
    todo = list(cells)
    out: set[CellId] = set()
    skipped: set[CellId] = set()
    while todo:
        Q = todo.pop()
        if Q in out or Q in skipped:
            continue
        if Q.level >= mesh.max_levels - 1:
            skipped.add(Q)
            continue
        out.add(Q)
        todo.extend(refinement_neighborhood(mesh, Q, m) - out)
    return out, skipped


def refine(mesh: HierarchicalMesh, cells: Iterable[CellId], m: int | None = None) -> RefineReport:
    """Refine cells and their recursive neighborhood closure in place."""
    cells = list(cells)
    for c in cells:
        if not mesh.is_active(c):
            raise ContractError(f"cell {c} is not active")
    closure, skipped = refine_closure(mesh, cells, m)
    for c in closure:
        mesh._ensure_level(c.level + 1)
        mesh.domains[c.level + 1][mesh._box_slices([(i, i) for i in c.index], 1)] = True
    return RefineReport(frozenset(closure), frozenset(skipped))


def coarsen(mesh: HierarchicalMesh, cells: Iterable[CellId], m: int | None = None) -> set[CellId]:
    """Replace the sibling groups of ``cells`` by their parents; returns the parents."""
    m = mesh.m if m is None else m
    parents = {c.parent() for c in cells}
    for P in parents:
        kids = P.children()
        if not all(mesh.is_active(k) for k in kids):
            raise ContractError(f"siblings of {kids[0]} are not all active leaves")
        if coarsening_neighborhood(mesh, kids[0], m):
            raise ContractError(f"coarsening {kids[0]} violates admissibility")
    for P in parents:
        mesh.domains[P.level + 1][mesh._box_slices([(i, i) for i in P.index], 1)] = False
    mesh._trim()
    return parents


def is_admissible(mesh: HierarchicalMesh, m: int | None = None) -> tuple[bool, CellId | None]:
    """Check the class-m property on every active cell; returns a witness on failure."""
    m = mesh.m if m is None else m
    space = ThbSpace(mesh)
    lev = space.cell_level
    lo = space.cell_min_function_level()
    bad = np.nonzero(lo < lev - m + 1)[0]
    if bad.size:
        i = int(bad[0])
        return False, space.cells[i]
    return True, None


# ----------------------------------------------------------------------------
# THB space
# ----------------------------------------------------------------------------
def _box_count(S: np.ndarray, lo: list[np.ndarray], hi: list[np.ndarray]) -> np.ndarray:
    """Number of marked cells in boxes [lo, hi] per function via a summed-area table."""
    if len(lo) == 1:
        return S[hi[0] + 1] - S[lo[0]]
    a0, b0 = lo[0][:, None], hi[0][:, None] + 1
    a1, b1 = lo[1][None, :], hi[1][None, :] + 1
    return S[b0, b1] - S[a0, b1] - S[b0, a1] + S[a0, a1]


def _summed(mask: np.ndarray) -> np.ndarray:
    S = np.zeros(tuple(n + 1 for n in mask.shape), dtype=np.int64)
    if mask.ndim == 1:
        S[1:] = np.cumsum(mask)
    else:
        S[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    return S


class ThbSpace:
    """Active truncated basis over a hierarchical mesh.

    ``enriched=True`` builds the same-regularity degree-elevated hierarchy on the
    same cells (each level's basis is elevated separately).
    """

    def __init__(self, mesh: HierarchicalMesh, enriched: bool = False):
        self.mesh = mesh
        self.enriched = bool(enriched)
        self.n_levels = mesh.n_levels
        self.bases = [self._level_basis(lev) for lev in range(self.n_levels)]
        self._build()

    def _level_basis(self, lev: int) -> TensorBasis:
        b = self.mesh.level_basis(lev)
        return b.elevate() if self.enriched else b

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def degree(self) -> tuple[int, ...]:
        return self.bases[0].degree

    # -- construction ------------------------------------------------------------
    def _build(self) -> None:
        mesh, L = self.mesh, self.n_levels
        touch, active = [], []
        for lev in range(L):
            kvs = self.bases[lev].kvs
            spans = [kv.function_spans() for kv in kvs]
            lo = [s[0] for s in spans]
            hi = [s[1] for s in spans]
            area = np.ones(1, dtype=np.int64)
            for a, b in zip(lo, hi):
                area = np.multiply.outer(area, b - a + 1)
            area = area.reshape(self.bases[lev].shape)
            cnt = _box_count(_summed(mesh.domains[lev]), lo, hi)
            inside = cnt == area
            nxt = _box_count(_summed(mesh._children_mask(lev)), lo, hi) == area
            touch.append(np.flatnonzero(cnt > 0))
            active.append(np.flatnonzero(inside & ~nxt))
            setattr(self, f"_inside{lev}", inside.ravel())
        self.level_functions = active
        counts = [len(a) for a in active]
        self.offsets = np.r_[0, np.cumsum(counts)].astype(int)
        N = int(self.offsets[-1])
        self.n_functions = N
        self.function_level = np.repeat(np.arange(L), counts)
        self.function_index = np.concatenate(active) if N else np.zeros(0, dtype=int)

        # truncated representation on each level, restricted to touched rows
        self._touch = touch
        self._T: list[sp.csr_matrix] = []
        for lev in range(L):
            rows = touch[lev]
            pos = np.full(self.bases[lev].n_functions, -1, dtype=int)
            pos[rows] = np.arange(rows.size)
            E = sp.csr_matrix(
                (np.ones(counts[lev]), (pos[active[lev]], self.offsets[lev] + np.arange(counts[lev]))),
                shape=(rows.size, N),
            )
            if lev == 0:
                T = E
            else:
                R = self._restricted_subdivision(lev)
                T = R @ self._T[lev - 1]
                keep = ~getattr(self, f"_inside{lev}")[rows]
                T = sp.diags(keep.astype(float)) @ T
                T = (T + E).tocsr()
                T.eliminate_zeros()
            self._T.append(T)
        self._cell_tables()

    def _subdivision_1d(self, lev: int) -> list[sp.csr_matrix]:
        out = []
        for kc, kf in zip(self.bases[lev - 1].kvs, self.bases[lev].kvs):
            M = _insertion_matrix(kc, kf)
            M[np.abs(M) < 1e-15] = 0.0
            out.append(sp.csr_matrix(M))
        return out

    def _restricted_subdivision(self, lev: int) -> sp.csr_matrix:
        """Subdivision matrix between touched rows of level lev and lev-1."""
        Rs = self._subdivision_1d(lev)
        rows = self._touch[lev]
        cols = self._touch[lev - 1]
        fshape = self.bases[lev].shape
        cshape = self.bases[lev - 1].shape
        cpos = np.full(int(np.prod(cshape)), -1, dtype=int)
        cpos[cols] = np.arange(cols.size)
        fidx = np.unravel_index(rows, fshape)
        # padded nonzero pattern per direction
        pats = []
        for R, fi in zip(Rs, fidx):
            nnz = np.diff(R.indptr)
            w = nnz.max()
            J = np.full((R.shape[0], w), -1, dtype=int)
            V = np.zeros((R.shape[0], w))
            for r in range(R.shape[0]):
                s, e = R.indptr[r], R.indptr[r + 1]
                J[r, : e - s] = R.indices[s:e]
                V[r, : e - s] = R.data[s:e]
            pats.append((J[fi], V[fi]))
        if len(pats) == 1:
            J, V = pats[0]
            cflat = J
        else:
            (J0, V0), (J1, V1) = pats
            cflat = np.where(
                (J0[:, :, None] >= 0) & (J1[:, None, :] >= 0), J0[:, :, None] * cshape[1] + J1[:, None, :], -1
            ).reshape(len(rows), -1)
            V = (V0[:, :, None] * V1[:, None, :]).reshape(len(rows), -1)
        rr = np.repeat(np.arange(len(rows)), cflat.shape[1]).reshape(cflat.shape)
        ok = (cflat >= 0) & (V != 0)
        cc = cpos[cflat[ok]]
        good = cc >= 0
        return sp.csr_matrix(
            (V[ok][good], (rr[ok][good], cc[good])), shape=(len(rows), cols.size)
        )

    def _cell_tables(self) -> None:
        """Per active cell: THB functions nonzero there and their local coefficients."""
        mesh = self.mesh
        levels, idxs, funs, coefs = [], [], [], []
        self.nloc = int(np.prod([p + 1 for p in self.degree]))
        for lev in range(self.n_levels):
            cells = np.argwhere(mesh.active_mask(lev))
            if cells.size == 0:
                continue
            basis = self.bases[lev]
            first = np.stack([kv.span_functions()[cells[:, k]] for k, kv in enumerate(basis.kvs)], axis=1)
            loc = basis.local_indices(first)  # (nc, nloc)
            pos = np.full(basis.n_functions, -1, dtype=int)
            pos[self._touch[lev]] = np.arange(self._touch[lev].size)
            sub = self._T[lev][pos[loc.ravel()]].tocoo()
            nc = len(cells)
            cell_of = sub.row // self.nloc
            a = sub.row % self.nloc
            order = np.lexsort((sub.col, cell_of))
            cell_of, a, col, val = cell_of[order], a[order], sub.col[order], sub.data[order]
            key = cell_of.astype(np.int64) * (self.n_functions + 1) + col
            uniq, inv = np.unique(key, return_inverse=True)
            ucell = uniq // (self.n_functions + 1)
            ufun = uniq % (self.n_functions + 1)
            start = np.searchsorted(ucell, np.arange(nc))
            slot = np.arange(uniq.size) - start[ucell]
            nmax = int(slot.max()) + 1
            F = np.full((nc, nmax), -1, dtype=int)
            F[ucell, slot] = ufun
            C = np.zeros((nc, nmax, self.nloc))
            C[cell_of, slot[inv], a] = val
            levels.append(np.full(nc, lev))
            idxs.append(cells)
            funs.append(F)
            coefs.append(C)
        nmax = max(F.shape[1] for F in funs)
        self.cell_level = np.concatenate(levels)
        self.cell_index = np.concatenate(idxs)
        self.cell_funs = np.concatenate([np.pad(F, ((0, 0), (0, nmax - F.shape[1])), constant_values=-1) for F in funs])
        self.cell_coef = np.concatenate([np.pad(C, ((0, 0), (0, nmax - C.shape[1]), (0, 0))) for C in coefs])
        self.cells = [CellId(int(lv), tuple(int(i) for i in ix)) for lv, ix in zip(self.cell_level, self.cell_index)]
        self.cell_lookup = {c: k for k, c in enumerate(self.cells)}

    # -- queries -------------------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_min_function_level(self) -> np.ndarray:
        lv = np.where(self.cell_funs >= 0, self.function_level[np.maximum(self.cell_funs, 0)], 1 << 30)
        return lv.min(axis=1)

    def cell_boxes(self) -> np.ndarray:
        """(ncells, dim, 2) parametric boxes."""
        out = np.empty((self.n_cells, self.dim, 2))
        for lev in np.unique(self.cell_level):
            sel = self.cell_level == lev
            br = self.mesh.breaks(int(lev))
            for k in range(self.dim):
                i = self.cell_index[sel, k]
                out[sel, k, 0] = br[k][i]
                out[sel, k, 1] = br[k][i + 1]
        return out

    def function_tensor_index(self, g) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        """Level and per-direction tensor index of global functions ``g``."""
        g = np.asarray(g)
        lev = self.function_level[g]
        out = [np.empty(g.shape, dtype=int) for _ in range(self.dim)]
        for ell in np.unique(lev):
            sel = lev == ell
            ix = np.unravel_index(self.function_index[g[sel]], self.bases[int(ell)].shape)
            for k in range(self.dim):
                out[k][sel] = ix[k]
        return lev, tuple(out)

    def cell_values(self, cells: np.ndarray, pts: np.ndarray, nd: int = 2) -> np.ndarray:
        """THB values at points inside the given cells.

        ``cells`` (npts,) are cell numbers, ``pts`` (npts, dim). Returns an array
        (npts, ntypes, nfmax) aligned with ``cell_funs[cells]``.
        """
        cells = np.asarray(cells)
        pts = np.atleast_2d(pts)
        ntypes = sum(1 for ty in derivative_types(self.dim) if sum(ty) <= nd)
        out = np.zeros((len(cells), ntypes, self.cell_funs.shape[1]))
        lv = self.cell_level[cells]
        for ell in np.unique(lv):
            sel = np.nonzero(lv == ell)[0]
            _, vals = self.bases[int(ell)].local_derivs(pts[sel], nd, cells=self.cell_index[cells[sel]])
            out[sel] = np.einsum("qfl,qtl->qtf", self.cell_coef[cells[sel]], vals)
        return out

    def locate(self, pts) -> np.ndarray:
        lev, idx = self.mesh.locate(pts)
        return np.array([self.cell_lookup[CellId(int(l), tuple(int(i) for i in ix))] for l, ix in zip(lev, idx)])

    def evaluate_basis(self, pts, nd: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(function ids (npts, nfmax) padded with -1, values (npts, ntypes, nfmax))."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells = self.locate(pts)
        return self.cell_funs[cells], self.cell_values(cells, pts, nd)

    def evaluate(self, coefs: np.ndarray, pts, nd: int = 0) -> np.ndarray:
        """Field values (npts, ntypes, ncomp) for coefficients (n_functions, ncomp)."""
        coefs = np.asarray(coefs, dtype=float).reshape(self.n_functions, -1)
        F, V = self.evaluate_basis(pts, nd)
        c = np.where((F >= 0)[:, :, None], coefs[np.maximum(F, 0)], 0.0)
        return np.einsum("qtf,qfc->qtc", V, c)

    def quadrature(self, n_per_dir: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tensor Gauss rule on all active cells: (cell ids, points, weights)."""
        n = max(self.degree) + 1 if n_per_dir is None else int(n_per_dir)
        x, w = gauss_legendre(n)
        if self.dim == 1:
            X, W = x[:, None], w
        else:
            X = np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)
            W = np.outer(w, w).ravel()
        box = self.cell_boxes()
        h = box[:, :, 1] - box[:, :, 0]
        pts = box[:, None, :, 0] + X[None] * h[:, None, :]
        wts = W[None, :] * np.prod(h, axis=1)[:, None]
        cells = np.repeat(np.arange(self.n_cells), len(W)).reshape(self.n_cells, -1)
        return cells, pts, wts

    # -- quasi-interpolation helpers --------------------------------------------------
    @cached_property
    def representative_cells(self) -> np.ndarray:
        """For each active function, one active cell of its own level in its support."""
        best = np.full(self.n_functions, -1, dtype=int)
        dist = np.full(self.n_functions, np.inf)
        lev_f = self.function_level
        # centre of each function's support on its level grid
        centre = np.zeros((self.n_functions, self.dim))
        for ell in range(self.n_levels):
            sel = np.nonzero(lev_f == ell)[0]
            if sel.size == 0:
                continue
            ix = np.unravel_index(self.function_index[sel], self.bases[ell].shape)
            for k, kv in enumerate(self.bases[ell].kvs):
                lo, hi = kv.function_spans()
                centre[sel, k] = 0.5 * (lo[ix[k]] + hi[ix[k]])
        for c in range(self.n_cells):
            ell = self.cell_level[c]
            for f in self.cell_funs[c]:
                if f < 0 or lev_f[f] != ell:
                    continue
                d = float(np.sum((self.cell_index[c] - centre[f]) ** 2))
                if d < dist[f]:
                    dist[f], best[f] = d, c
        return best

    def greville_points(self) -> np.ndarray:
        """Greville abscissae of the active functions (on their own level)."""
        out = np.zeros((self.n_functions, self.dim))
        for ell in range(self.n_levels):
            sel = np.nonzero(self.function_level == ell)[0]
            if sel.size == 0:
                continue
            ix = np.unravel_index(self.function_index[sel], self.bases[ell].shape)
            for k, kv in enumerate(self.bases[ell].kvs):
                out[sel, k] = kv.greville()[ix[k]]
        return out

    def __repr__(self) -> str:
        return f"ThbSpace(n_functions={self.n_functions}, n_cells={self.n_cells}, degree={self.degree}, enriched={self.enriched})"


def eval_thb(space: ThbSpace, u: float, v: float | None = None, max_order: int = 0) -> list[tuple]:
    """Nonzero THB functions at a point: (id, value, gradient, hessian) tuples."""
    pt = [u] if v is None else [u, v]
    F, V = space.evaluate_basis([pt], max_order)
    types = [ty for ty in derivative_types(space.dim) if sum(ty) <= max_order]
    out = []
    for j, f in enumerate(F[0]):
        if f < 0:
            continue
        vals = dict(zip(types, V[0, :, j]))
        grad = np.array([vals[ty] for ty in types if sum(ty) == 1]) if max_order >= 1 else None
        hess = None
        if max_order >= 2:
            if space.dim == 1:
                hess = np.array([[vals[(2,)]]])
            else:
                hess = np.array([[vals[(2, 0)], vals[(1, 1)]], [vals[(1, 1)], vals[(0, 2)]]])
        out.append((int(f), float(V[0, 0, j]), grad, hess))
    return out
