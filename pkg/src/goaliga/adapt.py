"""Dörfler marking with admissibility neighborhoods, tolerance-band control,
quasi-interpolation transfer and the goal-adaptive loop."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dwr import ErrorField, GoalFunctional, estimate_goal, goal_value
from .errors import ContractError, EstimatorError, NonConvergenceError, ResourceLimitError, SolverError
from .shell import ShellProblem, StateVector
from .solve import ArcLengthConfig, crisfield_step, linear_static, newton_solve
from .thb import (
    CellId,
    HierarchicalMesh,
    ThbSpace,
    coarsen,
    coarsening_neighborhood,
    coarsening_neighborhood_marked,
    gauss_legendre,
    refine,
    refine_closure,
)

__all__ = [
    "MarkConfig",
    "Decision",
    "Continuation",
    "AdaptiveResult",
    "mark_refine",
    "mark_coarsen",
    "band_decision",
    "quasi_interpolate",
    "transfer",
    "adapt_mesh",
    "adaptive_loop",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarkConfig:
    """Marking fractions, tolerance band and inner-iteration cap."""

    rho_r: float = 0.5
    rho_c: float = 0.05
    tol_r: float = 1e-10
    tol_c: float = 1e-8
    max_iter: int = 5
    rho_c_min: float | None = None

    def __post_init__(self):
        for name in ("rho_r", "rho_c"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError("%s must lie in (0, 1)" % name)
        if not self.tol_r <= self.tol_c:
            raise ValueError("tol_r must not exceed tol_c")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


class Decision(NamedTuple):
    refine: bool
    coarsen: bool
    stop: bool


def _order(space: ThbSpace, s: np.ndarray, descending: bool) -> np.ndarray:
    # ties broken by (level, i, j)
    keys = [space.cell_index[:, d] for d in range(space.dim - 1, -1, -1)]
    keys += [space.cell_level, -s if descending else s]
    return np.lexsort(keys)


def mark_refine(
    mesh: HierarchicalMesh, space: ThbSpace, s: np.ndarray, rho_r: float, m: int | None = None
) -> tuple[set[CellId], float]:
    """Dörfler refinement marking over the squared indicators ``s``.

    Each accepted cell brings its recursive refinement-neighborhood closure;
    the indicator mass of the closure is accounted.  The sweep stops at the
    first cell whose closure would push the accounted mass above ``rho_r``
    times the refinable mass (the first cell is always taken).  Cells at the
    level cap are skipped and their mass returned as ``blocked``.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ContractError("refinement indicators must be non-negative")
    marked: set[CellId] = set()
    cap = mesh.max_levels - 1
    at_cap = space.cell_level >= cap
    blocked = float(s[at_cap].sum())
    # the target is a fraction of the error that refinement can still reach
    e = float(s.sum()) - blocked
    if e <= 0:
        return marked, blocked
    bound = rho_r * e * (1 + 1e-12)
    acc = 0.0
    for k in _order(space, s, True):
        Q = space.cells[k]
        if at_cap[k]:
            continue
        if Q in marked:
            continue
        closure, _ = refine_closure(mesh, [Q], m)
        new = closure - marked
        add = sum(s[space.cell_lookup[c]] for c in new if c in space.cell_lookup)
        if marked and acc + add > bound:
            break
        marked |= new
        acc += add
        if acc >= bound:
            break
    return marked, float(blocked)


def mark_coarsen(
    mesh: HierarchicalMesh,
    space: ThbSpace,
    s: np.ndarray,
    rho_c: float,
    m: int | None = None,
    refined: set[CellId] | frozenset = frozenset(),
) -> set[CellId]:
    """Ascending sweep for coarsening.

    A cell is accepted when both its coarsening neighborhood and its marked
    neighborhood with respect to ``refined`` are empty and no sibling is marked
    for refinement; the accepted mass stays at most ``rho_c e``.  Only complete
    sibling groups are returned.
    """
    s = np.asarray(s, dtype=float)
    e = float(s.sum())
    accepted: set[CellId] = set()
    if e <= 0 and not np.all(s == 0):
        return accepted
    bound = rho_c * e
    acc = 0.0
    refined = set(refined)
    for k in _order(space, s, False):
        Q = space.cells[k]
        if Q.level == 0:
            continue
        if acc + s[k] > bound:
            break
        P = Q.parent()
        kids = P.children()
        if any(c in refined for c in kids):
            continue
        if not all(c in space.cell_lookup for c in kids):
            continue
        if coarsening_neighborhood(mesh, Q, m) or coarsening_neighborhood_marked(mesh, Q, m, refined):
            continue
        accepted.add(Q)
        acc += s[k]
    return {c for c in accepted if all(k in accepted for k in c.parent().children())}


def band_decision(dL: float, config: MarkConfig) -> Decision:
    """Refine above the band, coarsen below it, do both and stop inside it.

    A band covering every value (``tol_r = -inf``, ``tol_c = inf``) disables
    adaptation altogether.
    """
    if math.isinf(config.tol_r) and math.isinf(config.tol_c):
        return Decision(False, False, True)
    a = abs(dL)
    if a > config.tol_c:
        return Decision(True, False, False)
    if a < config.tol_r:
        return Decision(False, True, False)
    return Decision(True, True, True)


def adapt_mesh(
    mesh: HierarchicalMesh, space: ThbSpace, ef: ErrorField, config: MarkConfig, decision: Decision
) -> tuple[HierarchicalMesh, dict]:
    """New mesh after simultaneous refinement and coarsening; the input mesh is untouched."""
    m = mesh.m
    s = ef.s
    refined: set[CellId] = set()
    blocked = 0.0
    if decision.refine:
        refined, blocked = mark_refine(mesh, space, s, config.rho_r, m)
    coarse: set[CellId] = set()
    if decision.coarsen:
        coarse = mark_coarsen(mesh, space, s, config.rho_c, m, refined)
    new = mesh.copy()
    if refined:
        refine(new, refined, m)
    done = 0
    for P in sorted({c.parent() for c in coarse}):
        try:
            coarsen(new, [P.children()[0]], m)
            done += 1
        except ContractError:
            log.debug("coarsening of %s skipped", P)
    return new, {"refined": len(refined), "coarsened": done, "blocked_marked": blocked}


# ----------------------------------------------------------------------------
# transfer
# ----------------------------------------------------------------------------
def quasi_interpolate(f: Callable, target: ThbSpace) -> np.ndarray:
    """Coefficients (n_functions, ncomp) of a local quasi-interpolant of ``f``.

    ``f(points) -> (npts, ncomp)``.  Each coefficient comes from interpolating
    ``f`` in the tensor space of the function's own level on one active cell
    of that level inside its support (Gauss points, ``(p+1)^d`` of them).
    Functions of the target space are reproduced exactly.
    """
    rep = target.representative_cells
    if np.any(rep < 0):
        raise ContractError("active function without an active cell of its level")
    p = target.degree
    grids = [gauss_legendre(q + 1)[0] for q in p]
    X = np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, target.dim)
    box = target.cell_boxes()
    out = None
    for ell in np.unique(target.function_level):
        fs = np.flatnonzero(target.function_level == ell)
        cells = rep[fs]
        lo, hi = box[cells, :, 0], box[cells, :, 1]
        pts = lo[:, None, :] + X[None] * (hi - lo)[:, None, :]
        vals = np.asarray(f(pts.reshape(-1, target.dim)), dtype=float)
        vals = vals.reshape(len(fs), X.shape[0], -1)
        if out is None:
            out = np.zeros((target.n_functions, vals.shape[2]))
        basis = target.bases[int(ell)]
        cidx = np.repeat(target.cell_index[cells], X.shape[0], axis=0)
        first, V = basis.local_derivs(pts.reshape(-1, target.dim), 0, cells=cidx)
        V = V[:, 0].reshape(len(fs), X.shape[0], -1)
        loc = basis.local_indices(first.reshape(len(fs), X.shape[0], -1)[:, 0])
        pos = np.argmax(loc == target.function_index[fs][:, None], axis=1)
        try:
            C = np.linalg.solve(V, vals)
        except np.linalg.LinAlgError:
            warnings.warn("singular local interpolation system; using least squares", RuntimeWarning)
            C = np.stack([np.linalg.lstsq(V[i], vals[i], rcond=None)[0] for i in range(len(fs))])
        out[fs] = C[np.arange(len(fs)), pos]
    return out


def transfer(space: ThbSpace, coefs: np.ndarray, target: ThbSpace) -> np.ndarray:
    """Displacement coefficients moved to ``target`` (flat, length 3 n)."""
    c = np.asarray(coefs, dtype=float).reshape(-1, 3)
    return quasi_interpolate(lambda x: space.evaluate(c, x, 0)[:, 0, :], target).ravel()


# ----------------------------------------------------------------------------
# adaptive loop
# ----------------------------------------------------------------------------
@dataclass
class Continuation:
    """Load stepping for the adaptive loop.

    ``kind='linear'`` solves one linear step at ``lam=1``; ``'load'`` runs
    Newton at ``lams``; ``'arclength'`` takes ``n_steps`` Crisfield steps.
    """

    kind: str = "linear"
    lams: tuple = (1.0,)
    arc: ArcLengthConfig | None = None
    n_steps: int = 0
    lam_max: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "load", "arclength"):
            raise ValueError("unknown continuation kind %r" % self.kind)
        if self.kind == "arclength" and (self.arc is None or self.n_steps < 1):
            raise ValueError("arc-length continuation needs a config and a step count")

    @property
    def steps(self) -> int:
        if self.kind == "linear":
            return 1
        if self.kind == "load":
            return len(self.lams)
        return self.n_steps


@dataclass
class AdaptiveResult:
    history: list[dict] = field(default_factory=list)
    states: list[StateVector] = field(default_factory=list)
    meshes: list[HierarchicalMesh] = field(default_factory=list)
    error: Exception | None = None


def adaptive_loop(
    problem: ShellProblem,
    goal: GoalFunctional,
    mesh: HierarchicalMesh,
    config: MarkConfig,
    continuation: Continuation,
    monitor: Callable | None = None,
    adapt: bool = True,
    keep_meshes: bool = False,
    start: StateVector | None = None,
    time_limit: float | None = None,
    max_dofs: int | None = None,
) -> AdaptiveResult:
    """Goal-adaptive stepping.

    For each load step: solve on the current mesh from the (transferred)
    previous state, estimate, decide by the band, adapt, and re-solve the
    step until the estimate is in band or ``config.max_iter`` solves were made.
    The mesh left by the last adaptation is used for the next step.  With
    ``adapt=False`` the loop only solves and estimates.  ``start`` is an
    equilibrium state on ``mesh`` to continue from (e.g. the end of a load
    ramp); it also seeds the Newton iteration of load-controlled steps.
    With ``time_limit`` (seconds) or ``max_dofs`` (total, constrained
    included) the loop stops before a solve that would exceed them and
    records a ``ResourceLimitError``.
    """
    res = AdaptiveResult()
    base_mesh = mesh.copy()
    space = ThbSpace(mesh) if start is None else start.space
    prev: StateVector | None = start
    prev_inc = None
    t0 = time.perf_counter()
    for step in range(1, continuation.steps + 1):
        for it in range(config.max_iter):
            if time_limit is not None and time.perf_counter() - t0 > time_limit:
                res.error = ResourceLimitError("time limit of %.0f s reached at step %d" % (time_limit, step))
                return res
            if max_dofs is not None and 3 * space.n_functions > max_dofs:
                res.error = ResourceLimitError("%d dofs exceed the limit of %d at step %d" % (3 * space.n_functions, max_dofs, step))
                return res
            try:
                state, inc = _solve_step(problem, space, continuation, step, prev, prev_inc)
            except NonConvergenceError as exc:
                exc.mesh = space.mesh
                res.error = exc
                return res
            try:
                ef = estimate_goal(problem, state, goal)
            except EstimatorError as exc:
                log.warning("step %d: estimator unavailable (%s); no adaptation", step, exc)
                ef = None
            row = {"step": step, "iteration": it, "lam": state.lam, "dofs": 3 * space.n_functions}
            row["goal"] = goal_value(problem, state, goal)
            if ef is not None:
                rep = ef.report()
                row.update(dL=rep["dL"], e=rep["e"], blocked=rep["blocked"])
            else:
                row.update(dL=math.nan, e=math.nan, blocked=math.nan)
            if monitor is not None:
                row.update(monitor(state))
            dec = band_decision(ef.total, config) if ef is not None else Decision(False, False, True)
            last = dec.stop or it == config.max_iter - 1 or not adapt
            if adapt and (dec.refine or dec.coarsen):
                new_mesh, info = adapt_mesh(space.mesh, space, ef, config, dec)
                if config.rho_c_min is not None and ef.e > 0 and info["coarsened"] == 0 and dec.coarsen and not dec.refine:
                    new_mesh = base_mesh.copy()
                row.update(refined=info["refined"], coarsened=info["coarsened"])
            else:
                new_mesh = space.mesh
            res.history.append(row)
            log.info("step %d it %d: dL=%.3e e=%.3e blocked=%.3e dofs=%d", step, it, row["dL"], row["e"], row["blocked"], row["dofs"])
            changed = new_mesh is not space.mesh
            if last:
                res.states.append(state)
                if keep_meshes:
                    res.meshes.append(space.mesh.copy())
                prev, prev_inc = state, inc
                if changed:
                    new_space = ThbSpace(new_mesh)
                    prev = StateVector(new_space, transfer(space, state.u, new_space), state.lam)
                    if continuation.kind == "arclength":
                        prev = _rebalance(problem, new_space, prev)
                    if inc is not None:
                        prev_inc = (transfer(space, inc[0], new_space), inc[1])
                    space = new_space
                break
            if not changed:
                res.states.append(state)
                prev, prev_inc = state, inc
                break
            new_space = ThbSpace(new_mesh)
            if prev is not None:
                old = prev.space
                prev = StateVector(new_space, transfer(old, prev.u, new_space), prev.lam)
                if continuation.kind == "arclength":
                    prev = _rebalance(problem, new_space, prev)
                if prev_inc is not None:
                    prev_inc = (transfer(old, prev_inc[0], new_space), prev_inc[1])
            space = new_space
        if continuation.lam_max is not None and prev is not None and abs(prev.lam) > continuation.lam_max:
            break
    return res


def _rebalance(problem, space, prev):
    """Re-equilibrate a transferred state at its load factor (best effort)."""
    if prev is None or prev.lam == 0:
        return prev
    try:
        return newton_solve(problem, space, prev.lam, prev, max_iter=12)
    except (NonConvergenceError, SolverError):
        return prev


def _solve_step(problem, space, cont: Continuation, step: int, prev, prev_inc):
    if cont.kind == "linear":
        if problem.linear:
            return linear_static(problem, space, cont.lams[0]), None
        return newton_solve(problem, space, cont.lams[0]), None
    if cont.kind == "load":
        lam = cont.lams[step - 1]
        try:
            return newton_solve(problem, space, lam, prev), None
        except NonConvergenceError:
            if prev is None:
                raise
            # transferred states can start far from equilibrium on a changed mesh
            log.info("step %d: retrying Newton with line search", step)
            return newton_solve(problem, space, lam, prev, max_iter=80, line_search=True), None
    start = prev or StateVector(space, np.zeros(3 * space.n_functions), 0.0)
    return crisfield_step(problem, space, start, cont.arc, prev_inc)
