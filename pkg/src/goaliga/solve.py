"""Analysis drivers: linear and Newton statics, Crisfield arc-length, eigen analyses.

All drivers work in the reduced coordinates of the constraint null space and
return full-length displacement vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContinuationError, NonConvergenceError, SolverError
from .linalg import Factorization, gen_eig_largest, gen_eig_smallest
from .shell import ShellProblem, StateVector, assembler
from .thb import ThbSpace

__all__ = [
    "ArcLengthConfig",
    "EigenResult",
    "linear_static",
    "newton_solve",
    "crisfield_step",
    "arc_length",
    "modal_analysis",
    "buckling_analysis",
]

log = logging.getLogger(__name__)

# inner linear solves of nonlinear iterations only need to be accurate enough
# for the outer iteration to converge
NEWTON_CHECK = 1e-6


@dataclass(frozen=True)
class ArcLengthConfig:
    """Crisfield continuation settings; ``psi = 0`` gives the cylindrical variant."""

    dl: float
    psi: float = 0.0
    max_iter: int = 25
    tol: float = 1e-8
    max_cuts: int = 8
    abs_tol: float = 1e-12

    def __post_init__(self):
        if not self.dl > 0:
            raise ValueError("arc length must be positive")


@dataclass
class EigenResult:
    """Ascending eigenvalues with B-normalized modes (full-length columns)."""

    mu: np.ndarray
    modes: np.ndarray
    critical: np.ndarray | None = None
    space: ThbSpace | None = None
    reduced: np.ndarray | None = field(default=None, repr=False)

    @property
    def omega(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.mu, 0.0))


def linear_static(problem: ShellProblem, space: ThbSpace, lam: float = 1.0) -> StateVector:
    """Solve ``K(0) u = lam F``."""
    asm = assembler(problem, space)
    cm = asm.constraint_map()
    K = cm.reduce_matrix(asm.tangent(np.zeros(asm.n_dofs), 0.0))
    ub = Factorization(K).solve(lam * cm.reduce(asm.load_vector()))
    return StateVector(space, cm.expand(ub), lam)


def newton_solve(
    problem: ShellProblem,
    space: ThbSpace,
    lam: float,
    initial: StateVector | None = None,
    tol: float = 1e-10,
    abs_tol: float = 1e-14,
    max_iter: int = 30,
    inc_tol: float = 1e-12,
    line_search: bool = False,
) -> StateVector:
    """Load-controlled Newton iteration; the returned state carries ``history``.

    Converged when the residual drops below ``tol`` relative to the load, or,
    once the residual has fallen below ``sqrt(tol)`` relative, when the
    correction stalls below ``inc_tol`` relative to the solution (round-off
    floor of badly conditioned tangents).  ``line_search`` halves a correction
    (up to eight times) while it increases the residual norm.
    """
    asm = assembler(problem, space)
    cm = asm.constraint_map()
    u = np.zeros(asm.n_dofs) if initial is None else cm.project(initial.u)
    scale = max(np.linalg.norm(lam * cm.reduce(asm.load_vector())), abs_tol)
    hist = []
    inc = np.inf
    for it in range(max_iter + 1):
        r = cm.reduce(asm.residual(u, lam))
        nr = float(np.linalg.norm(r))
        hist.append(nr)
        stalled = inc <= inc_tol * np.linalg.norm(u) and nr <= np.sqrt(tol) * scale
        if nr <= tol * scale or nr <= abs_tol or stalled:
            st = StateVector(space, u, lam)
            st.history = hist
            return st
        if it == max_iter or not np.isfinite(nr):
            break
        K = cm.reduce_matrix(asm.tangent(u, lam))
        try:
            du = Factorization(K).solve(-r, check=NEWTON_CHECK)
        except SolverError as exc:
            raise NonConvergenceError("tangent factorization failed", state=StateVector(space, u, lam)) from exc
        step = cm.expand(du)
        if line_search:
            alpha = 1.0
            for _ in range(8):
                if np.linalg.norm(cm.reduce(asm.residual(u + alpha * step, lam))) < nr:
                    break
                alpha *= 0.5
            step = alpha * step
            du = alpha * du
        inc = float(np.linalg.norm(du))
        u = u + step
    raise NonConvergenceError(
        "Newton did not converge (residual %.3e)" % hist[-1], state=StateVector(space, u, lam), history=hist
    )


def _roots(a: float, b: float, c: float) -> np.ndarray | None:
    disc = b * b - 4 * a * c
    if disc < 0:
        # tolerate round-off at a tangential intersection
        if disc > -1e-12 * b * b:
            disc = 0.0
        else:
            return None
    s = np.sqrt(disc)
    q = -0.5 * (b + np.copysign(s, b))
    if q == 0:
        return np.array([0.0, 0.0])
    return np.array([q / a, c / q])


def crisfield_step(
    problem: ShellProblem,
    space: ThbSpace,
    state: StateVector,
    config: ArcLengthConfig,
    previous: tuple[np.ndarray, float] | None = None,
    dl: float | None = None,
) -> tuple[StateVector, tuple[np.ndarray, float]]:
    """One converged arc-length increment from a converged ``state``.

    ``previous`` is the last accepted increment ``(du, dlam)`` (full-length);
    it orients the predictor.  Returns the new state and its increment.  On a
    complex root or divergence the arc length is halved up to
    ``config.max_cuts`` times.
    """
    asm = assembler(problem, space)
    cm = asm.constraint_map()
    F = cm.reduce(asm.load_vector())
    FF = float(F @ F)
    u0 = cm.reduce(state.u)
    lam0 = state.lam
    prev = None if previous is None else (cm.reduce(previous[0]), previous[1])
    dl = config.dl if dl is None else dl
    psi2 = config.psi**2
    for cut in range(config.max_cuts + 1):
        try:
            return _crisfield_try(asm, cm, F, FF, u0, lam0, prev, dl, psi2, config, space)
        except (NonConvergenceError, SolverError) as exc:
            log.info("arc-length step failed (%s); halving to %.3e", exc, dl / 2)
            dl /= 2
    raise ContinuationError("arc-length step failed after %d cuts" % config.max_cuts, state=state)


def _crisfield_try(asm, cm, F, FF, u0, lam0, prev, dl, psi2, cfg, space):
    K = cm.reduce_matrix(asm.tangent(cm.expand(u0), lam0))
    fac = Factorization(K)
    ut = fac.solve(F, check=NEWTON_CHECK)
    dlam = dl / np.sqrt(ut @ ut + psi2 * FF)
    if prev is not None:
        if ut @ prev[0] + psi2 * FF * prev[1] < 0:
            dlam = -dlam
    elif fac.det_sign() < 0:
        dlam = -dlam
    Du = dlam * ut
    Dlam = dlam
    scale = max(np.linalg.norm(F), cfg.abs_tol)
    for it in range(cfg.max_iter):
        u = u0 + Du
        lam = lam0 + Dlam
        r = cm.reduce(asm.residual(cm.expand(u), lam))
        nr = float(np.linalg.norm(r))
        con = Du @ Du + psi2 * Dlam**2 * FF - dl**2
        if it > 0 and (nr <= cfg.tol * scale * max(abs(lam), 1.0) or nr <= cfg.abs_tol) and abs(con) <= 1e-10 * dl**2:
            return StateVector(space, cm.expand(u), lam), (cm.expand(Du), Dlam)
        if not np.isfinite(nr):
            break
        K = cm.reduce_matrix(asm.tangent(cm.expand(u), lam))
        fac = Factorization(K)
        ur = fac.solve(-r, check=NEWTON_CHECK)
        ut = fac.solve(F, check=NEWTON_CHECK)
        w = Du + ur
        a = ut @ ut + psi2 * FF
        b = 2 * (ut @ w + psi2 * Dlam * FF)
        c = w @ w + psi2 * Dlam**2 * FF - dl**2
        roots = _roots(a, b, c)
        if roots is None:
            raise NonConvergenceError("complex arc-length roots")
        best, score = None, -np.inf
        for dl_ in roots:
            cand = w + dl_ * ut
            cos = (cand @ Du + psi2 * (Dlam + dl_) * Dlam * FF) / max(
                np.sqrt((cand @ cand + psi2 * (Dlam + dl_) ** 2 * FF) * (Du @ Du + psi2 * Dlam**2 * FF)), 1e-300
            )
            # on a tie prefer the larger load increment
            if cos > score + 1e-12 or (abs(cos - score) <= 1e-12 and best is not None and dl_ > best):
                best, score = dl_, cos
        Du = w + best * ut
        Dlam = Dlam + best
    raise NonConvergenceError("arc-length corrector did not converge")


def arc_length(
    problem: ShellProblem,
    space: ThbSpace,
    config: ArcLengthConfig,
    n_steps: int,
    monitor=None,
    start: StateVector | None = None,
    lam_max: float | None = None,
) -> list[dict]:
    """Trace ``n_steps`` arc-length increments; ``monitor(state)`` adds columns."""
    state = start or StateVector(space, np.zeros(3 * space.n_functions), 0.0)
    prev = None
    rows = []
    for step in range(1, n_steps + 1):
        state, prev = crisfield_step(problem, space, state, config, prev)
        row = {"step": step, "lam": state.lam, "norm_u": float(np.linalg.norm(state.u)), "dofs": state.u.size}
        if monitor is not None:
            row.update(monitor(state))
        rows.append(row)
        if lam_max is not None and abs(state.lam) > lam_max:
            break
    return rows


def modal_analysis(problem: ShellProblem, space: ThbSpace, nev: int = 4) -> EigenResult:
    """Free vibration: ``K(0) v = mu M v`` with ``omega = sqrt(mu)``."""
    asm = assembler(problem, space)
    cm = asm.constraint_map()
    K = cm.reduce_matrix(asm.tangent(np.zeros(asm.n_dofs), 0.0))
    M = cm.reduce_matrix(asm.mass())
    mu, V = gen_eig_smallest(K, M, nev)
    return EigenResult(mu, cm.Z @ V, None, space, V)


def buckling_analysis(problem: ShellProblem, space: ThbSpace, lam_L: float = 1e-4, nev: int = 4) -> EigenResult:
    """Linear buckling about the pre-buckling state at ``lam_L``.

    Pencil ``K(u_L) v = mu K(0) v``; the critical factors are
    ``lam_L / (1 - mu)``.  The pencil is solved in the equivalent form
    ``(K(0) - K(u_L)) v = theta K(0) v`` with ``theta = 1 - mu`` which keeps
    the clustered spectrum near ``mu = 1`` well separated.
    """
    asm = assembler(problem, space)
    cm = asm.constraint_map()
    uL = linear_static(problem, space, lam_L)
    K0 = cm.reduce_matrix(asm.tangent(np.zeros(asm.n_dofs), 0.0))
    KL = cm.reduce_matrix(asm.tangent(uL.u, lam_L))
    theta, V = gen_eig_largest(K0 - KL, K0, nev)
    if np.any(theta <= 0):
        raise SolverError("no geometric stiffness softening: pencil eigenvalue mu >= 1", theta=theta)
    return EigenResult(1.0 - theta, cm.Z @ V, lam_L / theta, space, V)
