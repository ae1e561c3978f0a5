"""Randomised property checks shared by the test-suite and ``goaliga verify``.

Each ``check_*`` function returns a :class:`CheckResult` with the worst
observed deviation and the threshold it was compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import KnotVector, TensorBasis, basis_derivs
from .thb import (
    CellId,
    HierarchicalMesh,
    ThbSpace,
    coarsen,
    coarsening_neighborhood,
    coarsening_neighborhood_marked,
    is_admissible,
    refine,
    refine_closure,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: worst={self.worst:.3e} threshold={self.threshold:.1e} {self.detail}".rstrip()


def cox_de_boor(t: np.ndarray, p: int, i: int, u: float) -> float:
    """Textbook recursive B-spline value (right-closed on the last knot)."""
    t = np.asarray(t, dtype=float)
    if p == 0:
        if t[i] <= u < t[i + 1]:
            return 1.0
        last = np.nonzero(t < t[-1])[0][-1]
        return 1.0 if (u == t[-1] and i == last) else 0.0
    out = 0.0
    d1 = t[i + p] - t[i]
    if d1 > 0:
        out += (u - t[i]) / d1 * cox_de_boor(t, p - 1, i, u)
    d2 = t[i + p + 1] - t[i + 1]
    if d2 > 0:
        out += (t[i + p + 1] - u) / d2 * cox_de_boor(t, p - 1, i + 1, u)
    return out


def random_mesh(
    rng: np.random.Generator,
    degree: int = 2,
    base_cells: int = 4,
    steps: int = 4,
    max_levels: int = 5,
    m: int = 2,
    dim: int = 2,
    coarsen_steps: bool = True,
) -> HierarchicalMesh:
    """Admissible mesh obtained by random refine (and optional coarsen) steps."""
    kvs = tuple(KnotVector.uniform(degree, base_cells) for _ in range(dim))
    mesh = HierarchicalMesh(TensorBasis(kvs), max_levels=max_levels, m=m)
    for _ in range(steps):
        cells = mesh.active_cells()
        k = max(1, int(rng.integers(1, max(2, len(cells) // 6))))
        pick = rng.choice(len(cells), size=k, replace=False)
        refine(mesh, [cells[i] for i in pick])
        if coarsen_steps and rng.random() < 0.5:
            cand = coarsenable_groups(mesh)
            if cand:
                sel = rng.choice(len(cand), size=max(1, len(cand) // 3), replace=False)
                coarsen(mesh, [cand[i] for i in sel])
    return mesh


def coarsenable_groups(mesh: HierarchicalMesh, marked: set | None = None) -> list[CellId]:
    """First child of every parent whose coarsening passes the combined test."""
    seen = set()
    out = []
    for c in mesh.active_cells():
        if c.level == 0:
            continue
        P = c.parent()
        if P in seen:
            continue
        seen.add(P)
        kids = P.children()
        if not all(mesh.is_active(k) for k in kids):
            continue
        if marked and any(k in marked for k in kids):
            continue
        if coarsening_neighborhood(mesh, kids[0]):
            continue
        if marked and coarsening_neighborhood_marked(mesh, kids[0], None, marked):
            continue
        out.append(kids[0])
    return out


def check_partition_of_unity(n_meshes: int = 5, n_points: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_meshes):
        mesh = random_mesh(rng, degree=1 + k % 3, steps=3)
        for enriched in (False, True):
            space = ThbSpace(mesh, enriched=enriched)
            _, V = space.evaluate_basis(rng.random((n_points, 2)), 0)
            worst = max(worst, float(np.abs(V[:, 0].sum(1) - 1).max()))
    return CheckResult("partition of unity", worst <= 1e-12, worst, 1e-12)


def check_admissibility(n_sequences: int = 200, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for k in range(n_sequences):
        mesh = random_mesh(rng, degree=1 + k % 3, base_cells=2 + k % 3, steps=6, max_levels=6)
        ok, _ = is_admissible(mesh)
        area = abs(mesh.total_area() - 1.0)
        failures += (not ok) or area > 1e-12
    return CheckResult("admissibility invariant", failures == 0, float(failures), 0.0, f"({n_sequences} sequences)")


def check_two_path(n_cases: int = 50, seed: int = 2) -> CheckResult:
    """Combined coarsening test on the old mesh equals plain test after refining."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    checked = 0
    for k in range(n_cases):
        mesh = random_mesh(rng, degree=1 + k % 3, steps=3, max_levels=6)
        cells = mesh.active_cells()
        pick = rng.choice(len(cells), size=max(1, len(cells) // 8), replace=False)
        M_r, _ = refine_closure(mesh, [cells[i] for i in pick])
        after = mesh.copy()
        refine(after, M_r)
        for c in cells:
            if c.level == 0 or c in M_r:
                continue
            kids = c.parent().children()
            if any(s in M_r for s in kids) or not all(mesh.is_active(s) for s in kids):
                continue
            old = bool(coarsening_neighborhood(mesh, c) | coarsening_neighborhood_marked(mesh, c, None, M_r))
            new = bool(coarsening_neighborhood(after, c))
            mismatches += old != new
            checked += 1
    return CheckResult("two-path coarsening equivalence", mismatches == 0, float(mismatches), 0.0, f"({checked} cells)")


def check_de_boor(n_points: int = 200, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in (1, 2, 3, 4):
        inner = np.sort(rng.random(5))
        kv = KnotVector(p, np.r_[[0.0] * (p + 1), inner, [1.0] * (p + 1)])
        u = rng.random(n_points)
        first, d = basis_derivs(kv, u, 0)
        for q in range(n_points):
            for r in range(p + 1):
                ref = cox_de_boor(kv.knots, p, first[q] + r, u[q])
                worst = max(worst, abs(ref - d[q, 0, r]))
    return CheckResult("basis vs recursive de Boor", worst <= 1e-14, worst, 1e-14)


def _curved_problem(pressure: float = 0.0):
    from .bench.geometries import cylinder_panel
    from .shell import EdgeLoad, Material, PointLoad, ShellProblem

    g = cylinder_panel(1.0, np.pi / 3, 1.0, 0.05, 3)
    return ShellProblem(
        g,
        Material(1000.0, 0.3, 1.0),
        surface_load=(0.0, 0.0, -1.0),
        pressure=pressure,
        point_loads=(PointLoad((0.3, 0.7), (1.0, 2.0, 3.0)),),
        edge_loads=(EdgeLoad("u1", (0.5, 0.0, 0.0)),),
    )


def _refined_space(degree: int = 3) -> ThbSpace:
    from .bench.geometries import analysis_basis

    mesh = HierarchicalMesh.uniform(analysis_basis(degree), 2, max_levels=5)
    refine(mesh, [CellId(2, (1, 1))])
    return ThbSpace(mesh)


def check_tangent_fd(seed: int = 4, h: float = 1e-6) -> CheckResult:
    """Central differences of the residual against the tangent (dead and follower loads)."""
    from .shell import assembler

    rng = np.random.default_rng(seed)
    space = _refined_space()
    worst = 0.0
    for pressure in (0.0, 2.0):
        asm = assembler(_curved_problem(pressure), space)
        u = 0.05 * rng.standard_normal(asm.n_dofs)
        d = rng.standard_normal(asm.n_dofs)
        K = asm.tangent(u, 0.7)
        fd = (asm.residual(u + h * d, 0.7) - asm.residual(u - h * d, 0.7)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - K @ d) / np.linalg.norm(fd)))
    return CheckResult("tangent vs finite differences", worst <= 1e-5, worst, 1e-5)


def check_quasi_interpolation(seed: int = 5) -> CheckResult:
    """Random in-space fields are reproduced by the quasi-interpolant."""
    from .adapt import quasi_interpolate

    rng = np.random.default_rng(seed)
    worst = 0.0
    for degree in (2, 3):
        mesh = random_mesh(rng, degree=degree, steps=4, max_levels=6, coarsen_steps=False)
        space = ThbSpace(mesh)
        c = rng.standard_normal((space.n_functions, 2))
        back = quasi_interpolate(lambda x: space.evaluate(c, x, 0)[:, 0, :], space)
        worst = max(worst, float(np.abs(back - c).max()))
    return CheckResult("quasi-interpolation reproduction", worst <= 1e-10, worst, 1e-10)


def _small_static():
    from .shell import Constraint, Material, ShellProblem
    from .solve import newton_solve
    from .bench.geometries import cylinder_panel

    g = cylinder_panel(1.0, np.pi / 3, 1.0, 0.05, 3)
    problem = ShellProblem(g, Material(1000.0, 0.3), (Constraint("v0"), Constraint("v1")), surface_load=(0.0, 0.0, -1.0))
    space = _refined_space()
    return problem, newton_solve(problem, space, 1.0)


def check_galerkin_orthogonality() -> CheckResult:
    """Reduced residual of a converged Newton state against every primal function."""
    from .shell import assembler

    problem, state = _small_static()
    asm = assembler(problem, state.space)
    cm = asm.constraint_map()
    r = np.linalg.norm(cm.reduce(asm.residual(state.u, state.lam)))
    scale = np.linalg.norm(cm.reduce(asm.load_vector()))
    worst = float(r / scale)
    return CheckResult("Galerkin orthogonality", worst <= 1e-10, worst, 1e-10, "(relative to the load)")


def check_additivity() -> CheckResult:
    """Cell indicators sum to the globally assembled residual weighted by the dual difference."""
    from .adapt import transfer
    from .dwr import GoalFunctional, enriched_space, solve_dual, solve_dual_enriched, estimate_static
    from .shell import assembler

    problem, state = _small_static()
    goal = GoalFunctional("displacement")
    space_e = enriched_space(state.space)
    xi_h = solve_dual(problem, state, goal)
    _, xi_e = solve_dual_enriched(problem, state, goal, space_e)
    ef = estimate_static(problem, state, xi_h, space_e, xi_e)
    u_e = transfer(state.space, state.u, space_e)
    w = xi_e - transfer(state.space, xi_h, space_e)
    glob = -float(assembler(problem, space_e).residual(u_e, state.lam) @ w)
    worst = abs(float(ef.r.sum()) - glob) / max(abs(glob), 1e-300)
    return CheckResult("sum of cell indicators", worst <= 1e-12 or abs(glob) < 1e-300, worst, 1e-12, "(relative)")


ALL_CHECKS = (
    check_partition_of_unity,
    check_admissibility,
    check_two_path,
    check_de_boor,
    check_tangent_fd,
    check_quasi_interpolation,
    check_galerkin_orthogonality,
    check_additivity,
)


def run_all(checks=ALL_CHECKS) -> list[CheckResult]:
    return [c() for c in checks]
