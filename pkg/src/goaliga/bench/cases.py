"""Benchmark drivers: problem set-up, convergence tables and report files.

Every ``run_*`` function returns a list of row dictionaries with a fixed
column order (see ``COLUMNS``); :func:`run_benchmark` writes them as CSV.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..adapt import Continuation, MarkConfig, adaptive_loop
from ..dwr import GoalFunctional, enriched_space, estimate_eigen, estimate_goal, goal_value
from ..shell import Constraint, EdgeLoad, Material, PointLoad, ShellProblem, StateVector, assembler
from ..solve import ArcLengthConfig, arc_length, buckling_analysis, linear_static, modal_analysis, newton_solve
from ..thb import HierarchicalMesh, ThbSpace
from .analytic import circular_plate_frequencies, manufactured_plate, plate_buckling_loads
from .geometries import analysis_basis, disc, rectangle, roof_quarter

log = logging.getLogger(__name__)

__all__ = [
    "CASES",
    "COLUMNS",
    "BenchmarkCase",
    "plate_static_problem",
    "plate_modal_problem",
    "plate_buckling_problem",
    "membrane_problem",
    "roof_problem",
    "run_plate_static",
    "run_plate_modal",
    "run_plate_buckling",
    "run_membrane",
    "run_roof",
    "limit_points",
    "load_roof_fixture",
    "run_benchmark",
    "write_csv",
]

CASES = ("plate-static", "plate-modal", "plate-buckling", "pinched-membrane", "roof")

COLUMNS = {
    "plate-static": ["degree", "level", "h", "dofs", "goal", "L_h", "L_an", "dL_an", "dL_num", "efficiency"],
    "plate-modal": ["degree", "level", "h", "dofs", "mode", "omega", "omega_an", "rel_error", "dL_an", "dL_num", "efficiency"],
    "plate-buckling": ["degree", "level", "h", "dofs", "mode", "load", "load_an", "rel_error", "dL_an", "dL_num", "efficiency"],
    "pinched-membrane": ["mode", "iteration", "dofs", "max_level", "w_P", "goal", "dL", "e", "blocked_fraction"],
    "roof": ["mode", "step", "iteration", "lam", "w_A", "norm_u", "dofs", "dL", "e", "blocked_fraction"],
}

PLATE_GOALS = (
    GoalFunctional("displacement"),
    GoalFunctional("stretch", "component", 0),
    GoalFunctional("strain"),
    GoalFunctional("force", "component", 0),
)

ROOF = dict(radius=2540.0, angle=0.1, half_length=254.0, thickness=6.35, E=3102.0, nu=0.3, load=250.0)
MEMBRANE = dict(half_width=0.5, thickness=1e-3, E=1.0, nu=0.3, load=1e-7)
MEMBRANE_RAMP = (0.01, 0.05, 0.2, 0.5, 1.0)
FIXTURE = Path(__file__).with_name("data") / "roof_limit_points.json"


@dataclass(frozen=True)
class BenchmarkCase:
    """One benchmark run: case id, discretisation and (optional) adaptivity."""

    case: str
    degree: int = 3
    levels: tuple[int, ...] = (2, 3, 4)
    goal: GoalFunctional | None = None
    adaptive: bool = False
    config: MarkConfig = field(default_factory=MarkConfig)
    max_level: int = 8
    m: int = 2
    steps: int = 16

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError("unknown benchmark case %r (choose from %s)" % (self.case, ", ".join(CASES)))
        if self.degree < 2:
            raise ValueError("Kirchhoff-Love shells need degree >= 2")
        if not self.levels or min(self.levels) < 0:
            raise ValueError("levels must be non-negative")
        if self.max_level < 1 or self.m < 1 or self.steps < 1:
            raise ValueError("max_level, m and steps must be positive")


def _uniform(degree: int, level: int, max_levels: int = 12, m: int = 2) -> ThbSpace:
    return ThbSpace(HierarchicalMesh.uniform(analysis_basis(degree), level, max_levels=max_levels, m=m))


def _dofs(problem: ShellProblem, space: ThbSpace) -> int:
    return int(assembler(problem, space).constraint_map().n_free)


# ----------------------------------------------------------------------------
# problem set-up
# ----------------------------------------------------------------------------
def plate_static_problem(degree: int = 3):
    """Clamped unit plate under the manufactured load; returns (problem, exact)."""
    mp = manufactured_plate()
    clamp = tuple(Constraint(s, kind="clamp") for s in ("u0", "u1", "v0", "v1"))
    g = rectangle(1.0, 1.0, mp.t, degree)
    return ShellProblem(g, Material(mp.E, mp.nu), clamp, surface_load=mp.load, linear=True), mp


def plate_modal_problem(degree: int = 3, radius: float = 1.0, thickness: float = 0.01) -> ShellProblem:
    clamp = tuple(Constraint(s, kind="clamp") for s in ("u0", "u1", "v0", "v1"))
    return ShellProblem(disc(radius, thickness, degree), Material(1.0, 0.3, 1.0), clamp)


def plate_buckling_problem(degree: int = 3) -> ShellProblem:
    """Simply supported square plate under biaxial unit compression."""
    cons = (Constraint("u0", (0, 2)), Constraint("v0", (1, 2)), Constraint("u1", (2,)), Constraint("v1", (2,)))
    loads = (EdgeLoad("u1", (-1.0, 0.0, 0.0)), EdgeLoad("v1", (0.0, -1.0, 0.0)))
    return ShellProblem(rectangle(1.0, 1.0, 0.01, degree), Material(1e6, 0.3), cons, edge_loads=loads)


def membrane_problem(degree: int = 2) -> ShellProblem:
    """Quarter of the pinched square membrane; the load is a quarter of ``P``."""
    c = MEMBRANE
    g = rectangle(c["half_width"], c["half_width"], c["thickness"], degree)
    cons = (Constraint("u0v0"), Constraint("u1", (0,), "symmetry"), Constraint("v1", (1,), "symmetry"))
    return ShellProblem(g, Material(c["E"], c["nu"]), cons, point_loads=(PointLoad((1.0, 1.0), (0.0, 0.0, c["load"])),))


def roof_problem(degree: int = 3) -> ShellProblem:
    """Quarter of the hinged cylindrical roof; ``lam`` is the full load in kN."""
    c = ROOF
    g = roof_quarter(c["radius"], c["angle"], c["half_length"], c["thickness"], degree)
    cons = (Constraint("u1"), Constraint("u0", (0,), "symmetry"), Constraint("v0", (1,), "symmetry"))
    return ShellProblem(g, Material(c["E"], c["nu"]), cons, point_loads=(PointLoad((0.0, 0.0), (0.0, 0.0, -c["load"])),))


MEMBRANE_GOAL = GoalFunctional("displacement", "norm", region="points", points=((1.0, 1.0),))
ROOF_GOAL = GoalFunctional("curvature")


# ----------------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------------
def run_plate_static(degree: int = 2, levels=(2, 3, 4), goals=PLATE_GOALS) -> list[dict]:
    problem, mp = plate_static_problem(degree)
    rows = []
    for lev in levels:
        space = _uniform(degree, lev)
        state = linear_static(problem, space)
        fields = estimate_goal(problem, state, list(goals))
        for goal, ef in zip(goals, fields):
            L_h = goal_value(problem, state, goal)
            if goal.quantity == "displacement" and goal.form == "norm" and goal.region == "domain":
                L_an = mp.displacement_norm
            else:
                L_an = goal_value(problem, mp.derivs, goal, space)
            dL_an = L_an - L_h
            rows.append(
                dict(degree=degree, level=lev, h=2.0**-lev, dofs=_dofs(problem, space), goal=goal.label,
                     L_h=L_h, L_an=L_an, dL_an=dL_an, dL_num=ef.total,
                     efficiency=ef.total / dL_an if dL_an else float("nan"))
            )
    return rows


def run_plate_modal(degree: int = 3, levels=(2, 3, 4, 5), nev: int = 4) -> list[dict]:
    problem = plate_modal_problem(degree)
    mat, t = problem.material, problem.thickness
    ref = circular_plate_frequencies(nev, 1.0, mat.E, mat.nu, t, mat.rho)
    mu_an = ref**2
    rows = []
    for lev in levels:
        space = _uniform(degree, lev)
        primal = modal_analysis(problem, space, nev)
        enriched = modal_analysis(problem, enriched_space(space), nev + 2)
        for k in range(nev):
            ef = estimate_eigen(problem, primal, enriched, k)
            dL_an = mu_an[k] - primal.mu[k]
            omega = float(np.sqrt(primal.mu[k]))
            rows.append(
                dict(degree=degree, level=lev, h=2.0**-lev, dofs=_dofs(problem, space), mode=k + 1, omega=omega,
                     omega_an=ref[k], rel_error=(omega - ref[k]) / ref[k], dL_an=dL_an, dL_num=ef.total,
                     efficiency=ef.total / dL_an if dL_an else float("nan"))
            )
    return rows


BUCKLING_MODES = ((1, 1), (1, 2), (2, 2), (3, 1))
# the square plate has double eigenvalues for m != n; rows of the distinct values
_BUCKLING_ROWS = (0, 1, 3, 4)


def run_plate_buckling(degree: int = 3, levels=(2, 3, 4), lam_L: float = 1e-4) -> list[dict]:
    """Critical loads; the estimate targets ``theta = 1 - mu`` of the shifted pencil."""
    problem = plate_buckling_problem(degree)
    mat = problem.material
    ref = np.array([plate_buckling_loads(m, n, mat.E, mat.nu, problem.thickness) for m, n in BUCKLING_MODES])
    nev = _BUCKLING_ROWS[-1] + 2
    rows = []
    for lev in levels:
        space = _uniform(degree, lev)
        primal = buckling_analysis(problem, space, lam_L, nev)
        enriched = buckling_analysis(problem, enriched_space(space), lam_L, nev + 2)
        u_L = linear_static(problem, space, lam_L)
        for k, idx in enumerate(_BUCKLING_ROWS):
            ef = estimate_eigen(problem, primal, enriched, idx, "buckling", lam_L, u_L)
            dL_an = lam_L / ref[k] - (1 - primal.mu[idx])
            load = float(primal.critical[idx])
            rows.append(
                dict(degree=degree, level=lev, h=2.0**-lev, dofs=_dofs(problem, space), mode=k + 1, load=load,
                     load_an=ref[k], rel_error=(load - ref[k]) / ref[k], dL_an=dL_an, dL_num=ef.total,
                     efficiency=ef.total / dL_an if dL_an else float("nan"))
            )
    return rows


def _membrane_w(state: StateVector) -> float:
    return float(state.space.evaluate(state.u.reshape(-1, 3), [[1.0, 1.0]])[0, 0, 2])


def _ramp(problem: ShellProblem, space: ThbSpace, lams=MEMBRANE_RAMP) -> StateVector:
    state = None
    for lam in lams:
        state = newton_solve(problem, space, lam, state, max_iter=60, line_search=True)
    return state


def run_membrane(
    degree: int = 2,
    levels=(2, 3, 4, 5),
    adaptive: bool = True,
    base_level: int = 2,
    max_level: int = 8,
    iterations: int = 12,
    config: MarkConfig | None = None,
    m: int = 2,
    mesh_out: Path | str | None = None,
) -> list[dict]:
    """Uniform sequence and a refine-only adaptive sequence at full load."""
    problem = membrane_problem(degree)
    goal = MEMBRANE_GOAL
    rows = []
    for lev in levels:
        space = _uniform(degree, lev, m=m)
        state = _ramp(problem, space)
        ef = estimate_goal(problem, state, goal)
        rows.append(
            dict(mode="uniform", iteration=lev, dofs=_dofs(problem, space), max_level=0, w_P=_membrane_w(state),
                 goal=goal_value(problem, state, goal), dL=ef.total, e=ef.e, blocked_fraction=0.0)
        )
    if not adaptive:
        return rows
    if config is None:
        # a vanishing band keeps refining: the study follows the estimate, not a target
        config = MarkConfig(rho_r=0.5, rho_c=0.05, tol_r=0.0, tol_c=0.0, max_iter=iterations)
    space = _uniform(degree, base_level, max_levels=max_level + 1, m=m)
    start = _ramp(problem, space)

    def monitor(state):
        return {"w_P": _membrane_w(state), "free": _dofs(problem, state.space),
                "top": max(int(state.space.cell_level.max()), 0)}

    res = adaptive_loop(problem, goal, space.mesh, config, Continuation("load", (1.0,)), monitor, start=start)
    if res.error is not None:
        log.warning("adaptive membrane run stopped: %s", res.error)
    _dump_last(res, mesh_out)
    for row in res.history:
        rows.append(
            dict(mode="adaptive", iteration=row["iteration"], dofs=row["free"], max_level=row["top"], w_P=row["w_P"],
                 goal=row["goal"], dL=row["dL"], e=row["e"], blocked_fraction=row["blocked"])
        )
    return rows


def _roof_monitor(problem):
    def monitor(state):
        w = -float(state.space.evaluate(state.u.reshape(-1, 3), [[0.0, 0.0]])[0, 0, 2])
        return {"w_A": w, "free": _dofs(problem, state.space), "norm_u": float(np.linalg.norm(state.u))}

    return monitor


def run_roof(
    degree: int = 3,
    level: int = 4,
    steps: int = 16,
    dl: float = 25.0,
    adaptive: bool = False,
    config: MarkConfig | None = None,
    max_level: int = 11,
    m: int = 2,
    mesh_out: Path | str | None = None,
    time_limit: float | None = None,
    max_dofs: int | None = None,
) -> list[dict]:
    """Arc-length path of the roof on a uniform ``2^level`` mesh, optionally adaptive.

    ``time_limit`` and ``max_dofs`` cap the adaptive run; the rows computed
    so far are returned.
    """
    problem = roof_problem(degree)
    monitor = _roof_monitor(problem)
    arc = ArcLengthConfig(dl)
    rows = []
    if not adaptive:
        space = _uniform(degree, level, m=m)
        for r in arc_length(problem, space, arc, steps, monitor):
            rows.append(
                dict(mode="uniform", step=r["step"], iteration=0, lam=r["lam"], w_A=r["w_A"], norm_u=r["norm_u"],
                     dofs=r["free"], dL=float("nan"), e=float("nan"), blocked_fraction=float("nan"))
            )
        return rows
    config = config or MarkConfig(rho_r=0.5, rho_c=0.05, tol_r=1e-10, tol_c=1e-8, max_iter=5)
    mesh = HierarchicalMesh.uniform(analysis_basis(degree), level, max_levels=max_level + 1, m=m)
    res = adaptive_loop(problem, ROOF_GOAL, mesh, config, Continuation("arclength", arc=arc, n_steps=steps), monitor,
                        time_limit=time_limit, max_dofs=max_dofs)
    if res.error is not None:
        log.warning("adaptive roof run stopped: %s", res.error)
    _dump_last(res, mesh_out)
    for r in res.history:
        rows.append(
            dict(mode="adaptive", step=r["step"], iteration=r["iteration"], lam=r["lam"], w_A=r["w_A"],
                 norm_u=r["norm_u"], dofs=r["free"], dL=r["dL"], e=r["e"],
                 blocked_fraction=r["blocked"])
        )
    return rows


def _dump_last(res, path) -> None:
    if path is not None and res.states:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        res.states[-1].space.mesh.dump(path)


def limit_points(lam: np.ndarray) -> list[tuple[str, float]]:
    """Local extrema of a load path, refined by a parabola through three steps."""
    lam = np.asarray(lam, dtype=float)
    out = []
    for k in range(1, len(lam) - 1):
        a, b, c = lam[k - 1 : k + 2]
        if (b - a) * (c - b) < 0:
            curv = a - 2 * b + c
            peak = b - (c - a) ** 2 / (8 * curv) if curv else b
            out.append(("max" if b > a else "min", float(peak)))
    return out


def load_roof_fixture(path: Path | str = FIXTURE) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------
def write_csv(rows: list[dict], path: Path | str, columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


def run_benchmark(case: BenchmarkCase | str, out: Path | str = "reports", **overrides) -> dict:
    """Run one case and write ``<out>/<case>.csv``; returns paths and rows.

    Adaptive runs also dump the final mesh as ``<case>-mesh.csv``.
    """
    if isinstance(case, str):
        case = BenchmarkCase(case)
    case = replace(case, **overrides) if overrides else case
    t0 = time.perf_counter()
    out = Path(out)
    cid = case.case
    if cid == "plate-static":
        goals = PLATE_GOALS if case.goal is None else (case.goal,)
        rows = run_plate_static(case.degree, case.levels, goals)
    elif cid == "plate-modal":
        rows = run_plate_modal(case.degree, case.levels)
    elif cid == "plate-buckling":
        rows = run_plate_buckling(case.degree, case.levels)
    elif cid == "pinched-membrane":
        cfg = case.config if case.adaptive else None
        rows = run_membrane(case.degree, case.levels, adaptive=True, max_level=case.max_level,
                            iterations=cfg.max_iter if cfg else 12, config=cfg, m=case.m,
                            mesh_out=out / f"{cid}-mesh.csv")
    else:
        rows = run_roof(case.degree, case.levels[0], case.steps, adaptive=case.adaptive,
                        config=case.config if case.adaptive else None, max_level=case.max_level, m=case.m,
                        mesh_out=out / f"{cid}-mesh.csv" if case.adaptive else None)
    path = write_csv(rows, out / f"{cid}.csv", COLUMNS[cid])
    log.info("%s: %d rows in %.1fs -> %s", cid, len(rows), time.perf_counter() - t0, path)
    return {"csv": path, "rows": rows, "seconds": time.perf_counter() - t0}
