"""Command-line entry point.

::

    goaliga bench <case> [--degree P] [--levels N] [--goal SPEC] [adaptivity flags] [--out DIR]
    goaliga run <config.ini> [--out DIR]
    goaliga verify

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(a ``failure.json`` stub is written to the output directory).

Goal specs read ``quantity[:form[:component]][@region]`` where region is
``domain``, ``boundary=<side>`` or ``points=u,v[;u,v...]``, for example
``stretch:component:0`` or ``displacement@points=1,1``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .adapt import Continuation, MarkConfig, adaptive_loop
from .bench.cases import CASES, BenchmarkCase, run_benchmark, write_csv
from .dwr import GoalFunctional
from .errors import GoalIgaError

log = logging.getLogger("goaliga")

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid command line or configuration file."""


# ----------------------------------------------------------------------------
# goal and config parsing
# ----------------------------------------------------------------------------
def parse_goal(spec: str) -> GoalFunctional:
    body, _, region = spec.partition("@")
    parts = body.split(":")
    kw = {"quantity": parts[0]}
    if len(parts) > 1:
        kw["form"] = parts[1]
    if len(parts) > 2:
        kw["component"] = int(parts[2])
    if len(parts) > 3:
        raise ConfigError("goal spec %r has too many fields" % spec)
    if region:
        name, _, arg = region.partition("=")
        kw["region"] = name
        if name == "boundary":
            kw["side"] = arg
        elif name == "points":
            kw["points"] = tuple(tuple(float(x) for x in p.split(",")) for p in arg.split(";") if p)
    try:
        return GoalFunctional(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError("bad goal spec %r: %s" % (spec, exc)) from exc


SCHEMA = {
    "problem": {
        "geometry": str, "degree": int, "level": int, "thickness": float, "lx": float, "ly": float,
        "radius": float, "angle": float, "length": float, "E": float, "nu": float, "rho": float,
        "constraints": str, "surface_load": str, "point_loads": str, "edge_loads": str, "linear": bool,
    },
    "analysis": {"type": str, "lam": float, "nev": int, "lam_l": float, "dl": float, "steps": int, "lams": str},
    "goal": {"spec": str},
    "adapt": {
        "enabled": bool, "rho_r": float, "rho_c": float, "tol_r": float, "tol_c": float,
        "imax": int, "max_level": int, "m": int,
    },
    "output": {"dir": str, "seed": int},
}
ANALYSES = ("static", "modal", "buckling", "arclength")
GEOMETRIES = ("rectangle", "disc", "cylinder", "roof")


def read_config(path: str | Path) -> dict:
    """Parse an INI run file against :data:`SCHEMA`; unknown sections or keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file %s not found" % path)
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out: dict = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError("unknown section [%s]" % sec)
        out[sec] = {}
        for key, raw in cp.items(sec):
            typ = SCHEMA[sec].get(key)
            if typ is None:
                raise ConfigError("unknown key %r in [%s]" % (key, sec))
            try:
                out[sec][key] = cp.getboolean(sec, key) if typ is bool else typ(raw)
            except ValueError as exc:
                raise ConfigError("bad value for %s.%s: %r" % (sec, key, raw)) from exc
    if "problem" not in out:
        raise ConfigError("missing [problem] section")
    kind = out.get("analysis", {}).get("type", "static")
    if kind not in ANALYSES:
        raise ConfigError("analysis type must be one of %s" % ", ".join(ANALYSES))
    geom = out["problem"].get("geometry", "rectangle")
    if geom not in GEOMETRIES:
        raise ConfigError("geometry must be one of %s" % ", ".join(GEOMETRIES))
    return out


def _vec(text: str) -> tuple[float, ...]:
    v = tuple(float(x) for x in text.split(","))
    if len(v) != 3:
        raise ConfigError("expected three components in %r" % text)
    return v


def build_problem(cfg: dict):
    """ShellProblem and initial mesh from the ``[problem]`` section."""
    from .bench.geometries import analysis_basis, cylinder_panel, disc, rectangle, roof_quarter
    from .shell import Constraint, EdgeLoad, Material, PointLoad, ShellProblem
    from .thb import HierarchicalMesh

    p = cfg["problem"]
    deg = p.get("degree", 3)
    t = p.get("thickness", 0.01)
    geom = p.get("geometry", "rectangle")
    if geom == "rectangle":
        g = rectangle(p.get("lx", 1.0), p.get("ly", 1.0), t, deg)
    elif geom == "disc":
        g = disc(p.get("radius", 1.0), t, deg)
    elif geom == "cylinder":
        g = cylinder_panel(p.get("radius", 1.0), p.get("angle", 0.5), p.get("length", 1.0), t, deg)
    else:
        g = roof_quarter(p.get("radius", 1.0), p.get("angle", 0.1), p.get("length", 0.1), t, deg)
    cons = []
    for item in filter(None, (s.strip() for s in p.get("constraints", "").split(";"))):
        f = item.split(":")
        comps = tuple(int(c) for c in f[2]) if len(f) > 2 else (0, 1, 2)
        cons.append(Constraint(f[0], comps, f[1] if len(f) > 1 else "fix"))
    pls = []
    for item in filter(None, (s.strip() for s in p.get("point_loads", "").split(";"))):
        at, _, vec = item.partition(":")
        pls.append(PointLoad(tuple(float(x) for x in at.split(",")), _vec(vec)))
    els = []
    for item in filter(None, (s.strip() for s in p.get("edge_loads", "").split(";"))):
        side, _, vec = item.partition(":")
        els.append(EdgeLoad(side, _vec(vec)))
    sl = p.get("surface_load")
    problem = ShellProblem(
        g,
        Material(p.get("E", 1.0), p.get("nu", 0.3), p.get("rho", 0.0)),
        tuple(cons),
        surface_load=_vec(sl) if sl else None,
        point_loads=tuple(pls),
        edge_loads=tuple(els),
        linear=p.get("linear", False),
    )
    a = cfg.get("adapt", {})
    mesh = HierarchicalMesh.uniform(
        analysis_basis(deg), p.get("level", 3), max_levels=a.get("max_level", p.get("level", 3) + 4) + 1, m=a.get("m", 2)
    )
    return problem, mesh


def _mark_config(section: dict, base: MarkConfig | None = None) -> MarkConfig:
    base = base or MarkConfig()
    try:
        return MarkConfig(
            rho_r=section.get("rho_r", base.rho_r),
            rho_c=section.get("rho_c", base.rho_c),
            tol_r=section.get("tol_r", base.tol_r),
            tol_c=section.get("tol_c", base.tol_c),
            max_iter=section.get("imax", base.max_iter),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_config(cfg: dict, out: Path) -> Path:
    """Execute a parsed run file; returns the CSV path."""
    from .solve import ArcLengthConfig, buckling_analysis, modal_analysis
    from .thb import ThbSpace

    np.random.seed(cfg.get("output", {}).get("seed", 0))
    try:
        problem, mesh = build_problem(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError("invalid problem definition: %s" % exc) from exc
    an = cfg.get("analysis", {})
    kind = an.get("type", "static")
    space = ThbSpace(mesh)
    if kind in ("modal", "buckling"):
        nev = an.get("nev", 4)
        if kind == "modal":
            res = modal_analysis(problem, space, nev)
            rows = [{"mode": k + 1, "mu": float(m), "omega": float(np.sqrt(max(m, 0.0)))} for k, m in enumerate(res.mu)]
            cols = ["mode", "mu", "omega"]
        else:
            res = buckling_analysis(problem, space, an.get("lam_l", 1e-4), nev)
            rows = [{"mode": k + 1, "critical": float(c)} for k, c in enumerate(res.critical)]
            cols = ["mode", "critical"]
        return write_csv(rows, out / "eigen.csv", cols)
    goal = parse_goal(cfg.get("goal", {}).get("spec", "displacement"))
    a = cfg.get("adapt", {})
    config = _mark_config(a)
    if kind == "static":
        lams = tuple(float(x) for x in an.get("lams", str(an.get("lam", 1.0))).split(","))
        cont = Continuation("linear", (lams[-1],)) if problem.linear or len(lams) == 1 else Continuation("load", lams)
    else:
        cont = Continuation("arclength", arc=ArcLengthConfig(an.get("dl", 1.0)), n_steps=an.get("steps", 10))
    res = adaptive_loop(problem, goal, mesh, config, cont, adapt=a.get("enabled", False))
    if res.error is not None:
        raise res.error
    cols = ["step", "iteration", "lam", "dofs", "goal", "dL", "e", "blocked", "refined", "coarsened"]
    path = write_csv(res.history, out / "history.csv", cols)
    if res.states:
        res.states[-1].space.mesh.dump(out / "mesh.csv")
    return path


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--degree", type=int, help="spline degree (>= 2)")
    p.add_argument("--levels", type=int, help="finest uniform level (roof: mesh level)")
    p.add_argument("--goal", help="goal spec, e.g. displacement or stretch:component:0")
    p.add_argument("--rho-r", type=float, help="refinement marking fraction")
    p.add_argument("--rho-c", type=float, help="coarsening marking fraction")
    p.add_argument("--tol-r", type=float, help="lower tolerance of the band")
    p.add_argument("--tol-c", type=float, help="upper tolerance of the band")
    p.add_argument("--max-level", type=int, help="highest hierarchical level")
    p.add_argument("--jump-m", type=int, help="admissibility class m")
    p.add_argument("--imax", type=int, help="adaptivity iterations per step")
    p.add_argument("--out", default="reports", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="goaliga", description="Goal-adaptive IGA for Kirchhoff-Love shells")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    b = sub.add_parser("bench", help="run a benchmark case")
    b.add_argument("case", choices=CASES)
    _add_adapt_flags(b)
    b.add_argument("--adaptive", action="store_true", help="adaptive run (roof)")
    b.add_argument("--steps", type=int, help="arc-length steps (roof)")
    r = sub.add_parser("run", help="run a configuration file")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    sub.add_parser("verify", help="run the property suites")
    return ap


def _bench_case(args) -> BenchmarkCase:
    kw = {}
    if args.degree is not None:
        kw["degree"] = args.degree
    if args.levels is not None:
        top = args.levels
        kw["levels"] = (top,) if args.case == "roof" else tuple(range(2, top + 1))
    elif args.case == "roof":
        kw["levels"] = (4,)
    if args.goal:
        kw["goal"] = parse_goal(args.goal)
    if args.max_level is not None:
        kw["max_level"] = args.max_level
    if args.jump_m is not None:
        kw["m"] = args.jump_m
    if args.steps is not None:
        kw["steps"] = args.steps
    flags = {"rho_r": args.rho_r, "rho_c": args.rho_c, "tol_r": args.tol_r, "tol_c": args.tol_c, "imax": args.imax}
    flags = {k: v for k, v in flags.items() if v is not None}
    kw["adaptive"] = bool(args.adaptive or flags)
    base = MarkConfig(rho_r=0.5, rho_c=0.05, tol_r=1e-10, tol_c=1e-8, max_iter=5)
    kw["config"] = _mark_config(flags, base)
    try:
        return BenchmarkCase(args.case, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _failure(out: Path, exc: BaseException) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stub = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc().splitlines()[-5:]}
    (out / "failure.json").write_text(json.dumps(stub, indent=2))


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required")
    except ConfigError as exc:
        print(ap.format_usage().rstrip(), file=sys.stderr)
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(getattr(args, "out", None) or "reports")
    try:
        if args.command == "verify":
            from .verify import run_all

            results = run_all()
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else EXIT_NUMERIC
        if args.command == "bench":
            case = _bench_case(args)
            res = run_benchmark(case, out)
            print("%s: %d rows -> %s" % (case.case, len(res["rows"]), res["csv"]))
            return 0
        cfg = read_config(args.config)
        out = Path(args.out or cfg.get("output", {}).get("dir", "reports"))
        print("wrote %s" % run_config(cfg, out))
        return 0
    except ConfigError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (GoalIgaError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _failure(out, exc)
        print("numerical failure: %s (report in %s)" % (exc, out / "failure.json"), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
