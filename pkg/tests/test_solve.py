import numpy as np
import pytest

from goaliga.bench.cases import plate_buckling_problem, roof_problem
from goaliga.bench.geometries import analysis_basis, rectangle
from goaliga.errors import NonConvergenceError
from goaliga.shell import Constraint, Material, ShellProblem, StateVector, assembler
from goaliga.solve import (
    ArcLengthConfig,
    _roots,
    arc_length,
    buckling_analysis,
    crisfield_step,
    linear_static,
    modal_analysis,
    newton_solve,
)
from goaliga.thb import HierarchicalMesh, ThbSpace

SIDES = ("u0", "u1", "v0", "v1")


def uniform(p, level):
    return ThbSpace(HierarchicalMesh.uniform(analysis_basis(p), level))


def ss_plate(linear=False, load=(0.0, 0.0, 1.0), rho=0.0):
    return ShellProblem(
        rectangle(1, 1, 0.02, 3), Material(1e3, 0.3, rho), tuple(Constraint(s) for s in SIDES), surface_load=load, linear=linear
    )


def test_newton_on_linear_problem_matches_direct_solve():
    space = uniform(3, 2)
    pr = ss_plate(linear=True)
    a = linear_static(pr, space, 0.5)
    b = newton_solve(pr, space, 0.5)
    np.testing.assert_allclose(b.u, a.u, rtol=1e-9, atol=1e-14)
    assert len(b.history) <= 3


def test_newton_small_load_approaches_linear_response():
    space = uniform(3, 2)
    dev = []
    for lam in (1e-4, 1e-5):
        lin = linear_static(ss_plate(linear=True), space, lam)
        non = newton_solve(ss_plate(), space, lam)
        dev.append(np.linalg.norm(non.u - lin.u) / np.linalg.norm(lin.u))
        asm = assembler(ss_plate(), space)
        cm = asm.constraint_map()
        r = np.linalg.norm(cm.reduce(asm.residual(non.u, non.lam)))
        assert r <= max(1e-10 * np.linalg.norm(lam * cm.reduce(asm.load_vector())), 1e-14)
    # in-plane displacements appear with the square of the deflection, so the
    # relative deviation shrinks at least linearly with the load
    assert dev[0] < 1e-2
    assert dev[1] < dev[0] / 5


def test_newton_reports_nonconvergence():
    with pytest.raises(NonConvergenceError) as info:
        newton_solve(ss_plate(), uniform(3, 2), 50.0, max_iter=1)
    assert info.value.state is not None


def test_simply_supported_plate_frequencies():
    # omega_mn = pi^2 (m^2 + n^2) sqrt(D / (rho t)) on the unit square
    pr = ss_plate(rho=2.0)
    mat, t = pr.material, pr.thickness
    D = mat.E * t**3 / (12 * (1 - mat.nu**2))
    ref = np.pi**2 * np.array([2, 5, 5, 8]) * np.sqrt(D / (mat.rho * t))
    res = modal_analysis(pr, uniform(3, 3), 4)
    np.testing.assert_allclose(res.omega, ref, rtol=3e-4)
    M = assembler(pr, res.space).mass()
    np.testing.assert_allclose(res.modes.T @ (M @ res.modes), np.eye(4), atol=1e-8)


def test_buckling_factor_independent_of_reference_load():
    pr = plate_buckling_problem(3)
    space = uniform(3, 3)
    a = buckling_analysis(pr, space, 1e-4, 4).critical
    b = buckling_analysis(pr, space, 1e-6, 4).critical
    np.testing.assert_allclose(a, b, rtol=1e-6)
    assert a[0] == pytest.approx(1.8076, rel=1e-3)


def test_quadratic_roots():
    np.testing.assert_allclose(sorted(_roots(1.0, -3.0, 2.0)), [1.0, 2.0])
    assert _roots(1.0, 0.0, 1.0) is None
    np.testing.assert_allclose(_roots(1.0, 2.0, 1.0 + 1e-14), [-1.0, -1.0], atol=1e-6)


def test_arc_length_constraint_and_first_limit_point():
    pr = roof_problem(3)
    space = uniform(3, 3)
    cfg = ArcLengthConfig(25.0)
    state = StateVector(space, np.zeros(3 * space.n_functions), 0.0)
    prev = None
    lams = []
    for _ in range(4):
        new, prev = crisfield_step(pr, space, state, cfg, prev)
        cm = assembler(pr, space).constraint_map()
        assert np.linalg.norm(cm.reduce(new.u - state.u)) == pytest.approx(25.0, rel=1e-8)
        state = new
        lams.append(state.lam)
    # the load rises and then falls: the first limit point has been passed
    k = int(np.argmax(lams))
    assert 0 < k < len(lams) - 1


def test_arc_length_rows_and_monitor():
    pr = roof_problem(3)
    rows = arc_length(pr, uniform(3, 2), ArcLengthConfig(10.0), 3, monitor=lambda s: {"lam2": 2 * s.lam})
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert all(r["lam2"] == pytest.approx(2 * r["lam"]) for r in rows)


def test_arc_length_config_validation():
    with pytest.raises(ValueError):
        ArcLengthConfig(0.0)
