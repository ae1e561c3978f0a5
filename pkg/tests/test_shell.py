import numpy as np
import pytest

from goaliga.bench.geometries import analysis_basis, cylinder_panel, rectangle
from goaliga.shell import (
    Constraint,
    EdgeLoad,
    Material,
    MeshField,
    PointLoad,
    ShellProblem,
    assembler,
    kinematics,
    material_voigt,
)
from goaliga.solve import linear_static
from goaliga.thb import CellId, HierarchicalMesh, ThbSpace, refine

SIDES = ("u0", "u1", "v0", "v1")


def uniform(p, level, max_levels=None):
    return ThbSpace(HierarchicalMesh.uniform(analysis_basis(p), level, max_levels=max_levels))


def refined(p=3):
    mesh = HierarchicalMesh.uniform(analysis_basis(p), 2, max_levels=5)
    refine(mesh, [CellId(2, (1, 1))])
    return ThbSpace(mesh)


def curved(pressure=0.0):
    g = cylinder_panel(1.0, np.pi / 3, 1.0, 0.05, 3)
    return ShellProblem(
        g,
        Material(1000.0, 0.3, 1.0),
        surface_load=(0.0, 0.0, -1.0),
        pressure=pressure,
        point_loads=(PointLoad((0.3, 0.7), (1.0, 2.0, 3.0)),),
        edge_loads=(EdgeLoad("u1", (0.5, 0.0, 0.0)),),
    )


def navier_deflection(q, D, x, y, terms=199):
    """Double sine series of the simply supported unit square under uniform load."""
    m = np.arange(1, terms + 1, 2)
    M, N = np.meshgrid(m, m, indexing="ij")
    s = np.sin(M * np.pi * x) * np.sin(N * np.pi * y) / (M * N * (M**2 + N**2) ** 2)
    return 16 * q / (np.pi**6 * D) * s.sum()


def test_plane_stress_matrix_cartesian():
    E, nu = 2.5, 0.25
    C = material_voigt(Material(E, nu), np.eye(2))
    ref = E / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    np.testing.assert_allclose(C, ref, rtol=1e-14)


def test_material_validation():
    with pytest.raises(ValueError):
        Material(-1.0, 0.3)
    with pytest.raises(ValueError):
        Material(1.0, 0.5)
    with pytest.raises(ValueError):
        Material(1.0, 0.3, -1.0)


def test_problem_validation():
    g = rectangle(1, 1, 0.01, 2)
    with pytest.raises(ValueError):
        ShellProblem(g, Material(1.0, 0.3), linear=True, pressure=1.0)
    with pytest.raises(ValueError):
        ShellProblem(g, Material(1.0, 0.3), point_loads=(PointLoad((1.5, 0.0), (0, 0, 1)),))
    with pytest.raises(ValueError):
        Constraint("u2")
    with pytest.raises(ValueError):
        Constraint("u0v0", kind="clamp")
    with pytest.raises(ValueError):
        EdgeLoad("u0v1")


def test_simply_supported_plate_matches_series():
    mat, t = Material(1e6, 0.3), 0.01
    D = mat.E * t**3 / (12 * (1 - mat.nu**2))
    pr = ShellProblem(rectangle(1, 1, t, 3), mat, tuple(Constraint(s) for s in SIDES), surface_load=(0, 0, 1.0), linear=True)
    space = uniform(3, 3)
    st = linear_static(pr, space)
    for x, y in [(0.5, 0.5), (0.25, 0.3)]:
        w = space.evaluate(st.u.reshape(-1, 3), [[x, y]])[0, 0, 2]
        assert w == pytest.approx(navier_deflection(1.0, D, x, y), rel=1e-4)


def test_membrane_patch_test_is_exact():
    E, nu, t, N = 10.0, 0.3, 0.1, 2.0
    cons = (Constraint("u0", (0, 2)), Constraint("v0", (1, 2)))
    pr = ShellProblem(rectangle(2, 1, t, 2), Material(E, nu), cons, edge_loads=(EdgeLoad("u1", (N, 0, 0)),), linear=True)
    space = uniform(2, 1)
    st = linear_static(pr, space)
    pts = np.array([[0.3, 0.7], [1.0, 1.0], [0.55, 0.1]])
    U = space.evaluate(st.u.reshape(-1, 3), pts)[:, 0]
    x = pts * [2.0, 1.0]
    eps = N / (E * t)
    np.testing.assert_allclose(U[:, 0], eps * x[:, 0], atol=1e-12)
    np.testing.assert_allclose(U[:, 1], -nu * eps * x[:, 1], atol=1e-12)
    np.testing.assert_allclose(U[:, 2], 0.0, atol=1e-12)


@pytest.mark.parametrize("pressure", [0.0, 2.0])
def test_tangent_matches_finite_differences(pressure):
    rng = np.random.default_rng(7)
    asm = assembler(curved(pressure), refined())
    u = 0.05 * rng.standard_normal(asm.n_dofs)
    d = rng.standard_normal(asm.n_dofs)
    h = 1e-6
    K = asm.tangent(u, 0.7)
    fd = (asm.residual(u + h * d, 0.7) - asm.residual(u - h * d, 0.7)) / (2 * h)
    assert np.linalg.norm(fd - K @ d) / np.linalg.norm(fd) < 1e-5


def test_residual_is_energy_gradient_and_tangent_symmetric():
    rng = np.random.default_rng(8)
    asm = assembler(curved(), refined())
    u = 0.05 * rng.standard_normal(asm.n_dofs)
    d = rng.standard_normal(asm.n_dofs)
    h = 1e-6
    fd = (asm.energy(u + h * d, 0.7) - asm.energy(u - h * d, 0.7)) / (2 * h)
    assert fd == pytest.approx(asm.residual(u, 0.7) @ d, rel=1e-6)
    K = asm.tangent(u, 0.7)
    assert abs(K - K.T).max() <= 1e-10 * abs(K).max()


def test_rigid_translation_is_stress_free():
    asm = assembler(curved(), refined())
    u = np.tile([0.3, -1.2, 0.7], asm.n_dofs // 3)
    f = asm.internal_force(u)
    assert np.abs(f).max() < 1e-10


def test_mass_integrates_density_times_volume():
    space = uniform(2, 2)
    pr = ShellProblem(rectangle(2, 3, 0.1, 2), Material(1.0, 0.3, 4.0))
    M = assembler(pr, space).mass()
    one = np.zeros(M.shape[0])
    one[2::3] = 1.0
    assert one @ M @ one == pytest.approx(4.0 * 0.1 * 6.0, rel=1e-12)


def test_cell_residual_sums_to_global_residual():
    rng = np.random.default_rng(9)
    space = refined()
    asm = assembler(curved(), space)
    u = 0.01 * rng.standard_normal(asm.n_dofs)
    w = rng.standard_normal(asm.n_dofs)
    r, s = asm.cell_residual(MeshField((space, u)), MeshField((space, w)), 0.7)
    assert r.sum() == pytest.approx(-asm.residual(u, 0.7) @ w, rel=1e-11)
    assert np.all(s >= 0)


def test_flat_kinematics_zero_for_zero_displacement():
    g = rectangle(1, 1, 0.01, 2)
    pts = np.array([[0.2, 0.4], [0.9, 0.1]])
    X = g.derivatives(pts)
    kin = kinematics(X, np.zeros_like(X))
    np.testing.assert_allclose(kin.eps, 0.0, atol=1e-15)
    np.testing.assert_allclose(kin.kappa, 0.0, atol=1e-15)


def test_symmetry_constraint_keeps_tangential_freedom():
    space = uniform(2, 2)
    pr = ShellProblem(rectangle(1, 1, 0.01, 2), Material(1.0, 0.3), (Constraint("u0", (0,), "symmetry"),))
    cm = assembler(pr, space).constraint_map()
    # one normal component fixed plus one slope coupling per boundary function
    n_side = int(np.sqrt(space.n_functions))
    assert cm.n_free == 3 * space.n_functions - n_side - 2 * n_side
    Z = cm.Z.toarray()
    np.testing.assert_allclose(Z.T @ Z, np.eye(cm.n_free), atol=1e-12)
