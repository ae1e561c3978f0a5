import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goaliga.errors import ContractError
from goaliga.splines import KnotVector, TensorBasis, insert_knots
from goaliga.thb import (
    CellId,
    HierarchicalMesh,
    ThbSpace,
    coarsen,
    coarsening_neighborhood,
    coarsening_neighborhood_marked,
    eval_thb,
    is_admissible,
    multi_level_support_extension,
    refine,
    refine_closure,
    refinement_neighborhood,
)
from goaliga.verify import check_two_path, coarsenable_groups, random_mesh

from .oracles import cox_de_boor, tensor_value


def square_basis(p, n):
    return TensorBasis((KnotVector.uniform(p, n), KnotVector.uniform(p, n)))


def fig3_mesh():
    """Three-level degree-1 configuration of the admissibility figures (base 4x4)."""
    mesh = HierarchicalMesh(square_basis(1, 4), max_levels=6, m=2)
    mesh._ensure_level(2)
    mesh.domains[1][2:6, 0:4] = True
    mesh.domains[1][4:8, 4:8] = True
    mesh.domains[2][6:8, 4:6] = True
    return mesh


def brute_extension(mesh, Q, k):
    """Level-k cells overlapping supports of level-k B-splines whose support contains Q."""
    basis = mesh.level_basis(k)
    qbox = mesh.cell_box(Q)
    br = mesh.breaks(k)
    out = set()
    for i, j in itertools.product(*(range(n) for n in basis.shape)):
        sup = [(kv.knots[a], kv.knots[a + kv.degree + 1]) for kv, a in zip(basis.kvs, (i, j))]
        if all(lo <= b[0] and b[1] <= hi for (lo, hi), b in zip(sup, qbox)):
            for ci, cj in itertools.product(*(range(len(b) - 1) for b in br)):
                cb = [(br[0][ci], br[0][ci + 1]), (br[1][cj], br[1][cj + 1])]
                if all(c[0] < s[1] and s[0] < c[1] for c, s in zip(cb, sup)):
                    out.add(CellId(k, (ci, cj)))
    return out


# -- support extensions and neighborhoods -------------------------------------------
def test_extension_degree1_is_8_neighborhood():
    mesh = HierarchicalMesh.uniform(square_basis(1, 4), 1, max_levels=4)
    Q = CellId(1, (3, 4))
    ext = multi_level_support_extension(mesh, Q, 1)
    assert ext == {CellId(1, (i, j)) for i in range(2, 5) for j in range(3, 6)}
    assert ext == brute_extension(mesh, Q, 1)


def test_extension_clipped_at_corner():
    mesh = HierarchicalMesh.uniform(square_basis(2, 4), 0, max_levels=3)
    ext = multi_level_support_extension(mesh, CellId(0, (0, 0)), 0)
    assert ext == {CellId(0, (i, j)) for i in range(3) for j in range(3)}


@pytest.mark.parametrize("p", [1, 2, 3])
def test_extension_multilevel_matches_brute_force(p):
    mesh = HierarchicalMesh.uniform(square_basis(p, 3), 2, max_levels=4)
    rng = np.random.default_rng(p)
    for _ in range(6):
        Q = CellId(2, tuple(int(x) for x in rng.integers(0, 12, 2)))
        for k in (0, 1, 2):
            assert multi_level_support_extension(mesh, Q, k) == brute_extension(mesh, Q, k)


def test_refinement_neighborhood_trivial_cases():
    mesh = HierarchicalMesh.uniform(square_basis(2, 4), 1, max_levels=4)
    for c in mesh.active_cells():
        assert refinement_neighborhood(mesh, c) == set()
    mesh0 = HierarchicalMesh(square_basis(2, 4), max_levels=4)
    assert refinement_neighborhood(mesh0, CellId(0, (1, 1))) == set()


def test_fig3_recursive_closure():
    mesh = fig3_mesh()
    assert is_admissible(mesh)[0]
    closure, skipped = refine_closure(mesh, [CellId(2, (7, 5))])
    assert skipped == set()
    assert closure == {
        CellId(2, (7, 5)),
        CellId(1, (3, 3)),
        CellId(1, (4, 3)),
        CellId(1, (4, 2)),
        CellId(0, (1, 2)),
    }


def test_fig4_coarsening_sets_and_final_mesh():
    mesh = fig3_mesh()
    M_r, _ = refine_closure(mesh, [CellId(2, (7, 5))])
    plain = {c for c in mesh.active_cells() if c.level > 0 and not coarsening_neighborhood(mesh, c)}
    assert plain == {CellId(1, (i, j)) for i in range(4, 8) for j in range(4, 8)} | {
        CellId(2, (i, j)) for i in (6, 7) for j in (4, 5)
    }
    combined = {
        c
        for c in plain
        if not coarsening_neighborhood_marked(mesh, c, None, M_r)
        and not any(s in M_r for s in c.parent().children())
    }
    assert combined == {CellId(1, (i, j)) for i in range(4, 8) for j in (6, 7)} | {
        CellId(1, (i, j)) for i in (6, 7) for j in (4, 5)
    }
    refine(mesh, M_r)
    coarsen(mesh, combined)
    expect = {1: (slice(2, 6), slice(0, 6)), 2: (slice(6, 10), slice(4, 8)), 3: (slice(14, 16), slice(10, 12))}
    for lev, sl in expect.items():
        ref = np.zeros_like(mesh.domains[lev])
        ref[sl] = True
        np.testing.assert_array_equal(mesh.domains[lev], ref)
    assert is_admissible(mesh)[0]


def test_coarsening_neighborhood_island_and_errors():
    mesh = HierarchicalMesh(square_basis(2, 4), max_levels=4)
    refine(mesh, [CellId(0, (1, 1))])
    assert coarsening_neighborhood(mesh, CellId(1, (2, 2))) == set()
    assert coarsening_neighborhood_marked(mesh, CellId(1, (2, 2)), 2, set()) == set()
    with pytest.raises(ContractError):
        coarsening_neighborhood(mesh, CellId(0, (0, 0)))


def test_two_path_equivalence():
    res = check_two_path(n_cases=50)
    assert res.passed, res.line()


# -- refine / coarsen ---------------------------------------------------------------
def test_refine_all_uniform():
    mesh = HierarchicalMesh(square_basis(2, 4), max_levels=3)
    refine(mesh, mesh.active_cells())
    assert mesh.n_active() == 64 and all(c.level == 1 for c in mesh.active_cells())


def test_refine_then_coarsen_identity():
    mesh = HierarchicalMesh.uniform(square_basis(3, 4), 1, max_levels=4)
    before = [d.copy() for d in mesh.domains]
    refine(mesh, [CellId(1, (3, 4))])
    coarsen(mesh, CellId(1, (3, 4)).children())
    assert len(mesh.domains) == len(before)
    for a, b in zip(mesh.domains, before):
        np.testing.assert_array_equal(a, b)


def test_refine_respects_cap():
    mesh = HierarchicalMesh.uniform(square_basis(2, 2), 1, max_levels=2)
    rep = refine(mesh, [CellId(1, (0, 0))])
    assert rep.skipped == {CellId(1, (0, 0))} and not rep.refined


def test_coarsen_contract_violation():
    mesh = HierarchicalMesh(square_basis(2, 4), max_levels=5)
    refine(mesh, [CellId(0, (1, 1))])
    refine(mesh, [CellId(1, (2, 2))])
    bad = [c for c in mesh.active_cells() if c.level == 1 and coarsening_neighborhood(mesh, c)]
    assert bad
    with pytest.raises(ContractError):
        coarsen(mesh, [bad[0]])


def test_is_admissible_witness():
    mesh = HierarchicalMesh(square_basis(2, 4), max_levels=5)
    mesh._ensure_level(2)
    mesh.domains[1][2:4, 2:4] = True
    mesh.domains[2][4:6, 4:6] = True  # three levels on top of each other
    ok, witness = is_admissible(mesh)
    assert not ok and witness.level == 2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000), p=st.integers(1, 3))
def test_random_meshes_admissible_and_cover(seed, p):
    mesh = random_mesh(np.random.default_rng(seed), degree=p, steps=5, max_levels=5)
    assert is_admissible(mesh)[0]
    assert abs(mesh.total_area() - 1.0) < 1e-12
    for c in coarsenable_groups(mesh):
        trial = mesh.copy()
        coarsen(trial, [c])
        assert is_admissible(trial)[0]


# -- evaluation -----------------------------------------------------------------------
def test_single_level_equals_tensor_basis():
    basis = square_basis(2, 3)
    space = ThbSpace(HierarchicalMesh(basis, max_levels=3))
    for u, v in [(0.1, 0.2), (0.5, 0.95), (1.0, 0.0)]:
        for f, val, grad, hess in eval_thb(space, u, v, 2):
            i, j = np.unravel_index(space.function_index[f], basis.shape)
            assert abs(val - tensor_value(basis.kvs, i, j, u, v)) < 1e-14


def test_fig2_truncation_1d():
    kv = KnotVector(2, np.r_[0, 0, np.linspace(0, 1, 9), 1, 1])
    mesh = HierarchicalMesh(TensorBasis((kv,)), max_levels=3)
    mesh._ensure_level(1)
    mesh.domains[1][4:10] = True  # support of the middle coarse function B_4
    space = ThbSpace(mesh)
    assert list(space.level_functions[0]) == [0, 1, 2, 3, 5, 6, 7, 8, 9]
    fine_kv = mesh.level_basis(1).kvs[0]
    assert list(space.level_functions[1]) == [6, 7, 8, 9]
    _, M = insert_knots(kv, 0.5 * (kv.breaks[:-1] + kv.breaks[1:]))
    inside = np.isin(np.arange(fine_kv.n_functions), [6, 7, 8, 9])
    x = np.linspace(0, 1, 101)
    F, V = space.evaluate_basis(x[:, None], 0)
    for q, u in enumerate(x):
        for f, val in zip(F[q], V[q, 0]):
            if f < 0:
                continue
            lev, (i,) = space.function_tensor_index(np.array([f]))
            if lev[0] == 1:
                ref = cox_de_boor(fine_kv.knots, 2, i[0], u)
            else:
                coef = np.where(inside, 0.0, M[:, i[0]])
                ref = sum(c * cox_de_boor(fine_kv.knots, 2, j, u) for j, c in enumerate(coef) if c)
            assert abs(val - ref) < 1e-14
        assert abs(V[q, 0].sum() - 1) < 1e-14


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 100_000), enriched=st.booleans())
def test_partition_of_unity_random(seed, enriched):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng, degree=int(rng.integers(1, 4)), steps=4, max_levels=5)
    space = ThbSpace(mesh, enriched=enriched)
    F, V = space.evaluate_basis(rng.random((1000, 2)), 2)
    assert np.abs(V[:, 0].sum(1) - 1).max() < 1e-12
    assert np.abs(V[:, 1:].sum(2)).max() < 1e-8
    assert np.all(V[:, 0] >= -1e-15)
    span = space.cell_level - space.cell_min_function_level()
    assert span.max() <= mesh.m - 1


def test_enriched_contains_primal_space():
    rng = np.random.default_rng(3)
    mesh = random_mesh(rng, degree=2, steps=3, max_levels=4)
    prim, enr = ThbSpace(mesh), ThbSpace(mesh, enriched=True)
    assert enr.n_functions > prim.n_functions
    c = rng.standard_normal(prim.n_functions)
    cells, pts, _ = enr.quadrature(4)
    pts = pts.reshape(-1, 2)
    y = prim.evaluate(c, pts)[:, 0, 0]
    F, V = enr.evaluate_basis(pts, 0)
    A = np.zeros((len(pts), enr.n_functions))
    for q in range(len(pts)):
        ok = F[q] >= 0
        A[q, F[q][ok]] = V[q, 0][ok]
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    assert np.abs(A @ coef - y).max() < 1e-10


def test_dump(tmp_path):
    mesh = HierarchicalMesh(square_basis(2, 2), max_levels=3)
    refine(mesh, [CellId(0, (0, 0))])
    mesh.dump(tmp_path / "m.csv", {CellId(1, (0, 0)): 0.5})
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "level,lo_u,hi_u,lo_v,hi_v,indicator"
    assert len(rows) == 1 + mesh.n_active()
