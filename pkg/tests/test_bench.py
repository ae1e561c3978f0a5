import csv

import numpy as np
import pytest
from numpy.polynomial import Polynomial as P

from goaliga.bench.analytic import (
    bessel_characteristic,
    circular_plate_frequencies,
    clamped_disc_roots,
    manufactured_plate,
    plate_buckling_loads,
)
from goaliga.bench.cases import (
    COLUMNS,
    FIXTURE,
    ROOF,
    BenchmarkCase,
    limit_points,
    load_roof_fixture,
    run_benchmark,
    write_csv,
)


def test_manufactured_load_is_biharmonic_of_solution():
    mp = manufactured_plate()
    a = P([0, 0, 1]) * P([-1, 1]) ** 2
    rng = np.random.default_rng(0)
    x = rng.random((20, 2))
    ax, ay = a(x[:, 0]), a(x[:, 1])
    lap2 = a.deriv(4)(x[:, 0]) * ay + 2 * a.deriv(2)(x[:, 0]) * a.deriv(2)(x[:, 1]) + ax * a.deriv(4)(x[:, 1])
    np.testing.assert_allclose(mp.load(x)[:, 2], mp.D * lap2, rtol=1e-13)
    np.testing.assert_array_equal(mp.load(x)[:, :2], 0.0)


def test_manufactured_solution_is_clamped():
    mp = manufactured_plate(A=3.0)
    s = np.linspace(0, 1, 7)
    edges = np.concatenate([np.c_[s, 0 * s], np.c_[s, 1 + 0 * s], np.c_[0 * s, s], np.c_[1 + 0 * s, s]])
    d = mp.derivs(edges)[:, :3, 2]  # w, w_x, w_y
    np.testing.assert_allclose(d, 0.0, atol=1e-15)


def test_plate_parameters():
    mp = manufactured_plate()
    assert (mp.E, mp.nu, mp.t) == (1e6, 0.3, 1e-2)


def test_flexural_rigidity_of_disc():
    D = 1.0 * 0.01**3 / (12 * (1 - 0.3**2))
    assert D == pytest.approx(9.16e-8, rel=1e-3)


def test_disc_reference_values():
    # the reported values are the squared angular frequencies, listed with multiplicity
    mu = circular_plate_frequencies(6) ** 2
    ref = [9.56e-4, 4.14e-3, 4.14e-3, 1.11e-2, 1.11e-2, 1.45e-2]
    np.testing.assert_allclose(mu, ref, rtol=5e-3)


def test_bessel_roots_frozen():
    g = [r for r, _ in clamped_disc_roots(6)]
    np.testing.assert_allclose(g, [3.19622, 4.61090, 4.61090, 5.90568, 5.90568, 6.30644], atol=1e-5)
    assert [m for _, m in clamped_disc_roots(6)] == [0, 1, 1, 2, 2, 0]


def test_bessel_roots_stable_under_bracket_perturbation():
    a = np.array([r for r, _ in clamped_disc_roots(8)])
    b = np.array([r for r, _ in clamped_disc_roots(8, step=0.0371)])
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    for g, m in clamped_disc_roots(8):
        assert abs(bessel_characteristic(g, m)) < 1e-12


def test_radius_scaling():
    w1 = circular_plate_frequencies(4, radius=1.0)
    w2 = circular_plate_frequencies(4, radius=2.0)
    np.testing.assert_allclose(w2, w1 / 4, rtol=1e-12)


@pytest.mark.parametrize("mn, ref", [((1, 1), 1.808), ((1, 2), 4.519), ((2, 1), 4.519), ((2, 2), 7.230), ((3, 1), 9.038)])
def test_plate_buckling_loads(mn, ref):
    assert plate_buckling_loads(*mn) == pytest.approx(ref, abs=1e-3)


def test_plate_buckling_rejects_zero_mode():
    with pytest.raises(ValueError):
        plate_buckling_loads(0, 1)


def test_roof_parameters_in_millimetres():
    assert ROOF["radius"] == 2540.0 and ROOF["half_length"] * 2 == 508.0
    assert ROOF["thickness"] == 6.35 and ROOF["E"] == 3102.0 and ROOF["angle"] == 0.1


def test_limit_points_of_parabola():
    s = np.arange(10.0)
    lam = 1 - (s - 4.3) ** 2
    (kind, peak), = limit_points(lam)
    assert kind == "max" and peak == pytest.approx(1.0, rel=1e-12)
    assert limit_points(s) == []


def test_roof_fixture_has_two_limit_points():
    fx = load_roof_fixture()
    assert FIXTURE.is_file()
    assert fx["limit_max"] > 0 > fx["limit_min"]


def test_case_validation():
    with pytest.raises(ValueError):
        BenchmarkCase("cantilever")
    with pytest.raises(ValueError):
        BenchmarkCase("roof", degree=1)
    with pytest.raises(ValueError):
        BenchmarkCase("roof", levels=())


def test_write_csv_roundtrips_floats(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": "x"}]
    path = write_csv(rows, tmp_path / "t.csv", ["a", "b"])
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert got == [{"a": "1", "b": repr(0.1 + 0.2)}]


def test_run_benchmark_buckling_small(tmp_path):
    res = run_benchmark("plate-buckling", tmp_path, levels=(2,))
    with open(res["csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == COLUMNS["plate-buckling"]
    assert len(rows) == 4
    np.testing.assert_allclose([float(r["load_an"]) for r in rows], [1.8076, 4.5190, 7.2304, 9.0380], atol=1e-4)
    np.testing.assert_allclose([float(r["load"]) for r in rows], [float(r["load_an"]) for r in rows], rtol=5e-2)


def test_run_benchmark_is_deterministic(tmp_path):
    a = run_benchmark("plate-static", tmp_path / "a", degree=2, levels=(2,))
    b = run_benchmark("plate-static", tmp_path / "b", degree=2, levels=(2,))
    assert a["csv"].read_bytes() == b["csv"].read_bytes()
