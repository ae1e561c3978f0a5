import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from goaliga import Constraint, GoalAdaptiveSolver, Material, ShellProblem
from goaliga.bench.geometries import rectangle

SIDES = ("u0", "u1", "v0", "v1")


def plate():
    clamp = tuple(Constraint(s, kind="clamp") for s in SIDES)
    return ShellProblem(rectangle(1, 1, 0.01, 2), Material(1e6, 0.3), clamp, surface_load=(0, 0, 1.0), linear=True)


def test_params_roundtrip_and_clone():
    est = GoalAdaptiveSolver(degree=2, goal="strain")
    assert est.get_params()["goal"] == "strain"
    est.set_params(max_iter=2)
    assert clone(est).max_iter == 2


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        GoalAdaptiveSolver().predict([[0.5, 0.5]])


def test_fit_refines_and_predicts_deflection():
    est = GoalAdaptiveSolver(degree=2, level=2, goal="displacement", tol_r=0, tol_c=0, max_iter=2, max_level=4)
    est.fit(plate())
    assert len(est.history_) == 2
    assert est.history_[1]["dofs"] > est.history_[0]["dofs"]
    w = est.predict([[0.5, 0.5], [0.3, 0.6], [0.6, 0.3]])
    assert w.shape == (3, 3)
    assert w[0, 2] > 0
    assert est.score() == pytest.approx(est.goal_value_ + est.estimate_)


def test_fit_rejects_other_inputs():
    with pytest.raises(TypeError):
        GoalAdaptiveSolver().fit(np.zeros((3, 2)))
    est = GoalAdaptiveSolver(degree=2, level=1, adapt=False).fit(plate())
    with pytest.raises(ValueError):
        est.predict([[1.5, 0.2]])
