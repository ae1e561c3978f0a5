"""Estimator-style facade over the goal-adaptive loop.

>>> solver = GoalAdaptiveSolver(degree=3, level=2, goal="displacement")
>>> solver.fit(problem)                              # doctest: +SKIP
>>> solver.predict([[0.5, 0.5]])                      # doctest: +SKIP

Hyper-parameters follow the scikit-learn convention (plain constructor
arguments, ``get_params``/``set_params``, fitted attributes end in ``_``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapt import Continuation, MarkConfig, adaptive_loop
from .bench.geometries import analysis_basis
from .dwr import GoalFunctional
from .shell import ShellProblem
from .solve import ArcLengthConfig
from .thb import HierarchicalMesh

__all__ = ["GoalAdaptiveSolver"]


class GoalAdaptiveSolver(BaseEstimator):
    """Solve a shell problem and adapt the mesh to a goal functional.

    Parameters
    ----------
    degree, level : spline degree and initial uniform level.
    goal : a :class:`GoalFunctional` or a spec string such as ``"stretch:component:0"``.
    rho_r, rho_c, tol_r, tol_c, max_iter : marking fractions, tolerance band and
        inner-iteration cap (see :class:`MarkConfig`).
    max_level, m : hierarchy depth cap and admissibility class.
    lams : load factors for Newton stepping (ignored for linear problems).
    arc_length, n_steps : use Crisfield stepping with this arc length instead.
    adapt : ``False`` keeps the initial mesh (estimates are still reported).
    """

    def __init__(
        self,
        degree=3,
        level=2,
        goal="displacement",
        rho_r=0.5,
        rho_c=0.05,
        tol_r=1e-10,
        tol_c=1e-8,
        max_iter=5,
        max_level=8,
        m=2,
        lams=(1.0,),
        arc_length=None,
        n_steps=10,
        adapt=True,
    ):
        self.degree = degree
        self.level = level
        self.goal = goal
        self.rho_r = rho_r
        self.rho_c = rho_c
        self.tol_r = tol_r
        self.tol_c = tol_c
        self.max_iter = max_iter
        self.max_level = max_level
        self.m = m
        self.lams = lams
        self.arc_length = arc_length
        self.n_steps = n_steps
        self.adapt = adapt

    def _goal(self) -> GoalFunctional:
        if isinstance(self.goal, GoalFunctional):
            return self.goal
        from .cli import parse_goal

        return parse_goal(self.goal)

    def _continuation(self, problem: ShellProblem) -> Continuation:
        if self.arc_length is not None:
            return Continuation("arclength", arc=ArcLengthConfig(self.arc_length), n_steps=self.n_steps)
        lams = tuple(self.lams)
        if problem.linear:
            return Continuation("linear", (lams[-1],))
        return Continuation("load", lams)

    def fit(self, problem: ShellProblem, y=None):
        """Run the adaptive loop; ``y`` is accepted for pipeline compatibility and ignored."""
        if not isinstance(problem, ShellProblem):
            raise TypeError("fit expects a ShellProblem")
        config = MarkConfig(self.rho_r, self.rho_c, self.tol_r, self.tol_c, self.max_iter)
        mesh = HierarchicalMesh.uniform(analysis_basis(self.degree), self.level, max_levels=self.max_level + 1, m=self.m)
        res = adaptive_loop(problem, self._goal(), mesh, config, self._continuation(problem), adapt=self.adapt)
        if res.error is not None:
            raise res.error
        self.problem_ = problem
        self.history_ = res.history
        self.states_ = res.states
        self.state_ = res.states[-1]
        self.space_ = self.state_.space
        last = res.history[-1]
        self.goal_value_ = last["goal"]
        self.estimate_ = last["dL"]
        self.n_dofs_ = last["dofs"]
        return self

    def predict(self, X) -> np.ndarray:
        """Displacement vectors (n, 3) of the final state at parameter points ``X`` (n, 2)."""
        check_is_fitted(self, "state_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != 2 or X.min() < 0 or X.max() > 1:
            raise ValueError("X must hold parameter points in [0, 1]^2")
        return self.space_.evaluate(self.state_.u.reshape(-1, 3), X)[:, 0, :]

    def score(self, problem=None, y=None) -> float:
        """Corrected goal value ``L(u_h) + dL``."""
        check_is_fitted(self, "state_")
        return float(self.goal_value_ + self.estimate_)

