"""Closed-form reference solutions for the benchmark problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import brentq

from ..errors import SolverError

__all__ = [
    "ManufacturedPlate",
    "manufactured_plate",
    "bessel_characteristic",
    "clamped_disc_roots",
    "circular_plate_frequencies",
    "plate_buckling_loads",
]


@dataclass(frozen=True)
class ManufacturedPlate:
    """Clamped unit plate with ``w = A x^2 (x-1)^2 y^2 (y-1)^2`` and ``f = D lap^2 w``."""

    E: float = 1e6
    nu: float = 0.3
    t: float = 1e-2
    A: float = 1.0

    @property
    def D(self) -> float:
        return self.E * self.t**3 / (12 * (1 - self.nu**2))

    @staticmethod
    def _a(x):
        return x**2 * (x - 1) ** 2, 2 * x * (x - 1) * (2 * x - 1), 12 * x**2 - 12 * x + 2, 24 * x - 12

    def load(self, x: np.ndarray) -> np.ndarray:
        """Surface load (npts, 3) at physical points."""
        a, _, a2, _ = self._a(x[:, 0])
        b, _, b2, _ = self._a(x[:, 1])
        f = np.zeros((len(x), 3))
        f[:, 2] = self.D * self.A * (24 * b + 2 * a2 * b2 + 24 * a)
        return f

    def derivs(self, pts: np.ndarray) -> np.ndarray:
        """Displacement derivatives (npts, 6, 3) in the order (0,0),(1,0),(0,1),(2,0),(0,2),(1,1)."""
        pts = np.atleast_2d(pts)
        a, a1, a2, _ = self._a(pts[:, 0])
        b, b1, b2, _ = self._a(pts[:, 1])
        out = np.zeros((len(pts), 6, 3))
        out[:, :, 2] = self.A * np.stack([a * b, a1 * b, a * b1, a2 * b, a * b2, a1 * b1], 1)
        return out

    @property
    def displacement_norm(self) -> float:
        """Exact ``int w^2`` (the one-dimensional factor integrates to 1/630)."""
        return self.A**2 / 630.0**2


def manufactured_plate(A: float = 1.0, E: float = 1e6, nu: float = 0.3, t: float = 1e-2) -> ManufacturedPlate:
    return ManufacturedPlate(E, nu, t, A)


def bessel_characteristic(gamma: float, m: int, R: float = 1.0) -> float:
    """Frequency equation of the clamped circular plate for circumferential order ``m``."""
    x = gamma * R
    Jm, Im = special.jv(m, x), special.iv(m, x)
    Jp, Ip = special.jvp(m, x), special.ivp(m, x)
    # scale by I_m to keep the value O(1)
    return (Jm * Ip - Im * Jp) / Im


def clamped_disc_roots(n: int = 6, m_max: int = 6, R: float = 1.0, step: float = 0.05) -> list[tuple[float, int]]:
    """Smallest ``n`` roots ``(gamma, m)`` with multiplicity (``m > 0`` counts twice)."""
    roots = []
    for m in range(m_max + 1):
        x = np.arange(step, 30.0, step) / R
        f = np.array([bessel_characteristic(g, m, R) for g in x])
        for i in np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0):
            try:
                g = brentq(bessel_characteristic, x[i], x[i + 1], args=(m, R), xtol=1e-15, rtol=1e-15)
            except ValueError as exc:  # pragma: no cover
                raise SolverError("root bracketing failed", m=m) from exc
            roots += [(g, m)] * (1 if m == 0 else 2)
    roots.sort()
    if len(roots) < n:
        raise SolverError("not enough roots found", n=n)
    return roots[:n]


def circular_plate_frequencies(
    n: int = 6, radius: float = 1.0, E: float = 1.0, nu: float = 0.3, t: float = 0.01, rho: float = 1.0
) -> np.ndarray:
    """Angular frequencies ``gamma^2 sqrt(D / (rho t))`` of the clamped disc with multiplicity."""
    D = E * t**3 / (12 * (1 - nu**2))
    g = np.array([r for r, _ in clamped_disc_roots(n, R=radius)])
    return g**2 * np.sqrt(D / (rho * t))


def plate_buckling_loads(m: int, n: int, E: float = 1e6, nu: float = 0.3, t: float = 0.01, L: float = 1.0) -> float:
    """Critical line load ``D pi^2 / L^2 (m^2 + n^2)`` of the simply supported square plate."""
    if m < 1 or n < 1:
        raise ValueError("mode numbers start at 1")
    D = E * t**3 / (12 * (1 - nu**2))
    return D * np.pi**2 / L**2 * (m**2 + n**2)
