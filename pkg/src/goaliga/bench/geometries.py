"""Single-patch geometries used by the benchmarks."""

from __future__ import annotations

import numpy as np

from ..splines import GeometryMap, KnotVector, TensorBasis, elevation_matrix

__all__ = ["rectangle", "disc", "cylinder_panel", "roof_quarter", "elevate_geometry", "analysis_basis"]


def _bezier(p: int) -> KnotVector:
    return KnotVector.uniform(p, 1)


def elevate_geometry(g: GeometryMap, degree: int) -> GeometryMap:
    """Degree-elevate a single-element (Bezier) patch to ``degree`` in both directions."""
    kvs = list(g.basis.kvs)
    P = g.control_points
    w = g.weights if g.rational else np.ones(g.basis.shape)
    Pw = np.concatenate([P * w[..., None], w[..., None]], axis=-1)
    for d in range(2):
        while kvs[d].degree < degree:
            E = elevation_matrix(kvs[d])
            Pw = np.moveaxis(np.tensordot(E, np.moveaxis(Pw, d, 0), axes=(1, 0)), 0, d)
            kvs[d] = KnotVector.uniform(kvs[d].degree + 1, 1) if kvs[d].n_spans == 1 else None
            if kvs[d] is None:
                raise ValueError("only Bezier patches are elevated")
    basis = TensorBasis(tuple(kvs))
    wn = Pw[..., 3]
    cp = Pw[..., :3] / wn[..., None]
    return GeometryMap(basis, cp, wn if g.rational else None, g.thickness)


def analysis_basis(degree: int) -> TensorBasis:
    """Level-0 analysis basis: one Bezier element of the given degree."""
    return TensorBasis((_bezier(degree), _bezier(degree)))


def rectangle(Lx: float, Ly: float, thickness: float, degree: int = 2) -> GeometryMap:
    """Flat rectangle [0, Lx] x [0, Ly] in the xy-plane, u along x."""
    kv = _bezier(degree)
    gr = kv.greville()
    cp = np.zeros((degree + 1, degree + 1, 3))
    cp[..., 0] = Lx * gr[:, None]
    cp[..., 1] = Ly * gr[None, :]
    return GeometryMap(TensorBasis((kv, kv)), cp, None, thickness)


def disc(radius: float, thickness: float, degree: int = 2) -> GeometryMap:
    """Biquadratic NURBS disc; each parametric side maps onto a quarter circle."""
    s = np.sqrt(0.5)
    cp = np.array(
        [
            [[-s, -s, 0], [-2 * s, 0, 0], [-s, s, 0]],
            [[0, -2 * s, 0], [0, 0, 0], [0, 2 * s, 0]],
            [[s, -s, 0], [2 * s, 0, 0], [s, s, 0]],
        ],
        dtype=float,
    )
    w = np.array([[1, s, 1], [s, 1, s], [1, s, 1]], dtype=float)
    g = GeometryMap(TensorBasis((_bezier(2), _bezier(2))), radius * cp, w, thickness)
    return elevate_geometry(g, degree)


def cylinder_panel(radius: float, angle: float, length: float, thickness: float, degree: int = 2) -> GeometryMap:
    """Cylindrical panel: exact circular arc of opening ``2 angle`` in u, straight in v.

    The arc lies in the xz-plane centred on the z-axis apex at x=0; the
    generator runs along y over ``[0, length]``.
    """
    c = np.cos(angle)
    arc = np.array(
        [
            [-radius * np.sin(angle), radius * c],
            [0.0, radius / c],
            [radius * np.sin(angle), radius * c],
        ]
    )
    cp = np.zeros((3, 3, 3))
    w = np.ones((3, 3))
    for i in range(3):
        for j in range(3):
            cp[i, j] = [arc[i, 0], length * j / 2, arc[i, 1]]
            w[i, j] = c if i == 1 else 1.0
    g = GeometryMap(TensorBasis((_bezier(2), _bezier(2))), cp, w, thickness)
    return elevate_geometry(g, degree)


def roof_quarter(radius: float, angle: float, half_length: float, thickness: float, degree: int = 2) -> GeometryMap:
    """Quarter of a cylindrical roof: arc from the crown (u=0) to ``angle`` (u=1), y in [0, half_length].

    The arc is the exact rational quadratic with middle weight ``cos(angle/2)``.
    """
    h = angle / 2
    c = np.cos(h)
    arc = np.array(
        [
            [0.0, radius],
            [radius * np.tan(h), radius],
            [radius * np.sin(angle), radius * np.cos(angle)],
        ]
    )
    cp = np.zeros((3, 3, 3))
    w = np.ones((3, 3))
    for i in range(3):
        for j in range(3):
            cp[i, j] = [arc[i, 0], half_length * j / 2, arc[i, 1]]
            w[i, j] = c if i == 1 else 1.0
    g = GeometryMap(TensorBasis((_bezier(2), _bezier(2))), cp, w, thickness)
    return elevate_geometry(g, degree)
