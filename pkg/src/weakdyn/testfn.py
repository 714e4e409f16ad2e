"""Compactly supported test functions and their placement on a time grid."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateTestFunction, InvalidPlacement
from .trajectory import TimeGrid

__all__ = [
    "BumpTestFunction",
    "PlacementPlan",
    "place_supports",
    "bump_functions",
    "tabulate",
    "SymmetricQuadrature",
    "symmetric_trapezoid",
    "ThreePointTestFunction",
    "three_point_testfn",
]


@dataclass(frozen=True)
class BumpTestFunction:
    """``phi(t) = C (t - a)^p (b - t)^p`` on ``[a, b]``, zero elsewhere.

    ``C`` normalizes the peak (at the midpoint) to one.  ``p >= 2`` makes both
    ``phi`` and ``phi'`` vanish at the endpoints.
    """

    a: float
    b: float
    p: int = 2

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a}, b={self.b}")
        if int(self.p) != self.p or self.p < 2:
            raise ValueError(f"p must be an integer >= 2, got {self.p}")

    @property
    def C(self) -> float:
        return (0.5 * (self.b - self.a)) ** (-2 * self.p)

    @property
    def center(self) -> float:
        return 0.5 * (self.a + self.b)

    def __call__(self, t):
        return self.eval(t)

    def eval(self, t):
        """Return ``(phi(t), phi'(t))``; scalar in, scalars out."""
        t_arr = np.asarray(t, dtype=float)
        a, b, p, C = self.a, self.b, self.p, self.C
        inside = (t_arr >= a) & (t_arr <= b)
        u = np.where(inside, t_arr - a, 0.0)
        v = np.where(inside, b - t_arr, 0.0)
        uv1 = (u * v) ** (p - 1)
        value = np.where(inside, C * uv1 * u * v, 0.0)
        deriv = np.where(inside, C * p * uv1 * (v - u), 0.0)
        if np.ndim(t) == 0:
            return float(value), float(deriv)
        return value, deriv


@dataclass(frozen=True)
class PlacementPlan:
    """Supports of ``J`` bump functions on an index grid ``0..K``.

    Each support spans ``ell`` consecutive points, neighbours share
    ``ell_overlap`` of them.  Supports are left-aligned; a remainder at the
    right end that cannot hold a full support is left uncovered.
    """

    K: int
    ell: int
    p: int
    s: float
    ell_overlap: int
    J: int
    supports: tuple

    @property
    def stride(self) -> int:
        return self.ell - self.ell_overlap


def overlap_points(ell: int, p: int, s: float) -> int:
    return int(math.floor(ell * (1.0 - math.sqrt(1.0 - s ** (1.0 / p)))))


def place_supports(K: int, ell: int, p: int, s: float) -> PlacementPlan:
    if not 2 <= ell <= K + 1:
        raise InvalidPlacement(f"support width ell={ell} must lie in [2, K+1={K + 1}]")
    if not 0 <= s < 1:
        raise InvalidPlacement(f"overlap s={s} must lie in [0, 1)")
    if p < 2:
        raise InvalidPlacement(f"degree p={p} must be >= 2")
    ell_overlap = overlap_points(ell, p, s)
    stride = ell - ell_overlap
    if stride <= 0:
        raise InvalidPlacement(f"ell_overlap={ell_overlap} >= ell={ell}")
    J = 1 + (K + 1 - ell) // stride
    supports = tuple((j * stride, j * stride + ell - 1) for j in range(J))
    return PlacementPlan(K, ell, p, s, ell_overlap, J, supports)


def bump_functions(plan: PlacementPlan, grid: TimeGrid) -> list[BumpTestFunction]:
    """Bump functions whose supports are the plan's index ranges on ``grid``."""
    if plan.K != grid.K:
        raise ValueError(f"plan built for K={plan.K}, grid has K={grid.K}")
    return [BumpTestFunction(grid.point(i0), grid.point(i1), plan.p) for i0, i1 in plan.supports]


def tabulate(testfns, times) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of each test function at ``times``: two ``(Q, J)`` arrays."""
    times = np.asarray(times, dtype=float)
    phi = np.empty((times.size, len(testfns)))
    dphi = np.empty_like(phi)
    for j, tf in enumerate(testfns):
        phi[:, j], dphi[:, j] = tf.eval(times)
    return phi, dphi


@dataclass(frozen=True)
class SymmetricQuadrature:
    """Quadrature nodes ``t_star + i h`` for ``i = -m..m`` with symmetric weights."""

    t_star: float
    h: float
    m: int
    weights: np.ndarray
    n0: Optional[int] = None
    nbar: Optional[int] = None

    @property
    def S(self) -> float:
        return 2 * self.m * self.h

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.m, self.m + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.t_star + self.offsets * self.h

    def weight(self, i: int) -> float:
        return float(self.weights[i + self.m])


def symmetric_trapezoid(t_star: float, m: int, h: float, dt: Optional[float] = None) -> SymmetricQuadrature:
    """Trapezoid rule on ``2m + 1`` nodes: end weights ``h/2``, interior ``h``.

    With ``dt`` given, ``n0 = t_star/dt`` and ``nbar = h/dt`` are recorded
    (rounded to the nearest integer).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not h > 0:
        raise ValueError("h must be positive")
    w = np.full(2 * m + 1, float(h))
    w[0] = w[-1] = 0.5 * h
    n0 = nbar = None
    if dt is not None:
        n0, nbar = int(round(t_star / dt)), int(round(h / dt))
    return SymmetricQuadrature(float(t_star), float(h), int(m), w, n0, nbar)


@dataclass(frozen=True)
class ThreePointTestFunction:
    """Point values of a test function on a three-node symmetric rule.

    Arrays are ordered by node offset ``i = -1, 0, 1``.  ``psi`` and ``dpsi``
    are the weighted values ``w_i phi_i`` and ``w_i phi'_i``.
    """

    lam: float
    quad: SymmetricQuadrature
    phi: np.ndarray
    dphi: np.ndarray

    @property
    def psi(self) -> np.ndarray:
        return self.quad.weights * self.phi

    @property
    def dpsi(self) -> np.ndarray:
        return self.quad.weights * self.dphi


def three_point_testfn(lam: float, S: float, quad: Optional[SymmetricQuadrature] = None) -> ThreePointTestFunction:
    """Test function on ``m = 1`` nodes that makes the weak estimator exact.

    The values are chosen so that the weak-form estimate of ``lam`` in
    ``x' = lam x`` carries no truncation error: ``sum psi = 1``,
    ``2 h psi'_1 = -1`` and ``psi'_1 e(h) + psi_1 e'(h) = 0`` with
    ``e(t) = sinh(lam t) - lam t``.  Without ``quad`` the trapezoid rule with
    ``h = S/2`` centred at zero is used.
    """
    from .estimator1d import e_lambda, e_lambda_prime

    if quad is None:
        quad = symmetric_trapezoid(0.0, 1, 0.5 * S)
    if quad.m != 1:
        raise ValueError("three-point test function needs m = 1")
    h = quad.h
    if not math.isclose(2 * h, S, rel_tol=1e-12):
        raise ValueError(f"support S={S} inconsistent with spacing h={h}")
    ep = e_lambda_prime(lam, h)
    if lam == 0 or ep == 0:
        raise DegenerateTestFunction(f"e'_lambda(h) vanishes for lam={lam}, h={h}")
    ratio = e_lambda(lam, h) / (S * ep)
    _, w0, w1 = quad.weights
    phi1 = ratio / w1
    phi0 = (1.0 - 2.0 * ratio) / w0
    dphi1 = -1.0 / (w1 * S)
    phi = np.array([phi1, phi0, phi1])
    dphi = np.array([-dphi1, 0.0, dphi1])
    return ThreePointTestFunction(float(lam), quad, phi, dphi)
