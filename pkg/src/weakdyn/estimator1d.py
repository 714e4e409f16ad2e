"""Closed-form parameter estimators for ``x' = lam x`` from noisy samples.

Covers the strong-form (forward Euler one-step) and weak-form (single test
function) least-squares estimators, their exact error expressions, the
small-step limit of the strong estimator, and Monte-Carlo drivers.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConditionViolation, DegenerateData
from .testfn import three_point_testfn

__all__ = [
    "e_lambda",
    "e_lambda_prime",
    "euler_truncation",
    "EstimatorReport",
    "strong_estimator",
    "weak_estimator",
    "strong_limit",
    "check_weak_conditions",
    "weak_error_formula",
    "variance_V",
    "Scenario1D",
    "CellStats",
    "noise_stream",
    "monte_carlo",
    "ContinuousStrongError",
    "CrossingResult",
    "find_crossing_dt",
]

_SERIES_CUTOFF = 1.0


def _sinh_minus_linear(z: float) -> float:
    """``sinh(z) - z`` without cancellation near zero."""
    if abs(z) >= _SERIES_CUTOFF:
        return math.sinh(z) - z
    term, total, z2 = z, 0.0, z * z
    for k in range(1, 12):
        term *= z2 / ((2 * k) * (2 * k + 1))
        total += term
    return total


def _expm1_minus_linear(z: float) -> float:
    """``exp(z) - 1 - z`` without cancellation near zero."""
    if abs(z) >= _SERIES_CUTOFF:
        return math.expm1(z) - z
    term, total = z, 0.0
    for k in range(2, 24):
        term *= z / k
        total += term
    return total


def e_lambda(lam, t):
    """``sinh(lam t) - lam t``."""
    return _sinh_minus_linear(lam * t)


def e_lambda_prime(lam, t):
    """Time derivative of :func:`e_lambda`: ``lam cosh(lam t) - lam``."""
    return 2.0 * lam * math.sinh(0.5 * lam * t) ** 2


def euler_truncation(lam, t):
    """Forward-Euler estimator bias ``(exp(lam t) - 1)/t - lam``; positive for ``t > 0``."""
    if not t > 0:
        raise ValueError("t must be positive")
    return _expm1_minus_linear(lam * t) / t


@dataclass
class EstimatorReport:
    """Strong-form estimate with its error split into truncation and noise parts."""

    theta: float
    dt: float
    lam: Optional[float] = None
    error: Optional[float] = None
    truncation: Optional[float] = None
    noise_part: Optional[float] = None
    rel_error: Optional[float] = None


def strong_estimator(y, dt: float, lam: Optional[float] = None, noise=None) -> EstimatorReport:
    """Minimizer of ``(1/K) sum_k |(1 + theta dt) y_{k-1} - y_k|^2``.

    With the true rate ``lam`` the report splits ``theta - lam`` into the Euler
    truncation part and the noise part.  The noise part is computed from
    ``noise`` (the additive noise realization ``y - x``) when given, otherwise
    as the remainder.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("need a 1-D sample vector with at least two entries")
    prev = y[:-1]
    den = dt * np.dot(prev, prev)
    if den == 0:
        raise DegenerateData("sum of squared samples is zero")
    theta = float(np.dot(prev, np.diff(y)) / den)
    rep = EstimatorReport(theta, dt)
    if lam is None:
        return rep
    rep.lam = lam
    rep.error = theta - lam
    rep.truncation = euler_truncation(lam, dt)
    if noise is not None:
        eps = np.asarray(noise, dtype=float)
        growth = math.exp(lam * dt)
        rep.noise_part = float(np.dot(prev, eps[1:] - growth * eps[:-1]) / den)
    else:
        rep.noise_part = rep.error - rep.truncation
    rep.rel_error = rep.error / lam
    return rep


def _strong_theta_batch(Y: np.ndarray, dt: float) -> np.ndarray:
    prev = Y[:, :-1]
    return np.einsum("rk,rk->r", prev, np.diff(Y, axis=1)) / (dt * np.einsum("rk,rk->r", prev, prev))


def weak_estimator(ytilde, psi, dpsi) -> float:
    """Minimizer of ``|theta sum y_i psi_i + sum y_i psi'_i|^2``."""
    ytilde = np.asarray(ytilde, dtype=float)
    den = float(np.dot(ytilde, psi))
    if den == 0:
        raise DegenerateData("sum of y_i psi_i is zero")
    return -float(np.dot(ytilde, dpsi)) / den


def strong_limit(lam: float, sigma: float, x0: float, T: float = 1.0, variant: str = "proof") -> float:
    """Limit of ``dt (theta_strong - lam)`` as ``dt -> 0`` with ``K dt = T`` fixed.

    ``variant="proof"`` uses the energy constant ``(exp(2 lam T) - 1)/(2 lam T)``
    obtained from the sum of squared samples; ``variant="statement"`` uses
    ``(exp(lam T) - 1)/(2 lam T)`` for comparison.
    """
    if lam == 0:
        raise ValueError("lam must be nonzero")
    if variant == "proof":
        c = math.expm1(2 * lam * T) / (2 * lam * T)
    elif variant == "statement":
        c = math.expm1(lam * T) / (2 * lam * T)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    s2 = sigma * sigma
    return -s2 / (x0 * x0 * c + s2)


def check_weak_conditions(lam: float, psi, dpsi, h: float, tol: float = 1e-10) -> dict:
    """Residuals of the five exactness conditions; raises if any exceeds ``tol``.

    ``psi``/``dpsi`` are weighted values on nodes ``-m..m`` with spacing ``h``.
    """
    psi = np.asarray(psi, dtype=float)
    dpsi = np.asarray(dpsi, dtype=float)
    m = (psi.size - 1) // 2
    if psi.size != 2 * m + 1 or dpsi.size != psi.size:
        raise ValueError("psi and dpsi must have the same odd length 2m+1")
    pos, neg = slice(m + 1, None), slice(m - 1, None, -1) if m > 0 else slice(0, 0)
    k = np.arange(1, m + 1)
    e = np.array([e_lambda(lam, kk * h) for kk in k])
    ep = np.array([e_lambda_prime(lam, kk * h) for kk in k])
    cond5_terms = dpsi[pos] * e + psi[pos] * ep
    scale5 = max(1.0, float(np.sum(np.abs(dpsi[pos] * e)) + np.sum(np.abs(psi[pos] * ep))))
    res = {
        1: float(np.max(np.abs(psi[pos] - psi[neg]), initial=0.0)),
        2: float(np.max(np.abs(dpsi[pos] + dpsi[neg]), initial=0.0)),
        3: max(abs(float(dpsi[m])), abs(float(psi.sum()) - 1.0)),
        4: abs(float(np.sum(2 * k * h * dpsi[pos])) + 1.0),
        5: abs(float(cond5_terms.sum())) / scale5,
    }
    bad = {c: v for c, v in res.items() if not v <= tol}
    if bad:
        raise ConditionViolation(bad)
    return res


def weak_error_formula(lam: float, sigma: float, x0: float, psi, dpsi, E, h: float,
                       variant: str = "exact", check: bool = True, tol: float = 1e-10) -> float:
    """Relative error ``(theta_weak - lam)/lam`` from the standardized noise ``E``.

    ``x0`` is the noiseless state at the centre node.  ``variant="exact"``
    equals the estimator's relative error for the same realization.
    ``variant="linear"`` drops the noise term from the denominator, giving the
    part that is linear in ``sigma``.
    """
    psi = np.asarray(psi, dtype=float)
    dpsi = np.asarray(dpsi, dtype=float)
    E = np.asarray(E, dtype=float)
    if check:
        check_weak_conditions(lam, psi, dpsi, h, tol)
    m = (psi.size - 1) // 2
    ep = np.array([e_lambda_prime(lam, k * h) for k in range(1, m + 1)])
    base = x0 * (1.0 + 2.0 / lam * float(np.dot(psi[m + 1:], ep)))
    num = -sigma * float(np.dot(E, psi + dpsi / lam))
    if variant == "exact":
        return num / (base + sigma * float(np.dot(E, psi)))
    if variant == "linear":
        return num / base
    raise ValueError(f"unknown variant {variant!r}")


def variance_V(z: float) -> float:
    """Variance profile of the standardized weak-estimator noise; ``V(0) = 0.5``."""
    z = float(z)
    if z == 0.0:
        return 0.5
    if abs(z) < 0.1:
        # series quotient of (sinh z - z) / (z (cosh z - 1))
        z2 = z * z
        num = 1 / 6 + z2 * (1 / 120 + z2 * (1 / 5040 + z2 / 362880))
        den = 1 / 2 + z2 * (1 / 24 + z2 * (1 / 720 + z2 / 40320))
        q = num / den
    elif abs(z) > 700:
        # sinh, cosh overflow; their ratio is 1 to double precision
        q = 1.0 / abs(z)
    else:
        q = (math.sinh(z) - z) / (math.cosh(z) - 1.0) / z
    return (1.0 - q) ** 2 + 0.5 * q * q


# -- Monte Carlo -------------------------------------------------------------

@dataclass(frozen=True)
class Scenario1D:
    """One cell of a parameter sweep.

    For the strong form the trajectory runs over ``[0, T]`` with step ``dt``.
    For the weak form ``x0`` is the state at the test-function centre and
    ``S`` the support length of the three-point test function.
    """

    lam: float = -2.0
    x0: float = 1.0
    T: float = 1.0
    dt: float = 1e-2
    sigma: float = 0.0
    seed: int = 0
    S: Optional[float] = None

    @property
    def K(self) -> int:
        K = int(round(self.T / self.dt))
        if K < 1 or not math.isclose(K * self.dt, self.T, rel_tol=1e-9):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        return K


def noise_stream(seed: int, run: int, n: int) -> np.ndarray:
    """First ``n`` standard normals of the stream keyed by ``(seed, run)``.

    Streams are indexed by absolute time index, so realizations for different
    step counts are nested.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(run)])))
    return gen.standard_normal(n)


@dataclass
class CellStats:
    scenario: Scenario1D
    form: str
    errors: np.ndarray = field(repr=False)

    @property
    def rel_errors(self) -> np.ndarray:
        return self.errors / self.scenario.lam

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean(self.rel_errors))

    @property
    def mean_abs_rel_error(self) -> float:
        return float(np.mean(np.abs(self.rel_errors)))

    @property
    def mean_dt_error(self) -> float:
        return float(self.scenario.dt * np.mean(self.errors))

    @property
    def mean_abs_dt_error(self) -> float:
        return float(self.scenario.dt * np.mean(np.abs(self.errors)))

    @property
    def std_error(self) -> float:
        return float(np.std(self.errors))

    def fraction_rel_above(self, level: float) -> float:
        return float(np.mean(np.abs(self.rel_errors) > level))


def _strong_cell(sc: Scenario1D, runs: int, chunk: int = 64) -> np.ndarray:
    K = sc.K
    x = sc.x0 * np.exp(sc.lam * sc.dt * np.arange(K + 1))
    out = np.empty(runs)
    for start in range(0, runs, chunk):
        stop = min(runs, start + chunk)
        Z = np.stack([noise_stream(sc.seed, r, K + 1) for r in range(start, stop)])
        out[start:stop] = _strong_theta_batch(x + sc.sigma * Z, sc.dt) - sc.lam
    return out


def _weak_cell(sc: Scenario1D, runs: int) -> np.ndarray:
    if sc.S is None:
        raise ValueError("weak-form scenario needs the support length S")
    tf = three_point_testfn(sc.lam, sc.S)
    x = sc.x0 * np.exp(sc.lam * tf.quad.offsets * tf.quad.h)
    Z = np.stack([noise_stream(sc.seed, r, 3) for r in range(runs)])
    Y = x + sc.sigma * Z
    theta = -(Y @ tf.dpsi) / (Y @ tf.psi)
    return theta - sc.lam


def _max_workers() -> int:
    import os

    try:
        return max(1, int(os.environ.get("WEAKDYN_THREADS", "1")))
    except ValueError:
        return 1


def monte_carlo(scenarios: Sequence[Scenario1D], runs: int, form: str = "strong",
                workers: Optional[int] = None) -> list[CellStats]:
    """Estimator errors over ``runs`` noise realizations for every scenario.

    Run ``r`` of a cell uses the noise stream keyed by ``(scenario.seed, r)``,
    so results do not depend on ``workers`` or on the order of cells.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if form not in ("strong", "weak"):
        raise ValueError(f"unknown form {form!r}")
    cell = _strong_cell if form == "strong" else _weak_cell
    workers = workers or _max_workers()
    scenarios = list(scenarios)
    if workers == 1 or len(scenarios) == 1:
        results = [cell(sc, runs) for sc in scenarios]
    else:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda sc: cell(sc, runs), scenarios))
    return [CellStats(sc, form, err) for sc, err in zip(scenarios, results)]


# -- crossing step size ------------------------------------------------------

class ContinuousStrongError:
    """Strong-estimator error as a continuous function of the step size.

    For ``dt = T/N`` the value equals ``theta*(dt) - lam`` on samples
    ``x0 exp(lam j dt) + sigma z_j`` with a fixed standard-normal sequence
    ``z``.  Between ``T/(N+1)`` and ``T/N`` the sum of squares and the noise
    inner product are interpolated linearly in ``dt``.
    """

    def __init__(self, lam: float, x0: float, sigma: float, z: np.ndarray, T: float = 1.0):
        self.lam, self.x0, self.sigma, self.T = lam, x0, sigma, T
        self.z = np.asarray(z, dtype=float)
        self._cache: dict[int, tuple[float, float]] = {}

    @property
    def n_max(self) -> int:
        return self.z.size - 1

    def _sums(self, N: int) -> tuple[float, float]:
        if N in self._cache:
            return self._cache[N]
        if N > self.n_max:
            raise ValueError(f"noise stream too short for N={N}")
        dt = self.T / N
        zz = self.z[: N + 1]
        y = self.x0 * np.exp(self.lam * dt * np.arange(N + 1)) + self.sigma * zz
        prev = y[:-1]
        sq = float(np.dot(prev, prev))
        g = float(np.dot(prev, zz[1:] - math.exp(self.lam * dt) * zz[:-1]))
        self._cache[N] = (sq, g)
        return sq, g

    def at_steps(self, N: int) -> float:
        """Error at ``dt = T/N``."""
        sq, g = self._sums(N)
        dt = self.T / N
        return euler_truncation(self.lam, dt) + self.sigma * g / (dt * sq)

    def __call__(self, dt: float) -> float:
        N = int(math.floor(self.T / dt))
        if self.T / N < dt:  # floor rounding at an exact node
            N -= 1
        N = max(N, 1)
        hi = self.T / N
        if math.isclose(dt, hi, rel_tol=0, abs_tol=0):
            return self.at_steps(N)
        lo = self.T / (N + 1)
        w = (hi - dt) / (hi - lo)
        sq_n, g_n = self._sums(N)
        sq_n1, g_n1 = self._sums(N + 1)
        sq = sq_n + w * (sq_n1 - sq_n)
        g = g_n + w * (g_n1 - g_n)
        return euler_truncation(self.lam, dt) + self.sigma * g / (dt * sq)


@dataclass
class CrossingResult:
    dt: float
    error: float
    bracket: tuple


def find_crossing_dt(sc: Scenario1D, bracket=(1e-4, 1e-1), n_scan: int = 96, run: int = 0,
                     tol: float = 1e-8) -> Optional[CrossingResult]:
    """Step size where the strong estimate equals the true rate, if the error changes sign.

    The error curve for noise stream ``(sc.seed, run)`` is scanned at
    ``n_scan`` log-spaced step counts inside ``bracket``; the first sign change
    is refined to a single step-count interval and solved there with Brent's
    method.  Returns ``None`` when no sign change is found.
    """
    dt_lo, dt_hi = bracket
    n_lo = max(1, int(math.ceil(sc.T / dt_hi - 1e-9)))
    n_hi = int(math.floor(sc.T / dt_lo + 1e-9))
    z = noise_stream(sc.seed, run, n_hi + 2)
    err = ContinuousStrongError(sc.lam, sc.x0, sc.sigma, z, sc.T)
    Ns = np.unique(np.round(np.geomspace(n_lo, n_hi, n_scan)).astype(int))
    vals = [err.at_steps(int(N)) for N in Ns]
    for N, v in zip(Ns, vals):
        if v == 0.0:
            return CrossingResult(sc.T / N, 0.0, (sc.T / N, sc.T / N))
    idx = next((i for i in range(len(Ns) - 1) if np.sign(vals[i]) != np.sign(vals[i + 1])), None)
    if idx is None:
        return None
    a, b = int(Ns[idx]), int(Ns[idx + 1])
    va = vals[idx]
    while b - a > 1:
        mid = (a + b) // 2
        vm = err.at_steps(mid)
        if vm == 0.0:
            return CrossingResult(sc.T / mid, 0.0, (sc.T / mid, sc.T / mid))
        if np.sign(vm) == np.sign(va):
            a, va = mid, vm
        else:
            b = mid
    lo, hi = sc.T / b, sc.T / a
    root = brentq(err, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    val = err(root)
    if abs(val) >= tol:
        # bisect on the error value itself until it is small enough
        flo = err(lo)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = err(mid)
            if abs(fm) < abs(val):
                root, val = mid, fm
            if abs(val) < tol or hi - lo <= 4 * np.finfo(float).eps * hi:
                break
            if np.sign(fm) == np.sign(flo):
                lo, flo = mid, fm
            else:
                hi = mid
    return CrossingResult(float(root), float(val), (lo, hi))
