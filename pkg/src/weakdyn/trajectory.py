"""Dynamics, time integration and noisy trajectory datasets.

The integrators here are written against plain arithmetic so the same code
runs on NumPy arrays and on torch tensors (the latter lets training
differentiate through a one-step prediction).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateState, StepSizeUnderflow

__all__ = [
    "TimeGrid",
    "Dynamics",
    "GenericSystem",
    "TrajectoryDataset",
    "linear_solution",
    "linear_dynamics",
    "integrate",
    "one_step",
    "euler_step",
    "rk23_advance",
    "generate_dataset",
    "add_noise",
    "state_std",
    "damped_oscillator_benchmark",
    "sample_oscillator_states",
    "write_csv",
    "read_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 + i*dt`` for ``i = 0..K``."""

    t0: float
    dt: float
    K: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be an integer >= 1, got {self.K}")
        object.__setattr__(self, "K", int(self.K))

    @property
    def T(self) -> float:
        return self.K * self.dt

    def point(self, i: int) -> float:
        return self.t0 + i * self.dt

    def points(self) -> np.ndarray:
        # t0 + i*dt per point, never accumulated
        return self.t0 + np.arange(self.K + 1) * self.dt

    def subsample(self, nbar: int) -> "TimeGrid":
        return TimeGrid(self.t0, nbar * self.dt, self.K // nbar)


@dataclass
class Dynamics:
    """Autonomous vector field ``x' = f(x)`` on ``R^d``.

    ``rhs`` must accept arrays of shape ``(..., d)``.  ``flow(t, x0)``, when
    given, is the exact solution map.
    """

    dim: int
    rhs: Callable
    flow: Optional[Callable] = None
    name: str = ""

    def __call__(self, x):
        return self.rhs(x)


@dataclass
class GenericSystem(Dynamics):
    """Dynamics given in metriplectic form ``L grad E + M grad S``."""

    energy: Optional[Callable] = None
    entropy: Optional[Callable] = None
    energy_grad: Optional[Callable] = None
    entropy_grad: Optional[Callable] = None
    poisson: Optional[Callable] = None
    friction: Optional[Callable] = None


def linear_solution(lam, x0, t):
    """Exact flow of ``x' = lam * x``."""
    return x0 * np.exp(lam * t)


def linear_dynamics(lam: float) -> Dynamics:
    return Dynamics(1, lambda x: lam * x, flow=lambda t, x0: linear_solution(lam, x0, t),
                    name=f"linear({lam})")


# -- integrators -------------------------------------------------------------

def euler_step(f, y, dt):
    return y + dt * f(y)


def _bs23_step(f, y, h, k1):
    k2 = f(y + (0.5 * h) * k1)
    k3 = f(y + (0.75 * h) * k2)
    y_new = y + h * ((2.0 / 9.0) * k1 + (1.0 / 3.0) * k2 + (4.0 / 9.0) * k3)
    k4 = f(y_new)
    err = h * ((-5.0 / 72.0) * k1 + (1.0 / 12.0) * k2 + (1.0 / 9.0) * k3 - 0.125 * k4)
    return y_new, k4, err


def _to_numpy(a):
    if isinstance(a, np.ndarray):
        return a
    if hasattr(a, "detach"):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def _err_norm(err, y, y_new, rtol, atol) -> float:
    err, y, y_new = _to_numpy(err), _to_numpy(y), _to_numpy(y_new)
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
# PI gains for an embedded pair whose error estimate is O(h^3)
_ALPHA = 0.7 / 3.0
_BETA = 0.4 / 3.0


def _initial_step(f, y, f0, rtol, atol, span):
    y_np, f_np = _to_numpy(y), _to_numpy(f0)
    scale = atol + rtol * np.abs(y_np)
    d0 = np.sqrt(np.mean((y_np / scale) ** 2))
    d1 = np.sqrt(np.mean((f_np / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = _to_numpy(f(y + h0 * f0))
    d2 = np.sqrt(np.mean(((f1 - f_np) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 3.0)
    return min(100 * h0, h1, span)


def rk23_advance(f, y, t0, t1, h=None, rtol=1e-6, atol=1e-9, min_step=1e-12,
                 k1=None, err_prev=1.0):
    """Advance ``y`` from ``t0`` to exactly ``t1`` with Bogacki-Shampine 3(2).

    Returns ``(y, h_next, k1, err_prev)`` so consecutive calls can share the
    step-size controller state.  Raises :class:`StepSizeUnderflow` when the
    accepted step would have to drop below ``min_step``.
    """
    span = t1 - t0
    if span <= 0:
        return y, h, k1, err_prev
    if k1 is None:
        k1 = f(y)
    if h is None:
        h = _initial_step(f, y, k1, rtol, atol, span)
    t = t0
    while True:
        remaining = t1 - t
        last = h >= remaining * (1 - 1e-12)
        h_try = remaining if last else h
        if h_try < min_step and not last:
            raise StepSizeUnderflow(f"step {h_try:.3e} below floor {min_step:.3e} at t={t:.6g}")
        y_new, k_new, err = _bs23_step(f, y, h_try, k1)
        en = _err_norm(err, y, y_new, rtol, atol)
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0:
            if en == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * en ** -_ALPHA * err_prev ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(en, 1e-4)
            y, k1 = y_new, k_new
            if last:
                # keep the controller's proposal, not the clipped landing step
                h = h if h_try < h else h_try * factor
                return y, h, k1, err_prev
            t = t + h_try
            h = h_try * factor
        else:
            factor = _MIN_FACTOR if not np.isfinite(en) else max(_MIN_FACTOR, _SAFETY * en ** (-1.0 / 3.0))
            h = h_try * factor
            if h < min_step:
                raise StepSizeUnderflow(f"step {h:.3e} below floor {min_step:.3e} at t={t:.6g}")


def integrate(dyn, x0, grid: TimeGrid, method: str = "rk23", rtol: float = 1e-6,
              atol: float = 1e-9, min_step: float = 1e-12) -> np.ndarray:
    """Integrate ``dyn`` from ``x0`` and return states at every grid point.

    ``x0`` may carry leading batch dimensions; a batch is integrated as one
    stacked system with a shared step sequence.  Output shape is
    ``(K + 1, *x0.shape)``.
    """
    f = dyn.rhs if isinstance(dyn, Dynamics) else dyn
    x0 = np.asarray(x0, dtype=float)
    if isinstance(dyn, Dynamics) and x0.shape[-1:] != (dyn.dim,):
        raise ValueError(f"state dimension {x0.shape[-1:]} does not match dynamics dim {dyn.dim}")
    out = np.empty((grid.K + 1,) + x0.shape)
    out[0] = x0
    y = x0
    method = method.lower()
    if method in ("euler", "forwardeuler", "forward_euler"):
        for k in range(1, grid.K + 1):
            y = euler_step(f, y, grid.dt)
            out[k] = y
        return out
    if method != "rk23":
        raise ValueError(f"unknown integration method {method!r}")
    h = None
    k1 = None
    err_prev = 1.0
    for k in range(1, grid.K + 1):
        y, h, k1, err_prev = rk23_advance(f, y, grid.point(k - 1), grid.point(k), h, rtol, atol,
                                          min_step, k1, err_prev)
        out[k] = y
    return out


def one_step(f, y, dt, method: str = "euler", rtol: float = 1e-6, atol: float = 1e-9):
    """One-step prediction ``x_hat(dt; y)`` used by the strong-form loss."""
    if method == "euler":
        return euler_step(f, y, dt)
    if method == "rk23":
        y_new, _, _, _ = rk23_advance(f, y, 0.0, dt, None, rtol, atol)
        return y_new
    raise ValueError(f"unknown integration method {method!r}")


# -- datasets ----------------------------------------------------------------

def state_std(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Population standard deviation and mean per state over all samples.

    Accepts a :class:`TrajectoryDataset` or an array of shape ``(N, K+1, d)``.
    """
    arr = trajectories.trajectories if isinstance(trajectories, TrajectoryDataset) else trajectories
    arr = np.asarray(arr, dtype=float)
    flat = arr.reshape(-1, arr.shape[-1])
    if flat.shape[0] < 2:
        raise ValueError("need at least two samples")
    mu = flat.mean(axis=0)
    sigma = np.sqrt(np.mean((flat - mu) ** 2, axis=0))
    if np.any(sigma == 0):
        raise DegenerateState(f"zero standard deviation in state(s) {np.flatnonzero(sigma == 0).tolist()}")
    return sigma, mu


@dataclass
class TrajectoryDataset:
    """Trajectories sharing one time grid, with per-state statistics."""

    grid: TimeGrid
    trajectories: np.ndarray
    noise_level: float = 0.0
    sigma: np.ndarray = field(default=None)
    mu: np.ndarray = field(default=None)

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=float)
        if self.trajectories.ndim == 2:
            self.trajectories = self.trajectories[None]
        if self.trajectories.shape[1] != self.grid.K + 1:
            raise ValueError(f"trajectories have {self.trajectories.shape[1]} points, grid has {self.grid.K + 1}")
        if self.sigma is None or self.mu is None:
            self.sigma, self.mu = state_std(self.trajectories)

    @property
    def n_traj(self) -> int:
        return self.trajectories.shape[0]

    @property
    def dim(self) -> int:
        return self.trajectories.shape[2]

    def __len__(self):
        return self.n_traj

    def subset(self, idx) -> "TrajectoryDataset":
        return TrajectoryDataset(self.grid, self.trajectories[idx], self.noise_level)


def generate_dataset(dyn, x0s, grid: TimeGrid, method: str = "rk23", **kw) -> TrajectoryDataset:
    """Integrate every initial state in ``x0s`` (shape ``(N, d)``) on ``grid``."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    trajs = np.stack([integrate(dyn, x0, grid, method, **kw) for x0 in x0s])
    return TrajectoryDataset(grid, trajs)


def _noise_rng(seed: int, traj_index: int) -> np.random.Generator:
    # one counter-based stream per (seed, trajectory); draws are ordered by (time, state)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(traj_index)])))


def add_noise(data: TrajectoryDataset, rho: float, rng_seed: int) -> TrajectoryDataset:
    """Add Gaussian noise with per-state standard deviation ``rho * sigma_l``.

    ``sigma_l`` is taken from ``data`` (the clean statistics).  The returned
    dataset carries statistics recomputed from the noisy samples, which is what
    the state-wise loss weights are built from.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        return TrajectoryDataset(data.grid, data.trajectories.copy(), data.noise_level,
                                 data.sigma.copy(), data.mu.copy())
    scale = rho * data.sigma
    noisy = np.empty_like(data.trajectories)
    for i, traj in enumerate(data.trajectories):
        z = _noise_rng(rng_seed, i).standard_normal(traj.shape)
        noisy[i] = traj + scale * z
    return TrajectoryDataset(data.grid, noisy, rho)


# -- benchmark ---------------------------------------------------------------

def damped_oscillator_benchmark(zeta: float = 0.5) -> GenericSystem:
    """Linearly damped oscillator coupled to a heat bath, state ``(q, p, S)``.

    ``E = (q^2 + p^2)/2 + S`` is conserved and ``S' = zeta p^2`` absorbs the
    dissipated mechanical energy.
    """
    if zeta < 0:
        raise ValueError("zeta must be non-negative")

    def rhs(x):
        q, p = x[..., 0], x[..., 1]
        return np.stack([p, -q - zeta * p, zeta * p * p], axis=-1)

    def energy(x):
        return 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2) + x[..., 2]

    def entropy(x):
        return np.asarray(x[..., 2], dtype=float).copy()

    def energy_grad(x):
        return np.stack([x[..., 0], x[..., 1], np.ones_like(x[..., 0])], axis=-1)

    def entropy_grad(x):
        z = np.zeros_like(x[..., 0])
        return np.stack([z, z, np.ones_like(z)], axis=-1)

    L_const = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

    def poisson(x):
        x = np.asarray(x)
        return np.broadcast_to(L_const, x.shape[:-1] + (3, 3)).copy()

    def friction(x):
        p = np.asarray(x)[..., 1]
        z = np.zeros_like(p)
        o = np.ones_like(p)
        rows = [np.stack([z, z, z], -1), np.stack([z, o, -p], -1), np.stack([z, -p, p * p], -1)]
        return zeta * np.stack(rows, axis=-2)

    return GenericSystem(3, rhs, name=f"damped_oscillator(zeta={zeta})", energy=energy,
                         entropy=entropy, energy_grad=energy_grad, entropy_grad=entropy_grad,
                         poisson=poisson, friction=friction)


def sample_oscillator_states(n: int, rng: np.random.Generator) -> np.ndarray:
    """Initial states with ``q in [0.5, 1.5]``, ``p in [-0.5, 0.5]``, ``S = 0``."""
    q = rng.uniform(0.5, 1.5, n)
    p = rng.uniform(-0.5, 0.5, n)
    return np.stack([q, p, np.zeros(n)], axis=-1)


# -- CSV ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(data: TrajectoryDataset, directory) -> list[Path]:
    """Write one ``traj_{i:04}.csv`` per trajectory with header ``t,x1,...,xd``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t = data.grid.points()
    header = ["t"] + [f"x{j + 1}" for j in range(data.dim)]
    paths = []
    for i, traj in enumerate(data.trajectories):
        path = directory / f"traj_{i:04}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(traj.shape[0]):
                w.writerow([_fmt(t[k])] + [_fmt(v) for v in traj[k]])
        paths.append(path)
    return paths


def _grid_from_times(t: np.ndarray) -> TimeGrid:
    K = len(t) - 1
    for dt in ((t[-1] - t[0]) / K, t[1] - t[0]):
        g = TimeGrid(float(t[0]), float(dt), K)
        if np.array_equal(g.points(), t):
            return g
    return TimeGrid(float(t[0]), float((t[-1] - t[0]) / K), K)


def read_csv(directory, noise_level: float = 0.0) -> TrajectoryDataset:
    """Inverse of :func:`write_csv`."""
    paths = sorted(Path(directory).glob("traj_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no traj_*.csv files in {directory}")
    trajs = []
    t_ref = None
    for path in paths:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if t_ref is None:
            t_ref = arr[:, 0]
        elif not np.array_equal(arr[:, 0], t_ref):
            raise ValueError(f"{os.fspath(path)} is on a different time grid")
        trajs.append(arr[:, 1:])
    return TrajectoryDataset(_grid_from_times(t_ref), np.stack(trajs), noise_level)
