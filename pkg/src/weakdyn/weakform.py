"""Weighted strong-form and weak-form losses.

Both losses accept numpy arrays or torch tensors for the data and field
evaluations; torch inputs keep the autograd graph intact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import SupportOutOfRange
from .testfn import PlacementPlan, bump_functions, tabulate
from .trajectory import TimeGrid, TrajectoryDataset, one_step

__all__ = [
    "as_weights",
    "w_norm",
    "strong_residual",
    "strong_loss",
    "WeakSystem",
    "assemble_weak",
    "assemble_weak_dataset",
    "weak_residual",
    "weak_loss",
    "consistency_residual",
]


def as_weights(W, d: int) -> np.ndarray:
    """Diagonal quadratic-form weights as a positive length-``d`` vector; ``None`` means identity."""
    if W is None:
        return np.ones(d)
    w = np.asarray(W, dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    w = np.broadcast_to(w, (d,)).copy()
    if not np.all(w > 0):
        raise ValueError("weights must be strictly positive")
    return w


def w_norm(x, W=None) -> float:
    """``sqrt(sum_l w_l x_l^2)``."""
    x = np.asarray(x, dtype=float)
    w = as_weights(W, x.shape[-1])
    return float(np.sqrt(np.sum(w * x * x)))


def _like(w: np.ndarray, ref):
    if isinstance(ref, torch.Tensor):
        return torch.as_tensor(w, dtype=ref.dtype, device=ref.device)
    return w


def _unpack(data, dt):
    if isinstance(data, TrajectoryDataset):
        return data.trajectories, data.grid.dt
    if dt is None:
        raise ValueError("dt is required when data is a raw array")
    return data, dt


def strong_residual(field, data, dt: Optional[float] = None, method: str = "euler"):
    """One-step prediction residuals ``x_hat_k(y_{k-1}) - y_k``, shape ``(N, K, d)``."""
    Y, dt = _unpack(data, dt)
    if Y.shape[-2] < 2:
        raise ValueError("need K >= 1 steps")
    prev, nxt = Y[..., :-1, :], Y[..., 1:, :]
    return one_step(field, prev, dt, method) - nxt


def strong_loss(field, data, W=None, method: str = "euler", dt: Optional[float] = None):
    """Mean over trajectories and steps ``k = 1..K`` of ``|x_hat_k - y_k|_W^2 / d``."""
    r = strong_residual(field, data, dt, method)
    d = r.shape[-1]
    w = _like(as_weights(W, d), r)
    return (r * r * w).sum(-1).mean() / d


@dataclass
class WeakSystem:
    """Tabulated test functions on the subsampled interior points and the matching data.

    ``phi[q, j] = h phi_j(s_q)`` and ``dphi[q, j] = h phi_j'(s_q)`` for the
    interior points ``s_q = t0 + q h``, ``q = 1..Q``.  ``Y`` holds the data at
    those points with states along the second-to-last axis: ``(d, Q)`` for one
    trajectory or ``(N, d, Q)`` for a stacked dataset.
    """

    phi: np.ndarray
    dphi: np.ndarray
    Y: np.ndarray
    nbar: int
    h: float
    index: np.ndarray

    @property
    def Q(self) -> int:
        return self.phi.shape[0]

    @property
    def J(self) -> int:
        return self.phi.shape[1]

    @property
    def d(self) -> int:
        return self.Y.shape[-2]

    @property
    def n_traj(self) -> int:
        return 1 if self.Y.ndim == 2 else self.Y.shape[0]

    def states(self):
        """Data points as rows, ``(Q, d)`` or ``(N, Q, d)``, for evaluating a field."""
        return np.swapaxes(self.Y, -1, -2)


def _tabulate_interior(grid: TimeGrid, testfns, nbar: int):
    if nbar < 1:
        raise ValueError("nbar must be >= 1")
    Q = grid.K // nbar - 1
    if Q < 1:
        raise SupportOutOfRange(f"subsampling nbar={nbar} leaves no interior points on K={grid.K}")
    if isinstance(testfns, PlacementPlan):
        testfns = bump_functions(testfns, grid)
    testfns = list(testfns)
    if not testfns:
        raise ValueError("need at least one test function")
    h = nbar * grid.dt
    t_first, t_last = grid.t0, grid.t0 + (Q + 1) * h
    slack = 1e-9 * max(1.0, abs(t_last))
    for j, tf in enumerate(testfns):
        if tf.a < t_first - slack or tf.b > t_last + slack:
            raise SupportOutOfRange(
                f"test function {j} support [{tf.a}, {tf.b}] outside [{t_first}, {t_last}]")
    index = nbar * np.arange(1, Q + 1)
    times = grid.t0 + index * grid.dt
    phi, dphi = tabulate(testfns, times)
    return h * phi, h * dphi, h, index


def assemble_weak(traj, grid: TimeGrid, testfns, nbar: int = 1) -> WeakSystem:
    """Weak system for one trajectory ``(K+1, d)`` on ``grid``.

    ``testfns`` is a :class:`PlacementPlan` built for ``grid.K`` or a list of
    :class:`BumpTestFunction`.  Supports must fit inside the subsampled range.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2 or traj.shape[0] != grid.K + 1:
        raise ValueError(f"trajectory shape {traj.shape} does not match grid K={grid.K}")
    phi, dphi, h, index = _tabulate_interior(grid, testfns, nbar)
    return WeakSystem(phi, dphi, traj[index].T.copy(), nbar, h, index)


def assemble_weak_dataset(data: TrajectoryDataset, testfns, nbar: int = 1) -> WeakSystem:
    """Weak system for every trajectory of ``data``, sharing one set of test functions."""
    phi, dphi, h, index = _tabulate_interior(data.grid, testfns, nbar)
    Y = np.swapaxes(data.trajectories[:, index, :], 1, 2).copy()
    return WeakSystem(phi, dphi, Y, nbar, h, index)


def weak_residual(sys: WeakSystem, F, Y=None):
    """Residual columns ``Y dphi + F phi``: ``(d, J)`` or ``(N, d, J)``.

    ``F`` has the same layout as ``sys.Y``.  ``Y`` overrides the stored data
    (e.g. a torch copy).
    """
    Y = sys.Y if Y is None else Y
    if isinstance(F, torch.Tensor) or isinstance(Y, torch.Tensor):
        ref = F if isinstance(F, torch.Tensor) else Y
        phi = torch.as_tensor(sys.phi, dtype=ref.dtype)
        dphi = torch.as_tensor(sys.dphi, dtype=ref.dtype)
        Y = torch.as_tensor(Y, dtype=ref.dtype)
        return Y @ dphi + F @ phi
    return np.asarray(Y) @ sys.dphi + np.asarray(F) @ sys.phi


def weak_loss(sys: WeakSystem, F, W=None):
    """``sum |(Y dphi + F phi)_{:, j}|_W^2 / (J d N)`` summed over trajectories and test functions."""
    R = weak_residual(sys, F)
    w = _like(as_weights(W, sys.d), R)
    sq = R * R * w[:, None]
    return sq.sum() / (sys.J * sys.d * sys.n_traj)


def consistency_residual(traj_a, traj_b, field_b, grid: TimeGrid, testfns, nbar: int = 1) -> np.ndarray:
    """Discrete gap between the two sides of the weak identity, shape ``(J, d)``.

    Returns ``-sum_q h phi_j'(s_q) x_a(s_q) - sum_q h phi_j(s_q) f_b(x_b(s_q))``.
    The gap vanishes (up to quadrature error) for every test function exactly
    when ``x_a`` solves ``x' = f_b(x)`` along ``x_b``; for ``x_a = x_b`` it
    measures how well ``f_b`` explains the trajectory.
    """
    sa = assemble_weak(traj_a, grid, testfns, nbar)
    sb = assemble_weak(traj_b, grid, testfns, nbar)
    F = np.asarray(field_b(sb.states()), dtype=float).T
    return -(sa.Y @ sa.dphi + F @ sb.phi).T
