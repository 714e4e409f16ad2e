"""Training loop: AdamW, stepwise learning-rate decay and state-wise RBA weighting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteLoss
from .testfn import place_supports
from .trajectory import TrajectoryDataset
from .weakform import WeakSystem, as_weights, assemble_weak_dataset, strong_residual, weak_residual

__all__ = [
    "RbaState",
    "rba_update",
    "TrainConfig",
    "AdamState",
    "adamw_step",
    "lr_at",
    "LinearModel",
    "residual_vector",
    "TrainingProblem",
    "History",
    "train",
]


@dataclass
class RbaState:
    """State-wise attention multipliers, one per state variable."""

    lam: np.ndarray
    gamma: float = 1.0
    eta_star: float = 0.0

    @classmethod
    def ones(cls, d: int, gamma: float = 1.0, eta_star: float = 0.0) -> "RbaState":
        if not 0 < gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if eta_star < 0:
            raise ValueError("eta_star must be >= 0")
        return cls(np.ones(d), gamma, eta_star)


def rba_update(state: RbaState, e, W=None) -> RbaState:
    """``lam <- gamma lam + eta* sqrt(W) e / |sqrt(W) e|_inf``; the last term is 0 when ``e = 0``."""
    e = np.asarray(e, dtype=float)
    sw = np.sqrt(as_weights(W, e.size)) * e
    peak = np.max(np.abs(sw))
    boost = sw / peak if peak > 0 else np.zeros_like(sw)
    return RbaState(state.gamma * state.lam + state.eta_star * boost, state.gamma, state.eta_star)


_DOTTED = {"rba.eta_star": "eta_star", "rba.gamma": "gamma", "testfn.ell": "ell",
           "testfn.p": "p", "testfn.s": "s", "testfn.nbar": "nbar"}


@dataclass
class TrainConfig:
    """Optimizer, schedule, loss and RBA settings.

    ``ell`` of ``None`` picks a support width of about a fifth of the
    trajectory.  ``batch_size`` of ``None`` means full batch; it only
    applies to the strong form.
    """

    lr: float = 1e-3
    decay_rate: float = 1.0
    decay_steps: int = 1000
    weight_decay: float = 0.0
    eta_star: float = 0.0
    gamma: float = 1.0
    loss: str = "weak"
    ell: Optional[int] = None
    p: int = 6
    s: float = 0.9
    nbar: int = 1
    batch_size: Optional[int] = None
    iters: int = 1000
    seed: int = 0
    method: str = "euler"
    weighting: str = "std"
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if self.loss not in ("strong", "weak"):
            raise ValueError(f"loss must be 'strong' or 'weak', got {self.loss!r}")
        if self.weighting not in ("std", "identity"):
            raise ValueError("weighting must be 'std' or 'identity'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from flat keys, accepting dotted names such as ``rba.gamma`` or nested dicts."""
        flat = {}
        for k, v in d.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        names = {f.name for f in fields(cls)}
        out = {}
        for k, v in flat.items():
            key = _DOTTED.get(k, k)
            if key not in names:
                raise KeyError(f"unknown training config key {k!r}")
            out[key] = v
        return cls(**out)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, config: TrainConfig) -> float:
    """``lr * decay_rate ** floor(step / decay_steps)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr * config.decay_rate ** (step // config.decay_steps)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One AdamW update applied in place to ``params``; returns the advanced moments.

    Weight decay shrinks parameters by ``lr * weight_decay`` before the
    bias-corrected Adam step and does not enter the moment estimates.
    """
    b1, b2 = betas
    t = state.step + 1
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m, v.sqrt() / math.sqrt(c2) + eps, value=-lr / c1)
    state.step = t
    return state


class LinearModel(nn.Module):
    """``f(x) = theta x`` with a scalar parameter, for checks against closed forms."""

    def __init__(self, theta: float = 0.0):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(float(theta), dtype=torch.float64))

    def forward(self, x):
        return self.theta * x


@dataclass
class TrainingProblem:
    """Data prepared once for repeated loss evaluation."""

    kind: str
    W: np.ndarray
    dt: float
    Y: torch.Tensor
    weak: Optional[WeakSystem] = None
    states: Optional[torch.Tensor] = None

    @classmethod
    def build(cls, data: TrajectoryDataset, config: TrainConfig) -> "TrainingProblem":
        d = data.dim
        W = 1.0 / data.sigma if config.weighting == "std" else np.ones(d)
        if config.loss == "strong":
            return cls("strong", as_weights(W, d), data.grid.dt, torch.as_tensor(data.trajectories))
        K = data.grid.K
        ell = config.ell or max(2 * config.p + 1, (K + 1) // 5)
        plan = place_supports(K, ell, config.p, config.s)
        sys = assemble_weak_dataset(data, plan, config.nbar)
        Y = torch.as_tensor(sys.Y)
        return cls("weak", as_weights(W, d), data.grid.dt, Y, sys, Y.transpose(-1, -2).contiguous())

    def residual(self, model, idx=None, method: str = "euler"):
        """Strong: one-step residuals ``(n, K, d)``; weak: residual columns ``(n, d, J)``."""
        if self.kind == "strong":
            Y = self.Y if idx is None else self.Y[idx]
            return strong_residual(model, Y, self.dt, method)
        F = model(self.states).transpose(-1, -2)
        return weak_residual(self.weak, F, self.Y)

    def loss_from_residual(self, R, W):
        w = torch.as_tensor(W, dtype=R.dtype)
        d = R.shape[-2] if self.kind == "weak" else R.shape[-1]
        if self.kind == "strong":
            return (R * R * w).sum(-1).mean() / d
        return (R * R * w[:, None]).sum() / (self.weak.J * d * R.shape[0])

    def abs_residual(self, R) -> np.ndarray:
        """Per-state mean absolute residual."""
        with torch.no_grad():
            A = R.abs()
            return (A.mean((0, 1)) if self.kind == "strong" else A.mean((0, 2))).numpy().copy()


def residual_vector(model, data: TrajectoryDataset, W=None, loss_kind: str = "weak",
                    config: Optional[TrainConfig] = None) -> np.ndarray:
    """Per-state mean absolute residual ``e`` of the chosen loss."""
    cfg = config or TrainConfig(loss=loss_kind)
    if cfg.loss != loss_kind:
        cfg = TrainConfig(**{**cfg.to_dict(), "loss": loss_kind})
    prob = TrainingProblem.build(data, cfg)
    with torch.no_grad():
        return prob.abs_residual(prob.residual(model, method=cfg.method))


@dataclass
class History:
    d: int
    rows: list = field(default_factory=list)

    def record(self, it: int, loss: float, lr: float, lam, e) -> None:
        self.rows.append([it, loss, lr, *np.asarray(lam, dtype=float), *np.asarray(e, dtype=float)])

    @property
    def header(self) -> list:
        return (["iter", "loss", "lr"] + [f"lambda_{i + 1}" for i in range(self.d)]
                + [f"e_{i + 1}" for i in range(self.d)])

    @property
    def loss(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([r[0]] + [format(v, ".17g") for v in r[1:]])
        return path


def train(model: nn.Module, data: TrajectoryDataset, config: TrainConfig):
    """Fit ``model`` to ``data``; returns ``(model, history)``.

    Each iteration evaluates the residual once, updates the RBA multipliers
    from its mean absolute value, and takes an AdamW step on the loss under
    the weights ``W * lam``.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    prob = TrainingProblem.build(data, config)
    d = data.dim
    rba = RbaState.ones(d, config.gamma, config.eta_star)
    params = [p for p in model.parameters() if p.requires_grad]
    adam = AdamState.zeros_like(params)
    hist = History(d)
    n = data.n_traj
    batch = config.batch_size if config.loss == "strong" and config.batch_size and config.batch_size < n else None
    for it in range(config.iters):
        idx = None if batch is None else torch.as_tensor(np.sort(rng.choice(n, batch, replace=False)))
        R = prob.residual(model, idx, config.method)
        e = prob.abs_residual(R)
        rba = rba_update(rba, e, prob.W)
        loss = prob.loss_from_residual(R, prob.W * rba.lam)
        lval = float(loss.detach())
        if not math.isfinite(lval):
            raise NonFiniteLoss(it, lval)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        lr = lr_at(it, config)
        adamw_step(params, grads, adam, lr, config.weight_decay)
        if it % config.log_every == 0 or it == config.iters - 1:
            hist.record(it, lval, lr, rba.lam, e)
    return model, hist
