"""GENERIC-structured neural vector fields.

The model is ``f(x) = L(x) grad E(x) + M(x) grad S(x)`` with
``L = Q_S^T B Q_S`` (``B`` skew) and ``M = Q_E^T C C^T Q_E``.  The rows of
``Q_h`` are ``(A_i grad h)^T`` for skew ``A_i``, so ``Q_h grad h = 0`` and the
degeneracy conditions ``L grad S = 0``, ``M grad E = 0`` hold for every
parameter value.

Input gradients of the scalar networks are computed by an explicit reverse
sweep written in torch operations, so the autograd graph covers them and
parameter gradients of losses that involve ``grad E``, ``grad S`` need no
double-backward pass.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .trajectory import Dynamics

__all__ = [
    "DenseNet",
    "SkewGenerator",
    "GenericModel",
    "net_eval_grad",
    "q_matrix",
    "l_matrix",
    "m_matrix",
    "gfinn_field",
    "degeneracy_report",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64


def _glorot_(w: torch.Tensor, gen: torch.Generator) -> None:
    fan_out, fan_in = w.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.copy_((torch.rand(w.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


class DenseNet(nn.Module):
    """Fully connected network, tanh on hidden layers and a linear output.

    Parameters
    ----------
    widths : sequence of int
        ``[d_in, hidden..., d_out]``.
    gen : torch.Generator, optional
        Source for the uniform Glorot initialization; biases start at zero.
    """

    def __init__(self, widths: Sequence[int], gen: Optional[torch.Generator] = None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = [int(w) for w in widths]
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            W = torch.empty(w_out, w_in, dtype=DTYPE)
            _glorot_(W, gen)
            self.weights.append(nn.Parameter(W))
            self.biases.append(nn.Parameter(torch.zeros(w_out, dtype=DTYPE)))

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = x
        n = len(self.weights)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W.T + b
            if k < n - 1:
                a = torch.tanh(a)
        return a

    def value_and_grad(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Value and input gradient of a scalar-output network.

        Returns ``(value, grad)`` with shapes ``x.shape[:-1]`` and ``x.shape``.
        """
        if self.widths[-1] != 1:
            raise ValueError("value_and_grad needs a scalar-output network")
        a = x
        slopes = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = torch.tanh(a @ W.T + b)
            slopes.append(1 - a * a)
        W_out, b_out = self.weights[-1], self.biases[-1]
        value = (a @ W_out.T + b_out)[..., 0]
        g = W_out[0].expand(*x.shape[:-1], -1)
        for W, s in zip(reversed(list(self.weights[:-1])), reversed(slopes)):
            g = (g * s) @ W
        return value, g


def net_eval_grad(net: DenseNet, x) -> tuple[torch.Tensor, torch.Tensor]:
    """``(h(x), grad_x h(x))`` for a scalar network, on the autograd graph."""
    return net.value_and_grad(torch.as_tensor(x, dtype=DTYPE))


class SkewGenerator(nn.Module):
    """Stack of ``n`` skew matrices ``A_i = U_i - U_i^T`` of size ``d``."""

    def __init__(self, n: int, d: int, gen: Optional[torch.Generator] = None, scale: float = 1.0):
        super().__init__()
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        U = torch.randn(n, d, d, generator=gen, dtype=DTYPE) * (scale / math.sqrt(d))
        self.U = nn.Parameter(U)

    @property
    def A(self) -> torch.Tensor:
        return self.U - self.U.transpose(-1, -2)


def q_matrix(gens, grad_h) -> torch.Tensor:
    """Rows ``(A_i grad h)^T``: shape ``(..., n_gen, d)``.

    ``gens`` is a :class:`SkewGenerator` or a stack of skew matrices.
    """
    A = gens.A if isinstance(gens, SkewGenerator) else torch.as_tensor(gens, dtype=DTYPE)
    g = torch.as_tensor(grad_h, dtype=DTYPE)
    m, d = A.shape[0], A.shape[-1]
    return (g @ A.reshape(m * d, d).T).reshape(*g.shape[:-1], m, d)


class GenericModel(nn.Module):
    """GENERIC-structured vector field with learnable ``E``, ``S``, ``L`` and ``M``.

    Parameters
    ----------
    d : int
        State dimension.
    hidden, layers : int
        Width of hidden layers and number of linear layers of every network.
    n_gen : int, optional
        Number of skew generators per Q-matrix (default ``d``).
    rank : int, optional
        Columns of the Gram factor ``C`` (default ``d``).
    constant_matrices : bool
        Use state-independent ``B`` and ``C`` instead of networks.
    seed : int
        Seed for the parameter initialization.
    """

    def __init__(self, d: int, hidden: int = 20, layers: int = 4, n_gen: Optional[int] = None,
                 rank: Optional[int] = None, constant_matrices: bool = False, seed: int = 0):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one layer")
        self.config = dict(d=int(d), hidden=int(hidden), layers=int(layers),
                           n_gen=int(n_gen or d), rank=int(rank or d),
                           constant_matrices=bool(constant_matrices), seed=int(seed))
        self.d, self.n_gen, self.rank = d, self.config["n_gen"], self.config["rank"]
        gen = torch.Generator().manual_seed(int(seed))
        body = [d] + [hidden] * (layers - 1)
        self.E_net = DenseNet(body + [1], gen)
        self.S_net = DenseNet(body + [1], gen)
        self.gen_E = SkewGenerator(self.n_gen, d, gen)
        self.gen_S = SkewGenerator(self.n_gen, d, gen)
        m, r = self.n_gen, self.rank
        if constant_matrices:
            self.B_raw = nn.Parameter(torch.randn(m, m, generator=gen, dtype=DTYPE) / math.sqrt(m))
            self.C_raw = nn.Parameter(torch.randn(m, r, generator=gen, dtype=DTYPE) / math.sqrt(m))
        else:
            self.B_net = DenseNet(body + [m * m], gen)
            self.C_net = DenseNet(body + [m * r], gen)

    # scalar potentials
    def energy(self, x) -> torch.Tensor:
        return self.energy_and_grad(x)[0]

    def entropy(self, x) -> torch.Tensor:
        return self.entropy_and_grad(x)[0]

    def energy_and_grad(self, x):
        return self.E_net.value_and_grad(x)

    def entropy_and_grad(self, x):
        return self.S_net.value_and_grad(x)

    def matrices(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """Skew ``B(x)`` ``(..., m, m)`` and Gram factor ``C(x)`` ``(..., m, r)``."""
        m, r = self.n_gen, self.rank
        batch = x.shape[:-1]
        if self.config["constant_matrices"]:
            Braw = self.B_raw.expand(*batch, m, m)
            C = self.C_raw.expand(*batch, m, r)
        else:
            Braw = self.B_net(x).reshape(*batch, m, m)
            C = self.C_net(x).reshape(*batch, m, r)
        return Braw - Braw.transpose(-1, -2), C

    def structure(self, x):
        """``Q_E, Q_S, B, C`` and both gradients at ``x``."""
        x = torch.as_tensor(x, dtype=DTYPE)
        _, gE = self.energy_and_grad(x)
        _, gS = self.entropy_and_grad(x)
        B, C = self.matrices(x)
        return dict(QE=q_matrix(self.gen_E, gE), QS=q_matrix(self.gen_S, gS), B=B, C=C, gE=gE, gS=gS)

    def forward(self, x) -> torch.Tensor:
        """Field ``L grad E + M grad S`` for states along the last axis."""
        x = torch.as_tensor(x, dtype=DTYPE)
        shape = x.shape
        s = self.structure(x.reshape(-1, shape[-1]))
        QE, QS, B, C = s["QE"], s["QS"], s["B"], s["C"]
        # small contractions as broadcast sums; einsum is slow for these sizes
        v = (QS * s["gE"][:, None, :]).sum(-1)
        v = (B * v[:, None, :]).sum(-1)
        rev = (QS * v[:, :, None]).sum(1)
        u = (QE * s["gS"][:, None, :]).sum(-1)
        u = (C * u[:, :, None]).sum(1)
        u = (C * u[:, None, :]).sum(-1)
        irr = (QE * u[:, :, None]).sum(1)
        return (rev + irr).reshape(shape)

    def numpy_field(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(torch.as_tensor(np.asarray(x, dtype=float))).numpy()

    def as_dynamics(self) -> Dynamics:
        return Dynamics(self.d, self.numpy_field, name="generic-model")

    # flat parameter access
    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy().copy()

    def set_flat_parameters(self, flat) -> None:
        flat = torch.as_tensor(np.asarray(flat, dtype=float))
        if flat.numel() != sum(p.numel() for p in self.parameters()):
            raise ValueError("flat parameter vector has the wrong length")
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(flat[i:i + p.numel()].reshape(p.shape))
                i += p.numel()


def l_matrix(model: GenericModel, x) -> torch.Tensor:
    s = model.structure(x)
    return s["QS"].transpose(-1, -2) @ s["B"] @ s["QS"]


def m_matrix(model: GenericModel, x) -> torch.Tensor:
    s = model.structure(x)
    CQ = s["C"].transpose(-1, -2) @ s["QE"]
    return CQ.transpose(-1, -2) @ CQ


def gfinn_field(model: GenericModel, x) -> torch.Tensor:
    return model(torch.as_tensor(x, dtype=DTYPE))


def degeneracy_report(model: GenericModel, points) -> dict:
    """Worst-case structure residuals over ``points`` ``(n, d)``."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(points, dtype=float))
        s = model.structure(x)
        L = s["QS"].transpose(-1, -2) @ s["B"] @ s["QS"]
        CQ = s["C"].transpose(-1, -2) @ s["QE"]
        M = CQ.transpose(-1, -2) @ CQ
        LgS = torch.einsum("...ij,...j->...i", L, s["gS"])
        MgE = torch.einsum("...ij,...j->...i", M, s["gE"])
        Msym = 0.5 * (M + M.transpose(-1, -2))
        return {
            "L_gradS": float(LgS.abs().max()),
            "M_gradE": float(MgE.abs().max()),
            "L_skew": float((L + L.transpose(-1, -2)).abs().max()),
            "M_sym": float((M - M.transpose(-1, -2)).abs().max()),
            "M_min_eig": float(torch.linalg.eigvalsh(Msym).min()),
        }


def save_checkpoint(model: GenericModel, path) -> Path:
    """Write architecture metadata and the flat parameter vector to an ``.npz`` file."""
    path = Path(path)
    meta = dict(model.config, shapes=[list(p.shape) for p in model.parameters()],
                names=[n for n, _ in model.named_parameters()])
    with open(path, "wb") as fh:
        np.savez(fh, params=model.flat_parameters(), meta=np.array(json.dumps(meta)))
    return path


def load_checkpoint(path) -> GenericModel:
    with np.load(Path(path)) as z:
        meta = json.loads(str(z["meta"]))
        params = z["params"].copy()
    cfg = {k: meta[k] for k in ("d", "hidden", "layers", "n_gen", "rank", "constant_matrices", "seed")}
    model = GenericModel(**cfg)
    if [n for n, _ in model.named_parameters()] != meta["names"]:
        raise ValueError("checkpoint parameter layout does not match the model")
    model.set_flat_parameters(params)
    return model
