"""
A GENERIC-structured neural vector field
========================================

``f(x) = L(x) grad E(x) + M(x) grad S(x)`` with ``L`` skew and ``M``
positive semidefinite.  Building ``L`` and ``M`` from rows ``(A_i grad h)^T``
makes ``L grad S = 0`` and ``M grad E = 0`` hold for any parameters, so the
learned energy is conserved and the learned entropy never decreases.
"""

import numpy as np
import torch

from weakdyn.genericnet import GenericModel, degeneracy_report, l_matrix, m_matrix
from weakdyn.trajectory import TimeGrid, integrate

model = GenericModel(d=3, hidden=20, layers=4, seed=0)
print("parameters:", sum(p.numel() for p in model.parameters()))

# structure holds at any state, before any training
x = np.random.default_rng(0).normal(size=(200, 3))
for key, val in degeneracy_report(model, x).items():
    print("  %-9s %.2e" % (key, val))

xt = torch.as_tensor(x[:1])
with torch.no_grad():
    print("L(x) =\n", l_matrix(model, xt)[0].numpy().round(4))
    print("M(x) eigenvalues:", torch.linalg.eigvalsh(m_matrix(model, xt)[0]).numpy().round(6))

# integrate the untrained field and watch E and S
traj = integrate(model.as_dynamics(), x[:4], TimeGrid(0.0, 0.05, 100), rtol=1e-9, atol=1e-11)
with torch.no_grad():
    E = model.energy(torch.as_tensor(traj)).numpy()
    S = model.entropy(torch.as_tensor(traj)).numpy()
print("max energy drift over [0, 5]:", np.abs(E - E[0]).max())
print("smallest entropy increment:  ", np.diff(S, axis=0).min())
