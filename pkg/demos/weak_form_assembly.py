"""
Assembling a weak-form system from trajectory data
==================================================

Bump test functions ``C (t - a)^p (b - t)^p`` are placed with a fixed
overlap along the time grid.  Integrating the ODE against them moves the
time derivative onto the test function, so the loss only needs state values,
never finite differences of noisy data.
"""

import numpy as np

from weakdyn.testfn import bump_functions, place_supports
from weakdyn.trajectory import TimeGrid, add_noise, damped_oscillator_benchmark, generate_dataset
from weakdyn.weakform import assemble_weak_dataset, strong_loss, weak_loss

system = damped_oscillator_benchmark(zeta=0.5)
grid = TimeGrid(0.0, 0.02, 200)
x0 = np.array([[1.0, 0.0, 0.0], [0.7, 0.3, 0.0]])
clean = generate_dataset(system, x0, grid, rtol=1e-10, atol=1e-12)
noisy = add_noise(clean, 0.05, 1)

# supports of 41 grid points, bump exponent 6, overlap chosen so neighbours meet at 0.9 of the peak
plan = place_supports(grid.K, 41, 6, 0.9)
print("test functions: J = %d, overlap = %d points" % (plan.J, plan.ell_overlap))
fns = bump_functions(plan, grid)
print("first support [%.2f, %.2f], last [%.2f, %.2f]" % (fns[0].a, fns[0].b, fns[-1].a, fns[-1].b))

# Y has shape (trajectories, states, interior points); phi and dphi are (points, test functions)
W = 1.0 / noisy.sigma
for name, data in (("clean", clean), ("noisy", noisy)):
    sys = assemble_weak_dataset(data, plan)
    F = system.rhs(np.swapaxes(sys.Y, 1, 2))
    print("%s data, true field: weak loss %.3e, strong loss %.3e"
          % (name, weak_loss(sys, np.swapaxes(F, 1, 2), W), strong_loss(system.rhs, data, W)))

# With the true field the weak residual is only quadrature error, while the strong
# one-step residual of noisy data is dominated by the noise itself.
