"""
Strong and weak estimators for a scalar linear model
====================================================

Data ``y_k = x0 exp(lam t_k) + sigma eps_k`` is fitted by ``f(x) = theta x``.
The strong form matches forward-Euler steps, the weak form integrates
against a compactly supported test function.  Both have closed-form
minimizers, so the behaviour as the step size shrinks or the support grows
can be read off directly.
"""

import numpy as np

from weakdyn.estimator1d import (Scenario1D, euler_truncation, find_crossing_dt, monte_carlo, strong_limit,
                                 variance_V)

lam, x0, sigma = -2.0, 1.0, 1e-2

# Strong form: without noise the error is the Euler truncation E(dt) and vanishes as dt -> 0.
# With noise, dt * (theta - lam) tends to a negative constant, so the error itself blows up.
print("strong form, sigma = %g" % sigma)
print("%8s %14s %14s %14s" % ("dt", "mean err", "truncation", "dt * err"))
cells = [Scenario1D(lam, x0, 1.0, dt, sigma, seed=0) for dt in (1e-1, 1e-2, 1e-3, 1e-4)]
for st in monte_carlo(cells, 500):
    dt = st.scenario.dt
    print("%8.0e %14.4e %14.4e %14.4e" % (dt, st.mean_error, euler_truncation(lam, dt), st.mean_dt_error))
print("predicted limit of dt * err: %.4e" % strong_limit(lam, sigma, x0, 1.0))

# Truncation pushes the error up, noise pushes it down: on a single noise stream
# there is usually a step size where the two cancel.
res = find_crossing_dt(Scenario1D(lam, x0, 1.0, 0.1, sigma, seed=0), run=0)
if res is not None:
    print("crossing on stream 0 at dt = %.5e (error %.1e)" % (res.dt, res.error))

# Weak form: three quadrature nodes spaced S/2 apart with weights chosen so that
# noiseless data is fitted exactly.  Longer supports average the noise away.
print("\nweak form, sigma = %g" % sigma)
print("%6s %16s" % ("S", "mean |rel err|"))
cells = [Scenario1D(lam, x0, sigma=sigma, seed=0, S=S) for S in (0.05, 0.25, 1.0, 4.0, 8.0)]
for st in monte_carlo(cells, 1000, "weak"):
    print("%6.2f %16.4e" % (st.scenario.S, st.mean_abs_rel_error))

# The noise variance of the weak estimator scales with V(lam S), which runs from 1/2 to 1.
print("\nV(z):", ", ".join("V(%g) = %.4f" % (z, variance_V(z)) for z in (0.0, 1.0, 10.0, 50.0, 1e4)))
