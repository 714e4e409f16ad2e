"""
Strong- versus weak-form training on a noisy damped oscillator
==============================================================

The same GENERIC model, from the same initialization, is fitted once with
the one-step (strong) loss and once with the weak loss.  Test trajectories
are rolled out with RK23 and scored by the relative l2 error.  The learned
energy and entropy are only defined up to an affine map, so they are
calibrated against the truth before comparison.

This is a short run; ``weakdyn train-compare`` uses 5000 iterations.
"""

import sys

import numpy as np
import torch

from weakdyn.experiments import train_compare

torch.set_num_threads(1)
iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300

res = train_compare(seed=0, noise=0.10, n_train=10, n_test=3, K=100, dt=0.04, iters=iters,
                    model_kw=dict(hidden=16, layers=3))
for kind in ("strong", "weak"):
    ev = res[kind]
    hist = ev["history"]
    cal = ev["calibration"]
    print("%-6s loss %.3e -> %.3e, test rel l2 error %.4f, %.0f s"
          % (kind, hist.loss[0], hist.loss[-1], ev["rel_l2_error"], ev["seconds"]))
    for name in ("E", "S"):
        c = cal[name]
        fit = np.abs(c["calibrated"] - c["truth"]).max()
        print("   %s: a = %+.3f, b = %+.3f, max calibrated error %.3e" % (name, c["a"], c["b"], fit))
    print("   max |L grad S| = %.1e, max |M grad E| = %.1e"
          % (ev["degeneracy"]["L_gradS"], ev["degeneracy"]["M_gradE"]))
