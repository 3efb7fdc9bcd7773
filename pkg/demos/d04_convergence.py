"""
Posterior error versus data density
===================================

Noise-free samples of the true plant inverse along scaled references.  With
a fixed short length-scale the error on an unseen reference shrinks as more
trajectories and denser sampling are added.
"""

import numpy as np

from gpff.config import load_config
from gpff.kernels import matern32
from gpff.pipeline import DensityLevel, convergence_study

cfg = load_config()
plan = cfg.build_plan()
plant = cfg.build_plant()
kernel = matern32(plan.window.n_theta, 1.0, 0.003)
ev = plan.base_reference.scaled(1.05)

rows = convergence_study(plan, cfg.density_levels(), plant, ev, kernel)
for r in rows:
    print(f"level {r.level}: {r.n_trajectories:2d} trajectories, stride {r.stride:3d}, M={r.density:5d}, rel RMS {r.rel_rms_error:.3f}")

# training on the evaluation reference itself: the GP interpolates
(same,) = convergence_study(plan, [DensityLevel((), 1, include_eval=True)], plant, ev, kernel)
print("eval reference in training, stride 1:", same.rel_rms_error)

# only data far away: the answer falls back to the zero prior mean
(far,) = convergence_study(plan, [DensityLevel((2.0,), 1)], plant, ev, kernel)
print("only a 2x reference in training:", far.rel_rms_error)
