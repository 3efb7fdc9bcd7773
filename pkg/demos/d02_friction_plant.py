"""
The simulated motion stage
==========================

A mass with viscous and Coulomb friction under PD feedback, driven along a
jerk-limited move.  The linear feedforward F(q) compensates inertia and
viscous friction but not the Coulomb term, so a tracking error remains.
"""

import numpy as np

from gpff.pipeline import evaluate_log
from gpff.plantsim import (
    FrictionPlant,
    baseline_feedforward,
    exact_inverse,
    gen_third_order_reference,
    pd_controller,
    simulate_closed_loop,
)

ref = gen_third_order_reference(0.1, 0.25, 2.0, 40.0, dwell=1.0, return_move=True, lead=0.2, n_samples=4501)
print("samples", len(ref), "peak", ref.samples.max())

plant = FrictionPlant(m=0.083, Fc=1.0, viscous=2.8531)
C = pd_controller(300.0, 5.0)
F = baseline_feedforward()

for name, ff in [("feedback only", None), ("F(q)", F), ("exact inverse", exact_inverse(plant, ref.samples))]:
    log = simulate_closed_loop(plant, C, ref, ff, noise_std=0.0)
    l2, linf = evaluate_log(log)
    print(f"{name:14s} ||e||_2={l2:.3e}  ||e||_inf={linf:.3e}")

# noise enters at the plant input; the logged u is the commanded effort
log = simulate_closed_loop(plant, C, ref, F, noise_std=0.01, seed=3)
log.to_csv("stage_log.csv")
print("wrote stage_log.csv")
