"""
Kernels and exact GP regression
===============================

A one-dimensional warm-up: fit a GP to noisy samples of a sine, tune the
hyperparameters by marginal likelihood and look at the posterior.
"""

import numpy as np

from gpff.gp import fit, log_marginal_likelihood, predict
from gpff.hyperopt import OptimizerConfig, optimize
from gpff.kernels import matern32, squared_exponential
from gpff.nfir import Dataset, WindowConfig

rng = np.random.default_rng(0)
Y = rng.uniform(-3, 3, 40)[:, None]
u = np.sin(Y[:, 0]) + 0.1 * rng.normal(size=40)

# a "window" of one sample: n_c = n_ac = 0
data = Dataset(Y, u, WindowConfig(0, 0))

k = squared_exponential(1, sigma_f=1.0, lengthscales=1.0)
print("prior variance", k.prior_variance)
print("K for two points\n", k.gram([[0.0], [1.0]]))

lml, grad = log_marginal_likelihood(data, k, 0.3)
print("log evidence at the start", lml, "gradient", grad)

res = optimize(data, k, OptimizerConfig(restarts=2, seed=1))
print("tuned:", res.params, "lml", res.lml)

gp = fit(data, res.kernel, res.sigma_n)
R = np.linspace(-4, 4, 9)[:, None]
post = predict(gp, R, want_cov=True)
for r, m, v in zip(R[:, 0], post.mean, post.var):
    print(f"x={r:+.1f}  mean={m:+.3f}  true={np.sin(r):+.3f}  sd={np.sqrt(v):.3f}")

# Matern-3/2 is rougher; the same data give a different evidence
print("Matern lml", optimize(data, matern32(1), OptimizerConfig(restarts=2, seed=1)).lml)
