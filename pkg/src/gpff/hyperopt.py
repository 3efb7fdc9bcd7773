"""
Type-II maximum likelihood for kernel hyperparameters.

The search runs over ``log`` of every hyperparameter (kernel parameters in
``KernelSpec.get_params`` order, then ``sigma_n``) inside a box, using
scipy's L-BFGS-B: a bound-constrained quasi-Newton method whose active set
is the set of parameters pinned to the box.  Restart ``i`` draws its start
log-uniformly from the box using ``SeedSequence(seed, spawn_key=(i,))``,
so adding restarts never changes earlier ones.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .exceptions import IllConditionedError, OptimizationFailedError
from .gp import log_marginal_likelihood
from .kernels import HyperParams, KernelSpec

__all__ = ["OptimizerConfig", "OptimizeResult", "TraceRow", "optimize", "write_trace"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-5
    initial_params: Optional[HyperParams] = None
    initial_sigma_n: Optional[float] = None
    bounds: tuple = (-6.0, 6.0)
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be > 0")
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("bounds must be finite with low < high")

    def box(self, n):
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in self.bounds)
        return lo.copy(), hi.copy()


@dataclass(frozen=True)
class TraceRow:
    restart: int
    iteration: int
    lml: float
    grad_norm: float
    log_params: tuple


@dataclass
class OptimizeResult:
    kernel: KernelSpec
    sigma_n: float
    lml: float
    trace: List[TraceRow] = field(default_factory=list)
    restart_lml: List[float] = field(default_factory=list)
    best_restart: int = 0
    messages: List[str] = field(default_factory=list)

    @property
    def params(self):
        """HyperParams of the optimum (single-leaf kernels only)."""
        if self.kernel.variant == "Sum":
            raise ValueError("a Sum kernel has one HyperParams per term; use .kernel")
        p = self.kernel.params
        return HyperParams(p.sigma_f, p.lengthscales, p.periods, self.sigma_n)


def _initial_point(kernel, config, dataset):
    if config.initial_params is not None:
        hp = config.initial_params
        if kernel.variant == "Sum":
            raise ValueError("initial_params cannot describe a Sum kernel")
        kernel = KernelSpec(kernel.variant, HyperParams(hp.sigma_f, hp.lengthscales, hp.periods))
        sigma_n = hp.sigma_n if config.initial_sigma_n is None else config.initial_sigma_n
    else:
        sigma_n = config.initial_sigma_n
    if sigma_n is None:
        sigma_n = 0.1 * float(np.std(dataset.u)) if dataset.M > 1 else 0.1
    if sigma_n <= 0:
        raise ValueError("the initial sigma_n must be > 0 for log-space optimization")
    return kernel, np.log(np.append(kernel.get_params(), sigma_n))


def _projected_grad_norm(x, g, lo, hi):
    """Infinity norm of the gradient after zeroing components that push out of the box.

    ``g`` is the gradient of the quantity being *minimized*.
    """
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def optimize(dataset, kernel_template, config=OptimizerConfig()):
    """Maximize the log marginal likelihood; best over all restarts wins.

    Run 0 starts from the configured initial point (or the template's
    params); runs ``1..restarts`` start from seeded random points.
    """
    template, x0 = _initial_point(kernel_template, config, dataset)
    n = x0.size
    lo, hi = config.box(n)
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("initial parameters lie outside the log-space bounds")

    def unpack(x):
        p = np.exp(x)
        return template.with_params(p[:-1]), p[-1]

    cache = {}

    def objective(x):
        key = x.tobytes()
        if key not in cache:
            kern, sn = unpack(x)
            lml, g = log_marginal_likelihood(dataset, kern, sn)
            # chain rule into log space; minimize the negative
            cache.clear()
            cache[key] = (-lml, -g * np.exp(x))
        return cache[key]

    starts = [x0]
    for i in range(1, config.restarts + 1):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
        starts.append(rng.uniform(lo, hi))

    trace, finals, messages = [], [], []
    best = None
    for i, xs in enumerate(starts):
        rows = []

        def record(x):
            f, g = objective(x)
            rows.append(
                TraceRow(i, len(rows), -f, _projected_grad_norm(x, g, lo, hi), tuple(x))
            )

        try:
            record(xs)
            res = minimize(
                objective,
                xs,
                jac=True,
                method="L-BFGS-B",
                bounds=list(zip(lo, hi)),
                callback=record,
                options={
                    "maxiter": config.max_iterations,
                    "gtol": config.gradient_tolerance,
                    "ftol": 1e-15,
                    "maxls": 40,
                },
            )
        except IllConditionedError as exc:
            messages.append(f"restart {i}: {exc}")
            log.warning("restart %d failed: %s", i, exc)
            finals.append(-np.inf)
            trace.extend(rows)
            continue
        trace.extend(rows)
        # L-BFGS-B never returns worse than its start, but guard anyway
        cand = [(r.lml, np.array(r.log_params)) for r in rows]
        if np.isfinite(res.fun):
            cand.append((-float(res.fun), res.x))
        lml_i, x_i = max(cand, key=lambda c: c[0])
        finals.append(lml_i)
        messages.append(f"restart {i}: {res.message}")
        if best is None or lml_i > best[0]:
            best = (lml_i, x_i, i)

    if best is None:
        raise OptimizationFailedError(
            "all restarts failed to factorize the Gram matrix", trace=trace
        )
    kern, sn = unpack(best[1])
    return OptimizeResult(kern, float(sn), best[0], trace, finals, best[2], messages)


def write_trace(trace, names, path):
    """CSV with columns iteration, restart, lml, grad_norm, then one per parameter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "restart", "lml", "grad_norm"] + list(names))
        for r in trace:
            w.writerow(
                [r.iteration, r.restart, repr(r.lml), repr(r.grad_norm)]
                + [repr(float(np.exp(v))) for v in r.log_params]
            )
