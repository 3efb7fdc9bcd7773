"""
End-to-end GP feedforward procedure on the simulated friction plant.

The steps run in a fixed order and are recorded in the report's step
manifest: choose a kernel, fix the regressor window, run closed-loop
experiments with the baseline feedforward active, assemble the dataset,
tune hyperparameters by marginal likelihood, predict the feedforward for
each evaluation reference, and compare it in closed loop with the baseline.

Seeds
-----
All randomness comes from one root seed.  Child seeds are drawn with
``numpy.random.SeedSequence(root, spawn_key=key)``:

* training experiment j, repetition k: ``key = (0, j, k)``
* evaluation reference i (shared by both controllers): ``key = (1, i)``
* hyperparameter restarts: ``key = (2,)``
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import OptimizationFailedError
from .gp import fit, predict
from .hyperopt import OptimizerConfig, optimize
from .kernels import KernelSpec, matern32, periodic, squared_exponential
from .nfir import (
    Dataset,
    WindowConfig,
    assemble_dataset,
    average_repetitions,
    build_windows,
    reference_to_query_windows,
)
from .plantsim import (
    FrictionPlant,
    Trajectory,
    baseline_feedforward,
    exact_inverse,
    inverse_from_windows,
    pd_controller,
    probe_stability,
    simulate_closed_loop,
)

__all__ = [
    "DEFAULT_SCALES",
    "STEPS",
    "ExperimentPlan",
    "EvalRow",
    "EvaluationReport",
    "ProcedureResult",
    "DensityLevel",
    "ConvergenceRow",
    "DEFAULT_DENSITY_LEVELS",
    "derive_seed",
    "initial_kernel",
    "evaluate_log",
    "run_experiments",
    "train_from_logs",
    "evaluate_feedforward",
    "report_metadata",
    "TrainingOutcome",
    "run_procedure",
    "convergence_study",
    "write_convergence",
]

log = logging.getLogger(__name__)

DEFAULT_SCALES = tuple(round(0.90 + 0.02 * j, 2) for j in range(11))

STEPS = (
    "choose_kernel",
    "define_window",
    "run_experiments",
    "assemble_dataset",
    "optimize_hyperparameters",
    "predict_feedforward",
    "evaluate",
)

_KERNEL_FACTORIES = {
    "SquaredExponential": squared_exponential,
    "Matern32": matern32,
}


def derive_seed(root, *key):
    """Child seed for ``key`` under ``root`` (see module docstring)."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run: training references, window, kernel and optimizer.

    ``kernel`` is either a KernelSpec whose hyperparameters are the starting
    point, or a variant name, in which case the starting point is scaled to
    the data (see :func:`initial_kernel`).  With ``optimizer=None`` the
    kernel is used as given together with ``sigma_n``.
    """

    base_reference: Trajectory
    scale_factors: tuple = DEFAULT_SCALES
    repetitions: int = 1
    window: WindowConfig = WindowConfig(20, 40, 30)
    kernel: Union[KernelSpec, str] = "Matern32"
    optimizer: Optional[OptimizerConfig] = OptimizerConfig(restarts=0, max_iterations=100)
    noise_std: float = 0.01
    seed: int = 0
    average_repetitions: bool = False
    sigma_n: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "scale_factors", tuple(float(a) for a in self.scale_factors))
        if not self.scale_factors:
            raise ValueError("scale_factors must not be empty")
        if not all(np.isfinite(a) and a != 0 for a in self.scale_factors):
            raise ValueError("scale factors must be finite and nonzero")
        if int(self.repetitions) != self.repetitions or self.repetitions < 1:
            raise ValueError("repetitions must be an integer >= 1")
        if not (np.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ValueError("noise_std must be finite and >= 0")
        if isinstance(self.kernel, str) and self.kernel not in (*_KERNEL_FACTORIES, "Periodic"):
            raise ValueError(f"unknown kernel variant {self.kernel!r}")
        if isinstance(self.kernel, KernelSpec) and self.kernel.dim != self.window.n_theta:
            raise ValueError(
                f"kernel dim {self.kernel.dim} does not match n_theta {self.window.n_theta}"
            )
        if self.optimizer is None and self.sigma_n is None:
            raise ValueError("sigma_n is required when hyperparameters are not optimized")
        if self.sigma_n is not None and not (np.isfinite(self.sigma_n) and self.sigma_n >= 0):
            raise ValueError("sigma_n must be finite and >= 0")

    def training_references(self):
        return [
            (f"train_{j:02d}", self.base_reference.scaled(a))
            for j, a in enumerate(self.scale_factors)
        ]


def initial_kernel(variant, dataset):
    """Data-scaled starting kernel.

    sigma_f is the spread of the control effort, every length-scale is the
    typical distance between windows, std(Y) * sqrt(n_theta).
    """
    sf = float(np.std(dataset.u)) or 1.0
    ell = float(np.std(dataset.Y)) * np.sqrt(dataset.n_theta) or 1.0
    if variant == "Periodic":
        return periodic(dataset.n_theta, sf, ell, 4 * ell)
    return _KERNEL_FACTORIES[variant](dataset.n_theta, sf, ell)


def evaluate_log(log):
    """Two-norm and peak of the tracking error of one closed-loop log."""
    e = np.asarray(log.e if hasattr(log, "e") else log, dtype=float)
    if e.size == 0:
        return 0.0, 0.0
    return float(np.sqrt(np.sum(e * e))), float(np.max(np.abs(e)))


@dataclass(frozen=True)
class EvalRow:
    reference_id: str
    controller_id: str
    l2_error: float
    linf_error: float

    def __post_init__(self):
        if not (self.l2_error >= 0 and self.linf_error >= 0):
            raise ValueError("error norms must be nonnegative")


@dataclass
class EvaluationReport:
    """Per-reference error norms plus run metadata.

    Wall-clock runtimes are kept in ``runtimes`` and written to a separate
    file so that the report files are reproducible byte for byte.
    """

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)

    def lookup(self, reference_id, controller_id):
        for row in self.rows:
            if row.reference_id == reference_id and row.controller_id == controller_id:
                return row
        raise KeyError((reference_id, controller_id))

    def reference_ids(self):
        return list(dict.fromkeys(r.reference_id for r in self.rows))

    def to_csv(self, path):
        lines = ["reference_id,controller_id,l2_error,linf_error"]
        lines += [
            f"{r.reference_id},{r.controller_id},{r.l2_error!r},{r.linf_error!r}"
            for r in self.rows
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    def render_table(self):
        """Plain-text table: error norm x controller rows, one column per reference."""
        refs = self.reference_ids()
        seen = self.metadata.get("in_training", {})
        heads = [
            f"{ref} ({'in' if seen.get(ref) else 'not in'} training set)" for ref in refs
        ]
        width = max([24] + [len(h) for h in heads])
        out = ["Tracking error norms (units of y)", ""]
        out.append(" " * 18 + "".join(h.rjust(width + 2) for h in heads))
        controllers = list(dict.fromkeys(r.controller_id for r in self.rows))
        for label, attr in (("||e||_2", "l2_error"), ("||e||_inf", "linf_error")):
            for k, ctrl in enumerate(controllers):
                head = (label if k == 0 else "").ljust(11) + ctrl.ljust(7)
                cells = [f"{getattr(self.lookup(ref, ctrl), attr):.4e}" for ref in refs]
                out.append(head + "".join(c.rjust(width + 2) for c in cells))
        out.append("")
        md = self.metadata
        for key in ("M", "n_theta", "sigma_n", "lml"):
            if key in md:
                out.append(f"{key} = {md[key]}")
        for w in md.get("warnings", []):
            out.append(f"warning: {w}")
        return "\n".join(out) + "\n"

    def write(self, outdir):
        """Write report.csv, report.txt, report_meta.json and runtimes.json."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self.to_csv(outdir / "report.csv")
        (outdir / "report.txt").write_text(self.render_table())
        (outdir / "report_meta.json").write_text(
            json.dumps(self.metadata, indent=2, sort_keys=True) + "\n"
        )
        (outdir / "runtimes.json").write_text(
            json.dumps(self.runtimes, indent=2, sort_keys=True) + "\n"
        )
        return outdir


@dataclass
class ProcedureResult:
    gp: object
    feedforward: dict
    report: EvaluationReport
    training_logs: list
    evaluation_logs: dict
    optimization: object = None


def _simulate_job(args):
    return simulate_closed_loop(*args[:4], noise_std=args[4], seed=args[5],
                                reference_id=args[6], repetition=args[7])


def _run_experiments(jobs, workers):
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_simulate_job, jobs))
    return [_simulate_job(j) for j in jobs]


def _defaults(plant, controller, baseline):
    plant = plant or FrictionPlant(m=0.083, Fc=1.0, viscous=2.8531)
    controller = controller or pd_controller(300.0, 5.0, plant.Ts)
    baseline = baseline if baseline is not None else baseline_feedforward(plant.Ts)
    return plant, controller, baseline


def run_experiments(plan, plant=None, controller=None, baseline=None, workers=1, feedforward="baseline"):
    """Closed-loop training experiments, one log per (reference, repetition).

    ``feedforward`` is "baseline" (the default, F(q) active), "none", or
    "exact" for the analytic plant inverse.
    """
    plant, controller, baseline = _defaults(plant, controller, baseline)
    jobs = []
    for j, (rid, ref) in enumerate(plan.training_references()):
        if feedforward == "baseline":
            ff = baseline
        elif feedforward == "exact":
            ff = exact_inverse(plant, ref.samples)
        elif feedforward == "none":
            ff = None
        else:
            raise ValueError(f"unknown feedforward {feedforward!r}")
        for k in range(plan.repetitions):
            jobs.append((plant, controller, ref.samples, ff, plan.noise_std,
                         derive_seed(plan.seed, 0, j, k), rid, k))
    return _run_experiments(jobs, workers)


@dataclass
class TrainingOutcome:
    gp: object
    dataset: Dataset
    optimization: object
    warnings: list


def train_from_logs(plan, logs, steps=None):
    """Assemble the dataset, tune hyperparameters and fit the GP."""
    steps = steps if steps is not None else []
    warnings = []
    steps.append(STEPS[3])
    data_logs = average_repetitions(logs) if plan.average_repetitions else list(logs)
    dataset = assemble_dataset(data_logs, plan.window)
    template = plan.kernel
    if isinstance(template, str):
        template = initial_kernel(template, dataset)
    elif template.dim != dataset.n_theta:
        raise ValueError(f"kernel dim {template.dim} does not match n_theta {dataset.n_theta}")

    steps.append(STEPS[4])
    opt = None
    if plan.optimizer is None:
        kernel, sigma_n = template, float(plan.sigma_n)
    else:
        # restarts draw from the root seed, not from the optimizer section
        cfg = replace(plan.optimizer, seed=derive_seed(plan.seed, 2))
        try:
            opt = optimize(dataset, template, cfg)
            kernel, sigma_n = opt.kernel, opt.sigma_n
        except OptimizationFailedError as exc:
            msg = f"hyperparameter optimization failed ({exc}); using initial hyperparameters"
            log.warning(msg)
            warnings.append(msg)
            kernel = template
            sigma_n = cfg.initial_sigma_n or 0.1 * float(np.std(dataset.u)) or 1e-3
    gp = fit(dataset, kernel, sigma_n)
    return TrainingOutcome(gp, dataset, opt, warnings)


def evaluate_feedforward(plan, gp, eval_references, plant=None, controller=None, baseline=None):
    """Closed-loop comparison of the GP feedforward with the baseline.

    Returns (rows, feedforward signals, logs).  Feedback stays active; the
    GP output replaces the baseline.  Both runs on a reference share one
    noise sequence.
    """
    plant, controller, baseline = _defaults(plant, controller, baseline)
    evals = _as_pairs(eval_references)
    feedforward = {
        rid: predict(gp, reference_to_query_windows(ref.samples, gp.window)).mean
        for rid, ref in evals
    }
    rows, logs = [], {}
    for i, (rid, ref) in enumerate(evals):
        seed = derive_seed(plan.seed, 1, i)
        base_log = simulate_closed_loop(plant, controller, ref.samples, baseline,
                                        plan.noise_std, seed, rid)
        gp_log = simulate_closed_loop(plant, controller, ref.samples, feedforward[rid],
                                      plan.noise_std, seed, rid)
        logs[rid] = {"F(q)": base_log, "GP": gp_log}
        rows.append(EvalRow(rid, "F(q)", *evaluate_log(base_log)))
        rows.append(EvalRow(rid, "GP", *evaluate_log(gp_log)))
    return rows, feedforward, logs


def _as_pairs(eval_references):
    evals = list(eval_references.items() if isinstance(eval_references, dict) else eval_references)
    if len({rid for rid, _ in evals}) != len(evals):
        raise ValueError("evaluation reference ids must be unique")
    return evals


def report_metadata(plan, outcome, eval_references, steps=()):
    gp, opt = outcome.gp, outcome.optimization
    kernel, sigma_n = gp.kernel, gp.sigma_n
    train = [ref.samples for _, ref in plan.training_references()]
    return {
        "M": outcome.dataset.M,
        "n_theta": outcome.dataset.n_theta,
        "window": plan.window.to_dict(),
        "kernel": kernel.to_dict(),
        "sigma_n": float(sigma_n),
        "hyperparameters": dict(zip(
            kernel.param_names() + ["sigma_n"],
            [*map(float, kernel.get_params()), float(sigma_n)],
        )),
        "lml": None if opt is None else float(opt.lml),
        "scale_factors": list(plan.scale_factors),
        "repetitions": plan.repetitions,
        "noise_std": plan.noise_std,
        "seed": plan.seed,
        "in_training": {
            rid: any(s.shape == ref.samples.shape and np.array_equal(s, ref.samples) for s in train)
            for rid, ref in _as_pairs(eval_references)
        },
        "jitter": gp.jitter,
        "warnings": list(outcome.warnings),
        "steps": list(steps),
    }


def run_procedure(
    plan,
    eval_references=(),
    plant=None,
    controller=None,
    baseline=None,
    workers=1,
):
    """Learn a GP feedforward from simulated experiments and evaluate it.

    ``eval_references`` maps ids to Trajectories (a sequence of
    ``(id, trajectory)`` pairs also works).  During training the baseline
    feedforward is active together with the feedback controller.
    """
    plant, controller, baseline = _defaults(plant, controller, baseline)
    evals = _as_pairs(eval_references)
    if not probe_stability(plant, controller):
        raise ValueError("feedback controller does not stabilize the plant")

    steps, runtimes = [], {}
    clock = time.perf_counter
    # the kernel variant is fixed by the plan; data-scaled starting values
    # are filled in once the dataset exists
    steps.append(STEPS[0])
    steps.append(STEPS[1])

    steps.append(STEPS[2])
    t0 = clock()
    logs = run_experiments(plan, plant, controller, baseline, workers)
    runtimes["experiments_s"] = clock() - t0

    t0 = clock()
    outcome = train_from_logs(plan, logs, steps)
    runtimes["training_s"] = clock() - t0

    t0 = clock()
    steps.append(STEPS[5])
    steps.append(STEPS[6])
    rows, feedforward, eval_logs = evaluate_feedforward(plan, outcome.gp, evals, plant, controller, baseline)
    runtimes["evaluation_s"] = clock() - t0

    report = EvaluationReport(rows, report_metadata(plan, outcome, evals, steps), runtimes)
    return ProcedureResult(outcome.gp, feedforward, report, logs, eval_logs, outcome.optimization)


# -- convergence study -------------------------------------------------------


@dataclass(frozen=True)
class DensityLevel:
    """Training set of one convergence level: scaled references and stride."""

    scale_factors: tuple
    stride: int
    include_eval: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scale_factors", tuple(float(a) for a in self.scale_factors))
        if not self.scale_factors and not self.include_eval:
            raise ValueError("a density level needs at least one trajectory")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be an integer >= 1")


DEFAULT_DENSITY_LEVELS = (
    DensityLevel((0.90, 1.10), 120),
    DensityLevel((0.90, 1.00, 1.10), 60),
    DensityLevel((0.90, 0.94, 0.98, 1.02, 1.06, 1.10), 30),
    DensityLevel(DEFAULT_SCALES, 15),
)


@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    n_trajectories: int
    stride: int
    density: int
    rms_error: float
    rel_rms_error: float


def convergence_study(
    plan,
    levels=DEFAULT_DENSITY_LEVELS,
    plant=None,
    eval_reference=None,
    kernel=None,
    sigma_n=0.0,
):
    """Posterior-mean error against the analytic plant inverse as data grow.

    Observations are noise-free samples of the true inverse along windows of
    the scaled base reference, i.e. what perfect tracking would log.  The
    kernel is held fixed across levels; by default a Matern-3/2 with a
    length-scale of 3 % of the reference amplitude.  The density of a level
    is its number of observations M.  Errors are RMS over every sample of the
    evaluation reference (1.05 x base unless given).
    """
    plant = plant or FrictionPlant(m=0.083, Fc=1.0, viscous=2.8531)
    base = plan.base_reference
    cfg = WindowConfig(plan.window.n_c, plan.window.n_ac)
    ev = eval_reference if eval_reference is not None else base.scaled(1.05)
    ev = np.asarray(getattr(ev, "samples", ev), dtype=float)
    W_eval = reference_to_query_windows(ev, cfg)
    f_eval = inverse_from_windows(plant, W_eval, cfg.n_ac)
    if kernel is None:
        amp = float(np.max(np.abs(base.samples))) or 1.0
        kernel = matern32(cfg.n_theta, 1.0, 0.03 * amp)

    rows = []
    for i, level in enumerate(levels):
        signals = [base.samples * a for a in level.scale_factors]
        if level.include_eval:
            signals.append(ev)
        Y = np.vstack([build_windows(s, cfg)[::level.stride] for s in signals])
        u = inverse_from_windows(plant, Y, cfg.n_ac)
        gp = fit(Dataset(Y, u, WindowConfig(cfg.n_c, cfg.n_ac, level.stride)), kernel, sigma_n)
        err = predict(gp, W_eval).mean - f_eval
        rms = float(np.sqrt(np.mean(err ** 2)))
        scale = float(np.max(np.abs(f_eval))) or 1.0
        rows.append(ConvergenceRow(i + 1, len(signals), level.stride, len(Y), rms, rms / scale))
    return rows


def write_convergence(rows, path):
    lines = ["level,n_trajectories,stride,density,rms_error,rel_rms_error"]
    lines += [
        f"{r.level},{r.n_trajectories},{r.stride},{r.density},{r.rms_error!r},{r.rel_rms_error!r}"
        for r in rows
    ]
    Path(path).write_text("\n".join(lines) + "\n")
