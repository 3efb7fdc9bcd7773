"""
Versioned JSON experiment configuration.

Every section is required and unknown keys are rejected, so a misspelt key
fails loudly instead of silently falling back to a default.  The shipped
``default_config.json`` next to this module holds the simulation defaults.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .exceptions import ConfigError
from .hyperopt import OptimizerConfig
from .kernels import KernelSpec
from .nfir import WindowConfig
from .pipeline import DensityLevel, ExperimentPlan
from .plantsim import (
    FrictionPlant,
    baseline_feedforward,
    gen_third_order_reference,
    pd_controller,
)

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=False)


class PlantSection(_Section):
    m: float = Field(gt=0)
    Fc: float = Field(ge=0)
    viscous: float = Field(ge=0)
    Ts: float = Field(gt=0)
    friction_on: Literal["velocity_sign", "output_sign"]


class FeedbackSection(_Section):
    kp: float
    kd: float


class BaselineSection(_Section):
    kv: float
    ka: float


class ControllerSection(_Section):
    feedback: FeedbackSection
    baseline: BaselineSection


class TrajectorySection(_Section):
    displacement: float
    v_max: float
    a_max: float
    j_max: float
    dwell: float = Field(ge=0)
    return_move: bool
    lead: float = Field(ge=0)
    n_samples: Optional[int] = Field(default=None, ge=1)


class WindowSection(_Section):
    n_c: int = Field(ge=0)
    n_ac: int = Field(ge=0)
    stride: int = Field(ge=1)


class OptimizerSection(_Section):
    enabled: bool
    max_iterations: int = Field(ge=1)
    gradient_tolerance: float = Field(gt=0)
    restarts: int = Field(ge=0)
    bounds: Tuple[float, float]


class PlanSection(_Section):
    scale_factors: List[float] = Field(min_length=1)
    repetitions: int = Field(ge=1)
    average_repetitions: bool
    window: WindowSection
    kernel: Union[str, Dict]
    optimizer: OptimizerSection
    noise_std: float = Field(ge=0)
    sigma_n: Optional[float] = Field(default=None, ge=0)
    eval_scales: Dict[str, float]


class LevelSection(_Section):
    scale_factors: List[float]
    stride: int = Field(ge=1)
    include_eval: bool = False


class ConvergenceSection(_Section):
    levels: List[LevelSection] = Field(min_length=1)
    eval_scale: float
    lengthscale: Optional[float] = Field(default=None, gt=0)
    sigma_f: float = Field(gt=0)
    sigma_n: float = Field(ge=0)


class ExperimentConfig(_Section):
    schema_version: Literal[1]
    seed: int = Field(ge=0)
    output_dir: str
    plant: PlantSection
    controller: ControllerSection
    trajectory: TrajectorySection
    plan: PlanSection
    convergence: ConvergenceSection

    # -- builders -------------------------------------------------------------

    def build_plant(self):
        p = self.plant
        return FrictionPlant(m=p.m, Fc=p.Fc, viscous=p.viscous, Ts=p.Ts, friction_on=p.friction_on)

    def build_controller(self):
        fb = self.controller.feedback
        return pd_controller(fb.kp, fb.kd, self.plant.Ts)

    def build_baseline(self):
        b = self.controller.baseline
        return baseline_feedforward(self.plant.Ts, b.kv, b.ka)

    def build_reference(self):
        t = self.trajectory
        return gen_third_order_reference(
            t.displacement, t.v_max, t.a_max, t.j_max, self.plant.Ts,
            dwell=t.dwell, return_move=t.return_move, lead=t.lead, n_samples=t.n_samples,
        )

    def build_plan(self, reference=None):
        p = self.plan
        window = WindowConfig(p.window.n_c, p.window.n_ac, p.window.stride)
        kernel = p.kernel if isinstance(p.kernel, str) else KernelSpec.from_dict(p.kernel)
        opt = None
        if p.optimizer.enabled:
            o = p.optimizer
            opt = OptimizerConfig(
                max_iterations=o.max_iterations,
                gradient_tolerance=o.gradient_tolerance,
                restarts=o.restarts,
                bounds=tuple(o.bounds),
                initial_sigma_n=p.sigma_n,
            )
        return ExperimentPlan(
            base_reference=reference if reference is not None else self.build_reference(),
            scale_factors=tuple(p.scale_factors),
            repetitions=p.repetitions,
            window=window,
            kernel=kernel,
            optimizer=opt,
            noise_std=p.noise_std,
            seed=self.seed,
            average_repetitions=p.average_repetitions,
            sigma_n=p.sigma_n,
        )

    def eval_references(self, reference=None):
        base = reference if reference is not None else self.build_reference()
        return {rid: base.scaled(a) for rid, a in self.plan.eval_scales.items()}

    def density_levels(self):
        return [DensityLevel(tuple(l.scale_factors), l.stride, l.include_eval)
                for l in self.convergence.levels]


def _format_errors(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data, source="<config>"):
    """Validate a decoded JSON object into an :class:`ExperimentConfig`."""
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_errors(exc)}") from None
    # cross-section checks that construct the domain objects
    try:
        cfg.build_plan()
        cfg.density_levels()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path=None):
    """Read and validate a config file; ``None`` loads the shipped defaults."""
    if path is None:
        text = resources.files(__package__).joinpath("default_config.json").read_text()
        source = "default_config.json"
    else:
        source = str(path)
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{source}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_config(data, source)


def default_config_dict():
    return json.loads(resources.files(__package__).joinpath("default_config.json").read_text())
