"""
Command-line entry point.

Every subcommand reads one experiment config (the shipped defaults when
``--config`` is omitted) and writes plain CSV/JSON/text files.  Given the
same inputs and seed the outputs are byte-identical; wall-clock timings go
to a separate ``runtimes.json``.

Exit codes: 0 success, 2 usage or config error, 3 bad input file,
4 numerical failure (ill-conditioning, divergence, failed optimization),
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .exceptions import (
    ConfigError,
    DivergenceError,
    IllConditionedError,
    InfeasibleTrajectoryError,
    OptimizationFailedError,
)
from .gp import load_model, predict, save_model
from .hyperopt import write_trace
from .kernels import KernelSpec, matern32
from .nfir import reference_to_query_windows
from .pipeline import (
    STEPS,
    EvaluationReport,
    convergence_study,
    evaluate_feedforward,
    report_metadata,
    run_experiments,
    run_procedure,
    train_from_logs,
    write_convergence,
    TrainingOutcome,
)
from .plantsim import read_log_csv

log = logging.getLogger("gpff")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4
KERNEL_CHOICES = ("Matern32", "SquaredExponential", "Periodic")


class InputError(ValueError):
    """A data file given on the command line could not be used."""


# -- config handling ----------------------------------------------------------


def _load_raw(path):
    if path is None:
        return config_mod.default_config_dict(), "default_config.json"
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text), str(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _kernel_override(value):
    if value in KERNEL_CHOICES:
        return value
    try:
        return KernelSpec.from_json(Path(value).read_text()).to_dict()
    except OSError:
        raise ConfigError(
            f"--kernel must be one of {', '.join(KERNEL_CHOICES)} or a kernel JSON file"
        ) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{value}: invalid kernel description ({exc})") from None


def resolve_config(args):
    """Config file plus command-line overrides, validated."""
    data, source = _load_raw(args.config)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    sections = {k: data.get(k) for k in ("plan", "plant")}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    if isinstance(sections["plan"], dict):
        if args.stride is not None:
            if isinstance(sections["plan"].get("window"), dict):
                sections["plan"]["window"]["stride"] = args.stride
        if args.kernel is not None:
            sections["plan"]["kernel"] = _kernel_override(args.kernel)
    if args.friction_on is not None and isinstance(sections["plant"], dict):
        sections["plant"]["friction_on"] = args.friction_on
    return config_mod.parse_config(data, source)


def _outdir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_reference_csv(path):
    """Column ``r`` of a CSV with a header row (trajectory or log files)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    values, col = [], None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if col is None:
                if "r" not in row:
                    raise InputError(f"{path}:{lineno}: header has no 'r' column")
                col = row.index("r")
                continue
            try:
                values.append(float(row[col]))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: bad value in column 'r'") from None
    if not values:
        raise InputError(f"{path}: no samples")
    return np.array(values)


def _read_logs(logs_dir):
    paths = sorted(Path(logs_dir).glob("*.csv"))
    if not paths:
        raise InputError(f"{logs_dir}: no log CSV files found")
    logs = []
    for p in paths:
        try:
            logs.append(read_log_csv(p))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    return logs


# -- subcommands --------------------------------------------------------------


def cmd_gen_ref(args, cfg):
    ref = cfg.build_reference().scaled(args.scale)
    path = Path(args.file) if args.file else _outdir(cfg) / "reference.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    ref.to_csv(path)
    print(f"wrote {path} ({len(ref)} samples)")


def cmd_simulate(args, cfg):
    plan = cfg.build_plan()
    logs = run_experiments(
        plan, cfg.build_plant(), cfg.build_controller(), cfg.build_baseline(),
        workers=args.workers, feedforward=args.feedforward,
    )
    out = _outdir(cfg) / "logs"
    out.mkdir(exist_ok=True)
    for lg in logs:
        lg.to_csv(out / f"{lg.reference_id}_rep{lg.repetition}.csv")
    print(f"wrote {len(logs)} logs to {out}")


def _train(cfg, logs):
    plan = cfg.build_plan()
    outcome = train_from_logs(plan, logs)
    out = _outdir(cfg)
    save_model(outcome.gp, out / "model.gpff")
    opt = outcome.optimization
    if opt is not None:
        write_trace(opt.trace, outcome.gp.kernel.param_names() + ["sigma_n"], out / "trace.csv")
    for w in outcome.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return plan, outcome, out


def cmd_train(args, cfg):
    plan, outcome, out = _train(cfg, _read_logs(args.logs))
    _write_json(out / "train_summary.json", {
        "M": outcome.dataset.M,
        "n_theta": outcome.dataset.n_theta,
        "sigma_n": float(outcome.gp.sigma_n),
        "kernel": outcome.gp.kernel.to_dict(),
        "lml": None if outcome.optimization is None else float(outcome.optimization.lml),
        "warnings": outcome.warnings,
    })
    print(f"M = {outcome.dataset.M}, n_theta = {outcome.dataset.n_theta}")
    print(f"wrote {out / 'model.gpff'}")


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: not a usable model file ({exc})") from None


def cmd_predict(args, cfg):
    gp = _load_model(args.model)
    r = read_reference_csv(args.reference)
    W = reference_to_query_windows(r, gp.window)
    if W.shape[1] != gp.dataset.n_theta:
        raise InputError(f"window width {W.shape[1]} does not match model n_theta {gp.dataset.n_theta}")
    post = predict(gp, W, want_cov=args.variance)
    path = Path(args.file) if args.file else _outdir(cfg) / "feedforward.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u_ff"] + (["variance"] if args.variance else []))
        for k in range(r.size):
            row = [k + 1, repr(float(post.mean[k]))]
            if args.variance:
                row.append(repr(float(post.var[k])))
            w.writerow(row)
    print(f"wrote {path} ({r.size} samples)")


def cmd_evaluate(args, cfg):
    gp = _load_model(args.model)
    plan = cfg.build_plan()
    evals = cfg.eval_references(plan.base_reference)
    rows, _, _ = evaluate_feedforward(
        plan, gp, evals, cfg.build_plant(), cfg.build_controller(), cfg.build_baseline()
    )
    outcome = TrainingOutcome(gp, gp.dataset, None, [])
    meta = report_metadata(plan, outcome, evals, STEPS[5:])
    report = EvaluationReport(rows, meta)
    out = report.write(_outdir(cfg))
    sys.stdout.write(report.render_table())
    print(f"wrote report to {out}")


def cmd_reproduce_paper(args, cfg):
    plan = cfg.build_plan()
    res = run_procedure(
        plan, cfg.eval_references(plan.base_reference),
        cfg.build_plant(), cfg.build_controller(), cfg.build_baseline(),
        workers=args.workers,
    )
    out = res.report.write(_outdir(cfg))
    save_model(res.gp, out / "model.gpff")
    if res.optimization is not None:
        write_trace(res.optimization.trace, res.gp.kernel.param_names() + ["sigma_n"], out / "trace.csv")
    for w in res.report.metadata["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    sys.stdout.write(res.report.render_table())
    print(f"wrote report to {out}")


def cmd_convergence_study(args, cfg):
    plan = cfg.build_plan()
    conv = cfg.convergence
    n_theta = plan.window.n_theta
    amp = float(np.max(np.abs(plan.base_reference.samples))) or 1.0
    kernel = matern32(n_theta, conv.sigma_f, conv.lengthscale or 0.03 * amp)
    rows = convergence_study(
        plan, cfg.density_levels(), cfg.build_plant(),
        eval_reference=plan.base_reference.scaled(conv.eval_scale),
        kernel=kernel, sigma_n=conv.sigma_n,
    )
    path = _outdir(cfg) / "convergence.csv"
    write_convergence(rows, path)
    print("level  trajectories  stride  density  rel_rms_error")
    for r in rows:
        print(f"{r.level:5d}  {r.n_trajectories:12d}  {r.stride:6d}  {r.density:7d}  {r.rel_rms_error:.4e}")
    print(f"wrote {path}")


# -- argument parsing ---------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: shipped defaults)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--stride", type=int, help="override the dataset stride")
    common.add_argument("--kernel", help=f"{', '.join(KERNEL_CHOICES)} or a kernel JSON file")
    common.add_argument("--friction-on", choices=("velocity_sign", "output_sign"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gpff", description="GP feedforward from closed-loop data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-ref", parents=[common], help="write the configured reference trajectory")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--file", help="output CSV (default: <out>/reference.csv)")
    p.set_defaults(func=cmd_gen_ref)

    p = sub.add_parser("simulate", parents=[common], help="run the training experiments")
    p.add_argument("--feedforward", choices=("baseline", "none", "exact"), default="baseline")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit a GP to logged experiments")
    p.add_argument("--logs", required=True, help="directory of log CSV files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="feedforward for a reference CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--variance", action="store_true", help="add a posterior variance column")
    p.add_argument("--file", help="output CSV (default: <out>/feedforward.csv)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="closed-loop comparison against the baseline")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce-paper", parents=[common], help="full simulated protocol and report")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_reproduce_paper)

    p = sub.add_parser("convergence-study", parents=[common], help="prediction error versus data density")
    p.set_defaults(func=cmd_convergence_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"gpff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, InfeasibleTrajectoryError) as exc:
        print(f"gpff: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IllConditionedError, DivergenceError, OptimizationFailedError) as exc:
        print(f"gpff: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"gpff: invalid value: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
