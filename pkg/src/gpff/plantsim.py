"""
Discrete-time closed-loop simulation of a mass with Coulomb friction.

The loop is

    e(t) = r(t) - y(t)
    u(t) = C(q) e(t) + u_ff(t)
    plant input = u(t) + eps(t),  eps ~ N(0, sigma_n^2)

and the plant is a mass ``m`` with viscous coefficient ``c`` and Coulomb
level ``Fc`` integrated with semi-implicit Euler.  Friction is treated
implicitly (time-stepping): the mass sticks for one step whenever friction
is able to stop it within that step, which gives stiction without sign
chatter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .exceptions import DivergenceError, InfeasibleTrajectoryError

__all__ = [
    "DiscreteTF",
    "FilterResult",
    "FrictionPlant",
    "ClosedLoopLog",
    "Trajectory",
    "plant_step",
    "filter_signal",
    "simulate_closed_loop",
    "gen_third_order_reference",
    "pd_controller",
    "baseline_feedforward",
    "inverse_from_windows",
    "exact_inverse",
    "probe_stability",
    "read_log_csv",
    "BASELINE_VELOCITY_GAIN",
    "BASELINE_ACCELERATION_GAIN",
]

BASELINE_VELOCITY_GAIN = 2.8531
BASELINE_ACCELERATION_GAIN = 0.083


@dataclass(frozen=True)
class DiscreteTF:
    """Transfer function num(q^-1) / den(q^-1) with sample time Ts."""

    num: tuple
    den: tuple = (1.0,)
    Ts: float = 1e-3

    def __post_init__(self):
        num = tuple(float(v) for v in np.atleast_1d(self.num))
        den = tuple(float(v) for v in np.atleast_1d(self.den))
        if not num or not den or den[0] == 0.0:
            raise ValueError("denominator must have a nonzero leading coefficient")
        if not self.Ts > 0:
            raise ValueError("Ts must be > 0")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @classmethod
    def identity(cls, Ts=1e-3):
        return cls((1.0,), (1.0,), Ts)

    @property
    def is_stable(self):
        if len(self.den) == 1:
            return True
        return bool(np.all(np.abs(np.roots(self.den)) < 1.0))


class FilterResult(NamedTuple):
    output: np.ndarray
    stable: bool


def filter_signal(tf, x):
    """Filter ``x`` from zero initial conditions; flags unstable denominators."""
    x = np.asarray(x, dtype=float)
    return FilterResult(lfilter(tf.num, tf.den, x), tf.is_stable)


class _TFState:
    """Sample-by-sample direct form II transposed realization."""

    def __init__(self, tf):
        n = max(len(tf.num), len(tf.den))
        a0 = tf.den[0]
        self.b = np.zeros(n)
        self.a = np.zeros(n)
        self.b[:len(tf.num)] = np.asarray(tf.num) / a0
        self.a[:len(tf.den)] = np.asarray(tf.den) / a0
        self.z = np.zeros(n - 1)

    def step(self, x):
        b, a, z = self.b, self.a, self.z
        y = b[0] * x + (z[0] if z.size else 0.0)
        for k in range(z.size - 1):
            z[k] = b[k + 1] * x + z[k + 1] - a[k + 1] * y
        if z.size:
            z[-1] = b[-1] * x - a[-1] * y
        return y


def pd_controller(kp, kd, Ts=1e-3):
    """C(q) = kp + kd (1 - q^-1) / Ts."""
    return DiscreteTF((kp + kd / Ts, -kd / Ts), (1.0,), Ts)


def baseline_feedforward(
    Ts=1e-3, velocity_gain=BASELINE_VELOCITY_GAIN, acceleration_gain=BASELINE_ACCELERATION_GAIN
):
    """F(q) = kv (q - 1)/(q Ts) + ka ((q - 1)/(q Ts))^2 as a filter in q^-1."""
    kv, ka = velocity_gain, acceleration_gain
    return DiscreteTF(
        (kv / Ts + ka / Ts ** 2, -kv / Ts - 2 * ka / Ts ** 2, ka / Ts ** 2), (1.0,), Ts
    )


@dataclass(frozen=True)
class FrictionPlant:
    """Mass ``m`` [kg] with Coulomb level ``Fc`` [N] and viscous term [N s/m].

    ``friction_on="velocity_sign"`` opposes the motion; ``"output_sign"``
    uses the sign of the position output instead, as a literal reading of
    the memoryless ``Fc sign(y)`` model.
    """

    m: float = BASELINE_ACCELERATION_GAIN
    Fc: float = 1.0
    viscous: float = 0.0
    Ts: float = 1e-3
    friction_on: str = "velocity_sign"

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be > 0")
        if not self.Fc >= 0:
            raise ValueError("Coulomb level must be >= 0")
        if not self.Ts > 0:
            raise ValueError("Ts must be > 0")
        if self.friction_on not in ("velocity_sign", "output_sign"):
            raise ValueError("friction_on must be 'velocity_sign' or 'output_sign'")


def plant_step(plant, state, u):
    """Advance (position, velocity) by one sample under input ``u``."""
    y, v = state
    if not (np.isfinite(u) and np.isfinite(y) and np.isfinite(v)):
        raise ValueError("plant_step needs finite state and input")
    h = plant.Ts / plant.m
    v_free = v + h * (u - plant.viscous * v)
    if plant.friction_on == "output_sign":
        v_next = v_free - h * plant.Fc * np.sign(y)
    else:
        stop = h * plant.Fc
        if abs(v_free) <= stop:
            v_next = 0.0
        else:
            v_next = v_free - stop * np.sign(v_free)
    return y + plant.Ts * v_next, v_next


def inverse_from_windows(plant, windows, n_ac):
    """Input that moves the plant along each window's path.

    Uses y(t+1), y(t), y(t-1), found at columns ``n_ac - 1``, ``n_ac`` and
    ``n_ac + 1`` of descending-time windows (so needs n_ac >= 1, n_c >= 1).
    Where the path stands still the friction force is taken as the one
    that exactly stops the mass, which lies inside the stiction band.
    """
    W = np.atleast_2d(np.asarray(windows, dtype=float))
    if n_ac < 1 or W.shape[1] < n_ac + 2:
        raise ValueError("the inverse needs one sample of preview and one of history")
    y_next, y_now, y_prev = W[:, n_ac - 1], W[:, n_ac], W[:, n_ac + 1]
    Ts = plant.Ts
    v_now = (y_now - y_prev) / Ts
    v_next = (y_next - y_now) / Ts
    u = plant.m / Ts * (v_next - v_now) + plant.viscous * v_now
    if plant.friction_on == "output_sign":
        return u + plant.Fc * np.sign(y_now)
    return u + plant.Fc * np.sign(v_next)


def exact_inverse(plant, r):
    """Feedforward that makes the plant follow ``r`` exactly from rest."""
    from .nfir import WindowConfig, build_windows

    return inverse_from_windows(plant, build_windows(r, WindowConfig(1, 1)), 1)


@dataclass(frozen=True)
class Trajectory:
    samples: np.ndarray
    Ts: float
    v_max: float
    a_max: float
    j_max: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).ravel()
        if not np.all(np.isfinite(s)):
            raise ValueError("trajectory samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    def scaled(self, factor):
        """Position profile multiplied by ``factor``; bounds scale with it."""
        f = float(factor)
        a = abs(f)
        return Trajectory(self.samples * f, self.Ts, self.v_max * a, self.a_max * a, self.j_max * a)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "r"])
            for k, v in enumerate(self.samples, start=1):
                w.writerow([k, repr(float(v))])


def _profile_durations(d, v_max, a_max, j_max):
    """Jerk, constant-acceleration and cruise durations of a symmetric move."""
    if a_max ** 2 / j_max <= v_max:
        # a_max is reachable before v_max
        tj, ta, v_peak = a_max / j_max, v_max / a_max - a_max / j_max, v_max
    else:
        tj, ta, v_peak = np.sqrt(v_max / j_max), 0.0, v_max
    t_acc = 2 * tj + ta
    if v_peak * t_acc <= d:
        return tj, ta, (d - v_peak * t_acc) / v_peak
    # v_max is not reached: shrink the peak velocity until accel+decel covers d
    v = 0.5 * a_max * (-a_max / j_max + np.sqrt((a_max / j_max) ** 2 + 4 * d / a_max))
    if v >= a_max ** 2 / j_max:
        return a_max / j_max, v / a_max - a_max / j_max, 0.0
    v = (d * np.sqrt(j_max) / 2.0) ** (2.0 / 3.0)
    return np.sqrt(v / j_max), 0.0, 0.0


def _move(d, v_max, a_max, j_max, t):
    """Position of a 7-phase jerk-limited move of length ``d`` at times ``t``."""
    tj, ta, tv = _profile_durations(abs(d), v_max, a_max, j_max)
    jerks = [j_max, 0.0, -j_max, 0.0, -j_max, 0.0, j_max]
    durs = [tj, ta, tj, tv, tj, ta, tj]
    pos = np.zeros_like(t)
    p = v = a = 0.0
    t0 = 0.0
    for j, T in zip(jerks, durs):
        mask = (t >= t0) & (t < t0 + T)
        tau = t[mask] - t0
        pos[mask] = p + v * tau + a * tau ** 2 / 2 + j * tau ** 3 / 6
        p, v, a = p + v * T + a * T ** 2 / 2 + j * T ** 3 / 6, v + a * T + j * T ** 2 / 2, a + j * T
        t0 += T
    pos[t >= t0] = abs(d)
    # the profile is monotone; clip roundoff overshoot at segment ends
    return np.sign(d) * np.clip(pos, 0.0, abs(d)), t0


def gen_third_order_reference(
    displacement, v_max, a_max, j_max, Ts=1e-3, dwell=0.0, return_move=False,
    lead=0.0, n_samples=None,
):
    """Jerk-limited point-to-point reference sampled at ``Ts``.

    Layout: ``lead`` seconds at rest, the move, ``dwell`` seconds at the
    target, then (if ``return_move``) the move back and rest until
    ``n_samples``.
    """
    for name, val in (("v_max", v_max), ("a_max", a_max), ("j_max", j_max), ("Ts", Ts)):
        if not (np.isfinite(val) and val > 0):
            raise InfeasibleTrajectoryError(f"{name} must be finite and > 0")
    if dwell < 0 or lead < 0:
        raise InfeasibleTrajectoryError("dwell and lead must be >= 0")
    if displacement == 0:
        t_move = 0.0
    else:
        _, t_move = _move(displacement, v_max, a_max, j_max, np.zeros(0))
    legs = 2 if return_move else 1
    needed = int(np.ceil((lead + legs * t_move + dwell) / Ts)) + 1
    n = needed if n_samples is None else int(n_samples)
    if n < needed:
        raise InfeasibleTrajectoryError(
            f"profile needs {needed} samples but only {n} were requested"
        )
    t = np.arange(n) * Ts
    x = np.zeros(n)
    if displacement != 0:
        x, _ = _move(displacement, v_max, a_max, j_max, t - lead)
        x[t < lead] = 0.0
        if return_move:
            back, _ = _move(-displacement, v_max, a_max, j_max, t - lead - t_move - dwell)
            x = x + np.where(t >= lead + t_move + dwell, back, 0.0)
    return Trajectory(x, Ts, v_max, a_max, j_max)


@dataclass
class ClosedLoopLog:
    """Aligned signals of one experiment, plus bookkeeping."""

    r: np.ndarray
    y: np.ndarray
    u: np.ndarray
    e: np.ndarray
    seed: int = 0
    reference_id: str = "r"
    repetition: int = 0

    def __post_init__(self):
        for name in ("r", "y", "u", "e"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        n = self.r.size
        if any(getattr(self, k).size != n for k in ("y", "u", "e")):
            raise ValueError("log signals must have equal length")

    def __len__(self):
        return self.r.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(
                f"# reference_id={self.reference_id} repetition={self.repetition} seed={self.seed}\n"
            )
            w = csv.writer(fh)
            w.writerow(["t", "r", "y", "u", "e"])
            for k in range(self.r.size):
                w.writerow(
                    [k + 1] + [repr(float(getattr(self, c)[k])) for c in ("r", "y", "u", "e")]
                )


def read_log_csv(path):
    """Parse a log written by :meth:`ClosedLoopLog.to_csv`.

    Errors name the file and the offending line.
    """
    meta = {"reference_id": "r", "repetition": "0", "seed": "0"}
    cols = {c: [] for c in ("r", "y", "u", "e")}
    header = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for item in line[1:].split():
                    k, _, v = item.partition("=")
                    meta[k] = v
                continue
            fields = next(csv.reader([line]))
            if header is None:
                header = fields
                if header != ["t", "r", "y", "u", "e"]:
                    raise ValueError(f"{path}:{lineno}: expected header t,r,y,u,e")
                continue
            if len(fields) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            try:
                vals = [float(f) for f in fields[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            for c, v in zip(("r", "y", "u", "e"), vals):
                cols[c].append(v)
    if header is None:
        raise ValueError(f"{path}: empty log file")
    return ClosedLoopLog(
        **cols,
        seed=int(meta["seed"]),
        reference_id=meta["reference_id"],
        repetition=int(meta["repetition"]),
    )


def simulate_closed_loop(
    plant, controller, r, feedforward=None, noise_std=0.0, seed=0,
    reference_id="r", repetition=0,
):
    """Run one closed-loop experiment.

    ``feedforward`` is either a precomputed signal, a :class:`DiscreteTF`
    applied to ``r``, or None.  The noise sequence is drawn from
    ``default_rng(seed)`` whether or not ``noise_std`` is zero.
    """
    r = np.asarray(getattr(r, "samples", r), dtype=float).ravel()
    n = r.size
    if feedforward is None:
        ff = np.zeros(n)
    elif isinstance(feedforward, DiscreteTF):
        ff = filter_signal(feedforward, r).output
    else:
        ff = np.asarray(feedforward, dtype=float).ravel()
    if ff.size != n:
        raise ValueError(f"feedforward has {ff.size} samples, reference has {n}")
    eps = np.random.default_rng(seed).normal(0.0, 1.0, n) * noise_std
    limit = 1e6 * (np.max(np.abs(r)) if n and np.any(r) else 1.0)

    C = _TFState(controller)
    y = np.empty(n)
    u = np.empty(n)
    state = (0.0, 0.0)
    for k in range(n):
        y[k] = state[0]
        if not abs(y[k]) <= limit:
            raise DivergenceError(
                f"output {y[k]:.3g} exceeded 1e6 x max|r| at sample {k + 1}"
            )
        u[k] = C.step(r[k] - y[k]) + ff[k]
        state = plant_step(plant, state, u[k] + eps[k])
    return ClosedLoopLog(r, y, u, r - y, seed, reference_id, repetition)


def probe_stability(plant, controller, n=2000, step=1e-3):
    """Step-response probe: True if the error stays bounded and settles.

    Run with friction switched off so that the linear loop is tested.
    """
    lin = FrictionPlant(plant.m, 0.0, plant.viscous, plant.Ts, plant.friction_on)
    r = np.full(n, step)
    try:
        log_ = simulate_closed_loop(lin, controller, r)
    except DivergenceError:
        return False
    tail = np.abs(log_.e[-n // 10:])
    return bool(np.all(np.isfinite(log_.e)) and tail.max() < 0.05 * step)
