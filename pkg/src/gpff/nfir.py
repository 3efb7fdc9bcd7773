"""
Noncausal NFIR regressors.

A window at time t holds the signal samples

    [s(t + n_ac), s(t + n_ac - 1), ..., s(t), ..., s(t - n_c)]

(descending time), so position ``j`` holds ``s(t + n_ac - j)``.  Samples
outside ``1..N`` are zero.  Time is 1-based in the documentation; arrays
are 0-based, so row ``i`` of a window matrix corresponds to ``t = i + 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "WindowConfig",
    "Dataset",
    "build_windows",
    "reference_to_query_windows",
    "assemble_dataset",
    "average_repetitions",
]


@dataclass(frozen=True)
class WindowConfig:
    n_c: int = 20
    n_ac: int = 40
    stride: int = 1

    def __post_init__(self):
        for name in ("n_c", "n_ac", "stride"):
            v = getattr(self, name)
            if int(v) != v:
                raise ValueError(f"{name} must be an integer")
            object.__setattr__(self, name, int(v))
        if self.n_c < 0 or self.n_ac < 0:
            raise ValueError("n_c and n_ac must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_theta(self):
        return self.n_c + self.n_ac + 1

    def to_dict(self):
        return {"n_c": self.n_c, "n_ac": self.n_ac, "stride": self.stride}


@dataclass(frozen=True)
class Dataset:
    """Regressor matrix ``Y`` (M x n_theta) with control efforts ``u`` (M)."""

    Y: np.ndarray
    u: np.ndarray
    window: WindowConfig

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        u = np.asarray(self.u, dtype=float).ravel()
        if Y.ndim != 2:
            raise ValueError("Y must be a 2-D array")
        if Y.shape[0] != u.shape[0]:
            raise ValueError(f"Y has {Y.shape[0]} rows but u has {u.shape[0]} entries")
        if Y.shape[1] != self.window.n_theta:
            raise ValueError(
                f"Y has {Y.shape[1]} columns, window config implies {self.window.n_theta}"
            )
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(u))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "u", u)

    @property
    def M(self):
        return self.Y.shape[0]

    @property
    def n_theta(self):
        return self.Y.shape[1]

    def to_csv(self, path):
        """Write ``u`` followed by the flattened window, one row per observation.

        Column ``w_j`` holds ``y(t + n_ac - j)``.
        """
        header = ["u"] + [f"w_{j}" for j in range(self.n_theta)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for ui, row in zip(self.u, self.Y):
                w.writerow([repr(float(ui))] + [repr(float(v)) for v in row])


def build_windows(signal, cfg):
    """One window per sample of ``signal``; returns an N x n_theta array."""
    s = np.asarray(signal, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("cannot build windows from an empty signal")
    padded = np.concatenate([np.zeros(cfg.n_c), s, np.zeros(cfg.n_ac)])
    # row i of the view is s[i - n_c .. i + n_ac] in ascending time
    return sliding_window_view(padded, cfg.n_theta)[:, ::-1].copy()


def reference_to_query_windows(r, cfg):
    """Rows of the Toeplitz matrix R used to query the inverse model."""
    return build_windows(r, cfg)


def assemble_dataset(logs, cfg):
    """Stack decimated (window of y, u) pairs from several experiments.

    Decimation is applied per log and keeps 0-based rows ``0, stride,
    2*stride, ...`` (t = 1, 1 + stride, ...), then logs are concatenated.
    """
    Ys, us = [], []
    for k, log in enumerate(logs):
        y = np.asarray(log.y, dtype=float).ravel()
        u = np.asarray(log.u, dtype=float).ravel()
        if y.shape != u.shape:
            raise ValueError(f"log {k}: y has {y.size} samples but u has {u.size}")
        keep = slice(0, None, cfg.stride)
        Ys.append(build_windows(y, cfg)[keep])
        us.append(u[keep])
    if not Ys:
        return Dataset(np.empty((0, cfg.n_theta)), np.empty(0), cfg)
    return Dataset(np.vstack(Ys), np.concatenate(us), cfg)


def average_repetitions(logs):
    """Sample-wise mean of u and y over logs that share a reference.

    Logs are grouped by ``reference_id``; groups keep the order in which
    their first member appears.  A group of one is returned unchanged.
    """
    from .plantsim import ClosedLoopLog

    groups = {}
    for log in logs:
        groups.setdefault(log.reference_id, []).append(log)
    out = []
    for ref_id, members in groups.items():
        if len(members) == 1:
            out.append(members[0])
            continue
        n = len(members[0].r)
        if any(len(m.r) != n for m in members):
            raise ValueError(f"logs for reference {ref_id!r} differ in length")
        r = np.asarray(members[0].r, dtype=float)
        y = np.mean([m.y for m in members], axis=0)
        u = np.mean([m.u for m in members], axis=0)
        out.append(
            ClosedLoopLog(
                r=r, y=y, u=u, e=r - y, seed=members[0].seed,
                reference_id=ref_id, repetition=-1,
            )
        )
    return out
