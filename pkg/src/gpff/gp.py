"""
Exact Gaussian-process regression on NFIR regressor windows.

With ``Kn = K(Y, Y) + sigma_n^2 I`` and ``alpha = Kn^-1 u`` the posterior at
query windows R is

    mean = K(R, Y) alpha
    cov  = K(R, R) - K(R, Y) Kn^-1 K(Y, R)

Everything goes through one Cholesky factor of ``Kn``.  The prior mean is
zero.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .exceptions import IllConditionedError
from .kernels import KernelSpec
from .nfir import Dataset, WindowConfig

__all__ = [
    "Dataset",
    "TrainedGP",
    "Posterior",
    "fit",
    "predict",
    "log_marginal_likelihood",
    "save_model",
    "load_model",
    "JITTER_START",
    "JITTER_MAX",
]

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
MODEL_MAGIC = b"GPFF-MODEL 1\n"
_CHUNK = 2048


def _unique_rows(dataset):
    """Indices of the first occurrence of every distinct window, in order.

    Repeated windows with different targets cannot be interpolated with
    sigma_n = 0 and raise.  Consistent repeats carry no information in the
    noise-free case, so the posterior is unchanged when they are dropped.
    """
    _, first, inv = np.unique(dataset.Y, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    if first.size == dataset.M:
        return None
    lo = np.full(inv.max() + 1, np.inf)
    hi = np.full(inv.max() + 1, -np.inf)
    np.minimum.at(lo, inv, dataset.u)
    np.maximum.at(hi, inv, dataset.u)
    if np.any(hi > lo):
        raise IllConditionedError(
            "duplicate regressor windows with different control efforts "
            "cannot be interpolated with sigma_n = 0",
            jitters=(),
        )
    return np.sort(first)


def _factor(Kn):
    """Cholesky of Kn with escalating diagonal jitter.

    Returns (L, jitter) where jitter is the absolute value added to the
    diagonal (0.0 if none was needed).
    """
    try:
        return sla.cholesky(Kn, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(Kn))) if Kn.size else 1.0
    tried = []
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * scale
        tried.append(jitter)
        try:
            L = sla.cholesky(
                Kn + jitter * np.eye(Kn.shape[0]), lower=True, check_finite=False
            )
            log.debug("Cholesky needed jitter %.3g", jitter)
            return L, jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise IllConditionedError(
        "Gram matrix is not positive definite even with jitter "
        + ", ".join(f"{j:.1e}" for j in tried),
        jitters=tried,
    )


def _noisy_gram(dataset, kernel, sigma_n):
    if kernel.dim != dataset.n_theta:
        raise ValueError(
            f"kernel dim {kernel.dim} does not match n_theta {dataset.n_theta}"
        )
    Kn = kernel.gram(dataset.Y)
    Kn[np.diag_indices_from(Kn)] += sigma_n ** 2
    return Kn


@dataclass(frozen=True)
class TrainedGP:
    dataset: Dataset
    kernel: KernelSpec
    sigma_n: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def window(self):
        return self.dataset.window

    def predict(self, R, want_cov=False, full_cov=False):
        return predict(self, R, want_cov=want_cov, full_cov=full_cov)


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    cov: Optional[np.ndarray] = None

    @property
    def var(self):
        if self.cov is None:
            return None
        return self.cov if self.cov.ndim == 1 else np.diag(self.cov)


def fit(dataset, kernel, sigma_n):
    """Factorize ``K(Y, Y) + sigma_n^2 I`` and solve for the weights alpha."""
    sigma_n = float(sigma_n)
    if not np.isfinite(sigma_n) or sigma_n < 0:
        raise ValueError("sigma_n must be finite and >= 0")
    if dataset.M == 0:
        raise ValueError("cannot fit a GP to an empty dataset")
    if sigma_n == 0.0:
        keep = _unique_rows(dataset)
        if keep is not None:
            log.debug("dropping %d repeated windows", dataset.M - keep.size)
            dataset = Dataset(dataset.Y[keep], dataset.u[keep], dataset.window)
    L, jitter = _factor(_noisy_gram(dataset, kernel, sigma_n))
    alpha = sla.cho_solve((L, True), dataset.u, check_finite=False)
    return TrainedGP(dataset, kernel, sigma_n, L, alpha, jitter)


def predict(gp, R, want_cov=False, full_cov=False):
    """Posterior mean (and optionally covariance) at query windows ``R``.

    ``want_cov`` returns the posterior variances; add ``full_cov=True`` for
    the N x N matrix.  Variances are clamped at zero.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[None, :]
    if R.ndim != 2 or R.shape[1] != gp.dataset.n_theta:
        raise ValueError(
            f"query windows must have {gp.dataset.n_theta} columns, got shape {R.shape}"
        )
    Y, k = gp.dataset.Y, gp.kernel
    if want_cov and full_cov:
        Ks = k.gram(R, Y)
        V = sla.solve_triangular(gp.chol, Ks.T, lower=True, check_finite=False)
        cov = k.gram(R) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        d = np.diag_indices_from(cov)
        cov[d] = np.maximum(cov[d], 0.0)
        return Posterior(Ks @ gp.alpha, cov)
    mean = np.empty(R.shape[0])
    var = np.empty(R.shape[0]) if want_cov else None
    for s in range(0, R.shape[0], _CHUNK):
        Rc = R[s:s + _CHUNK]
        Ks = k.gram(Rc, Y)
        mean[s:s + _CHUNK] = Ks @ gp.alpha
        if want_cov:
            V = sla.solve_triangular(gp.chol, Ks.T, lower=True, check_finite=False)
            var[s:s + _CHUNK] = k.diag(Rc) - np.einsum("ij,ij->j", V, V)
    if want_cov:
        var = np.maximum(var, 0.0)
    return Posterior(mean, var)


def log_marginal_likelihood(dataset, kernel, sigma_n, with_grad=True):
    """Log evidence of ``u`` and its gradient.

    The gradient is taken with respect to the raw hyperparameters in the
    order ``kernel.get_params()`` followed by ``sigma_n``.  If jitter had to
    be added to factorize the matrix, the value refers to the jittered
    covariance.
    """
    sigma_n = float(sigma_n)
    Kn = _noisy_gram(dataset, kernel, sigma_n)
    L, jitter = _factor(Kn)
    u = dataset.u
    alpha = sla.cho_solve((L, True), u, check_finite=False)
    M = dataset.M
    lml = (
        -0.5 * float(u @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * M * np.log(2.0 * np.pi)
    )
    if not with_grad:
        return lml
    Kinv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise IllConditionedError("inverting the Cholesky factor failed")
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    # dLML/dtheta = 1/2 tr((alpha alpha^T - Kn^-1) dKn/dtheta)
    W = np.outer(alpha, alpha) - Kinv
    g_kernel = 0.5 * kernel.grad_contract(dataset.Y, W)
    g_noise = sigma_n * np.trace(W)
    return lml, np.concatenate([g_kernel, [g_noise]])


# -- persistence -------------------------------------------------------------


def save_model(gp, path):
    """Write a model file.

    Layout: the magic line ``GPFF-MODEL 1``, one line of JSON header
    (kernel, window, sigma_n, jitter, M, n_theta), then three ``.npy``
    arrays back to back: Y, u, alpha.  The Cholesky factor is recomputed on
    load.  Identical inputs produce identical bytes.
    """
    header = {
        "format": 1,
        "kernel": gp.kernel.to_dict(),
        "window": gp.window.to_dict(),
        "sigma_n": gp.sigma_n,
        "jitter": gp.jitter,
        "M": gp.dataset.M,
        "n_theta": gp.dataset.n_theta,
    }
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for arr in (gp.dataset.Y, gp.dataset.u, gp.alpha):
        np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.readline() != MODEL_MAGIC:
            raise ValueError(f"{path}: not a gpff model file")
        header = json.loads(fh.readline())
        Y = np.load(fh, allow_pickle=False)
        u = np.load(fh, allow_pickle=False)
        alpha = np.load(fh, allow_pickle=False)
    window = WindowConfig(**header["window"])
    kernel = KernelSpec.from_dict(header["kernel"])
    dataset = Dataset(Y, u, window)
    if dataset.M != header["M"] or dataset.n_theta != header["n_theta"]:
        raise ValueError(f"{path}: header does not match payload shape")
    Kn = _noisy_gram(dataset, kernel, header["sigma_n"])
    Kn[np.diag_indices_from(Kn)] += header["jitter"]
    L = sla.cholesky(Kn, lower=True, check_finite=False)
    return TrainedGP(dataset, kernel, header["sigma_n"], L, alpha, header["jitter"])
