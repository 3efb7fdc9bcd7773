"""
Stationary covariance functions for regressor windows.

Three leaf kernels are available, all with one length-scale per input
dimension (ARD):

    SquaredExponential   k = sf^2 exp(-rho / 2)
    Matern32             k = sf^2 (1 + sqrt(3) tau) exp(-sqrt(3) tau),  tau = sqrt(rho)
    Periodic             k = sf^2 exp(-1/2 sum_i (sin(pi d_i / p_i) / l_i)^2)

with ``d = a - b`` and ``rho = sum_i d_i^2 / l_i^2``.  Leaves can be added
together (``k1 + k2``) to form a ``Sum`` kernel; each leaf keeps its own
signal scale.  The observation noise ``sigma_n`` is *not* part of a kernel.

Hyperparameters are ordered ``sigma_f, lengthscales..., periods...`` per
leaf, leaves in order.  ``grad_hyper`` and ``grad_contract`` differentiate
with respect to these raw (not log) values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "HyperParams",
    "KernelSpec",
    "squared_exponential",
    "matern32",
    "periodic",
    "LEAF_VARIANTS",
]

SQRT3 = np.sqrt(3.0)
LEAF_VARIANTS = ("SquaredExponential", "Matern32", "Periodic")


def _positive_tuple(values, name):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"every entry of {name} must be finite and > 0")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class HyperParams:
    """Hyperparameters of one leaf kernel.

    ``sigma_n`` is carried here only so an optimizer starting point can be
    described in one object; kernel evaluation ignores it.
    """

    sigma_f: float
    lengthscales: tuple
    periods: Optional[tuple] = None
    sigma_n: float = 0.0

    def __post_init__(self):
        sf = float(self.sigma_f)
        if not np.isfinite(sf) or sf <= 0:
            raise ValueError("sigma_f must be finite and > 0")
        sn = float(self.sigma_n)
        if not np.isfinite(sn) or sn < 0:
            raise ValueError("sigma_n must be finite and >= 0")
        ls = _positive_tuple(self.lengthscales, "lengthscales")
        object.__setattr__(self, "sigma_f", sf)
        object.__setattr__(self, "sigma_n", sn)
        object.__setattr__(self, "lengthscales", ls)
        if self.periods is not None:
            ps = _positive_tuple(self.periods, "periods")
            if len(ps) != len(ls):
                raise ValueError("periods and lengthscales must have equal length")
            object.__setattr__(self, "periods", ps)

    @property
    def dim(self):
        return len(self.lengthscales)


def _as_windows(A, dim, name="windows"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[1] != dim:
        raise ValueError(
            f"{name} must have {dim} columns, got array of shape {A.shape}"
        )
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contain non-finite values")
    return A


@dataclass(frozen=True)
class KernelSpec:
    """Immutable description of a covariance function.

    Build leaves with :func:`squared_exponential`, :func:`matern32` or
    :func:`periodic` and combine them with ``+``.
    """

    variant: str
    params: Optional[HyperParams] = None
    terms: tuple = field(default=())

    def __post_init__(self):
        if self.variant == "Sum":
            terms = tuple(self.terms)
            if len(terms) < 2:
                raise ValueError("a Sum kernel needs at least two terms")
            if any(t.variant == "Sum" for t in terms):
                # flatten nested sums so leaves() is a flat list
                flat = []
                for t in terms:
                    flat.extend(t.terms if t.variant == "Sum" else (t,))
                terms = tuple(flat)
            if len({t.dim for t in terms}) != 1:
                raise ValueError("all terms of a Sum must share the same dim")
            object.__setattr__(self, "terms", terms)
            if self.params is not None:
                raise ValueError("a Sum kernel carries no params of its own")
            return
        if self.variant not in LEAF_VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if not isinstance(self.params, HyperParams):
            raise ValueError(f"{self.variant} kernel needs HyperParams")
        if self.terms:
            raise ValueError("leaf kernels have no terms")
        if self.variant == "Periodic" and self.params.periods is None:
            raise ValueError("Periodic kernel needs periods")
        if self.variant != "Periodic" and self.params.periods is not None:
            raise ValueError(f"{self.variant} kernel takes no periods")

    # -- structure ---------------------------------------------------------

    @property
    def dim(self):
        if self.variant == "Sum":
            return self.terms[0].dim
        return self.params.dim

    def leaves(self):
        return self.terms if self.variant == "Sum" else (self,)

    def __add__(self, other):
        if not isinstance(other, KernelSpec):
            return NotImplemented
        return KernelSpec("Sum", terms=(self, other))

    @property
    def prior_variance(self):
        """k(a, a), identical for every a since all leaves are stationary."""
        return float(sum(leaf.params.sigma_f ** 2 for leaf in self.leaves()))

    # -- parameter vector --------------------------------------------------

    def param_names(self):
        names = []
        multi = self.variant == "Sum"
        for i, leaf in enumerate(self.leaves()):
            pre = f"k{i}." if multi else ""
            names.append(pre + "sigma_f")
            names += [f"{pre}lengthscale[{j}]" for j in range(leaf.dim)]
            if leaf.variant == "Periodic":
                names += [f"{pre}period[{j}]" for j in range(leaf.dim)]
        return names

    def get_params(self):
        """Raw hyperparameter vector in the documented order."""
        out = []
        for leaf in self.leaves():
            p = leaf.params
            out.append(p.sigma_f)
            out.extend(p.lengthscales)
            if p.periods is not None:
                out.extend(p.periods)
        return np.array(out, dtype=float)

    def with_params(self, values):
        """Copy of this spec with the raw hyperparameter vector replaced."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} values, got {values.shape}")
        leaves, k = [], 0
        for leaf in self.leaves():
            n = leaf.dim
            sf = values[k]
            ls = values[k + 1:k + 1 + n]
            k += 1 + n
            ps = None
            if leaf.variant == "Periodic":
                ps = values[k:k + n]
                k += n
            hp = HyperParams(sf, ls, ps, leaf.params.sigma_n)
            leaves.append(KernelSpec(leaf.variant, hp))
        if self.variant == "Sum":
            return KernelSpec("Sum", terms=tuple(leaves))
        return leaves[0]

    @property
    def n_params(self):
        return sum(
            1 + leaf.dim * (2 if leaf.variant == "Periodic" else 1)
            for leaf in self.leaves()
        )

    # -- evaluation --------------------------------------------------------

    def eval(self, a, b):
        """Covariance k(a, b) between two single windows."""
        a = _as_windows(a, self.dim, "a")
        b = _as_windows(b, self.dim, "b")
        if a.shape[0] != 1 or b.shape[0] != 1:
            raise ValueError("eval takes single windows; use gram for sets")
        return float(self._gram(a, b)[0, 0])

    def gram(self, A, B=None):
        """Matrix of k(A_i, B_j); ``B`` defaults to ``A``."""
        A = _as_windows(A, self.dim, "A")
        B = A if B is None else _as_windows(B, self.dim, "B")
        K = self._gram(A, B)
        if B is A:
            K = 0.5 * (K + K.T)
        return K

    __call__ = gram

    def diag(self, A):
        """Diagonal of gram(A, A) without forming the matrix."""
        A = _as_windows(A, self.dim, "A")
        return np.full(A.shape[0], self.prior_variance)

    def _gram(self, A, B):
        return sum(_leaf_gram(leaf, A, B) for leaf in self.leaves())

    # -- hyperparameter gradients -----------------------------------------

    def grad_hyper(self, A):
        """Entry-wise derivatives of gram(A, A), one matrix per hyperparameter.

        Memory grows as n_params * M^2; for large problems use
        :meth:`grad_contract`.
        """
        A = _as_windows(A, self.dim, "A")
        out = []
        for leaf in self.leaves():
            out.extend(_leaf_grad_matrices(leaf, A))
        return out

    def grad_contract(self, A, W):
        """Vector of sum(W * dK/dtheta_j) for every hyperparameter theta_j.

        Equivalent to ``[np.sum(W * G) for G in self.grad_hyper(A)]`` but
        never stores more than a few M x M arrays at once.
        """
        A = _as_windows(A, self.dim, "A")
        W = np.asarray(W, dtype=float)
        if W.shape != (A.shape[0], A.shape[0]):
            raise ValueError("W must be M x M")
        parts = [_leaf_grad_contract(leaf, A, W) for leaf in self.leaves()]
        return np.concatenate(parts)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        if self.variant == "Sum":
            return {"variant": "Sum", "terms": [t.to_dict() for t in self.terms]}
        p = self.params
        d = {
            "variant": self.variant,
            "sigma_f": p.sigma_f,
            "lengthscales": list(p.lengthscales),
        }
        if p.periods is not None:
            d["periods"] = list(p.periods)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "variant" not in d:
            raise ValueError("kernel description must be an object with 'variant'")
        variant = d["variant"]
        if variant == "Sum":
            allowed = {"variant", "terms"}
        else:
            allowed = {"variant", "sigma_f", "lengthscales", "periods"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown keys for {variant} kernel: {sorted(unknown)}")
        if variant == "Sum":
            return cls("Sum", terms=tuple(cls.from_dict(t) for t in d["terms"]))
        hp = HyperParams(d["sigma_f"], d["lengthscales"], d.get("periods"))
        return cls(variant, hp)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _broadcast(value, dim, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ValueError(f"{name} must be a scalar or a length-{dim} vector")
    return arr


def squared_exponential(dim, sigma_f=1.0, lengthscales=1.0):
    return KernelSpec(
        "SquaredExponential",
        HyperParams(sigma_f, _broadcast(lengthscales, dim, "lengthscales")),
    )


def matern32(dim, sigma_f=1.0, lengthscales=1.0):
    return KernelSpec(
        "Matern32",
        HyperParams(sigma_f, _broadcast(lengthscales, dim, "lengthscales")),
    )


def periodic(dim, sigma_f=1.0, lengthscales=1.0, periods=1.0):
    return KernelSpec(
        "Periodic",
        HyperParams(
            sigma_f,
            _broadcast(lengthscales, dim, "lengthscales"),
            _broadcast(periods, dim, "periods"),
        ),
    )


# -- leaf implementations -------------------------------------------------


def _scaled_sqdist(leaf, A, B):
    ls = np.asarray(leaf.params.lengthscales)
    return cdist(A / ls, B / ls, "sqeuclidean")


def _periodic_terms(leaf, A, B):
    """Yield (d_i, sin(pi d_i / p_i)) per dimension as M x N arrays."""
    ps = leaf.params.periods
    for i in range(leaf.dim):
        d = A[:, i][:, None] - B[:, i][None, :]
        yield i, d, np.sin(np.pi * d / ps[i])


def _leaf_gram(leaf, A, B):
    sf2 = leaf.params.sigma_f ** 2
    if leaf.variant == "SquaredExponential":
        return sf2 * np.exp(-0.5 * _scaled_sqdist(leaf, A, B))
    if leaf.variant == "Matern32":
        tau = np.sqrt(_scaled_sqdist(leaf, A, B))
        return sf2 * (1.0 + SQRT3 * tau) * np.exp(-SQRT3 * tau)
    ls = leaf.params.lengthscales
    acc = np.zeros((A.shape[0], B.shape[0]))
    for i, _, s in _periodic_terms(leaf, A, B):
        acc += (s / ls[i]) ** 2
    return sf2 * np.exp(-0.5 * acc)


def _radial_factor(leaf, A):
    """K and G such that dK/dl_i = G * d_i^2 / l_i^3 for SE and Matern."""
    sf2 = leaf.params.sigma_f ** 2
    rho = _scaled_sqdist(leaf, A, A)
    if leaf.variant == "SquaredExponential":
        K = sf2 * np.exp(-0.5 * rho)
        return K, K
    tau = np.sqrt(rho)
    e = np.exp(-SQRT3 * tau)
    return sf2 * (1.0 + SQRT3 * tau) * e, 3.0 * sf2 * e


def _leaf_grad_matrices(leaf, A):
    p = leaf.params
    ls = np.asarray(p.lengthscales)
    if leaf.variant in ("SquaredExponential", "Matern32"):
        K, G = _radial_factor(leaf, A)
        out = [2.0 * K / p.sigma_f]
        for i in range(leaf.dim):
            d = A[:, i][:, None] - A[:, i][None, :]
            out.append(G * d ** 2 / ls[i] ** 3)
        return out
    K = _leaf_gram(leaf, A, A)
    out = [2.0 * K / p.sigma_f]
    dls, dps = [], []
    for i, d, s in _periodic_terms(leaf, A, A):
        c = np.cos(np.pi * d / p.periods[i])
        dls.append(K * s ** 2 / ls[i] ** 3)
        dps.append(K * s * c * np.pi * d / (ls[i] ** 2 * p.periods[i] ** 2))
    return out + dls + dps


def _leaf_grad_contract(leaf, A, W):
    p = leaf.params
    ls = np.asarray(p.lengthscales)
    if leaf.variant in ("SquaredExponential", "Matern32"):
        K, G = _radial_factor(leaf, A)
        g_sf = 2.0 * np.sum(W * K) / p.sigma_f
        H = W * G
        # sum_ab H_ab (x_a - x_b)^2, expanded; centering keeps the
        # cancellation between the three terms small
        X = A - A.mean(axis=0)
        X2 = X ** 2
        quad = (
            X2.T @ H.sum(axis=1)
            + X2.T @ H.sum(axis=0)
            - 2.0 * np.einsum("ai,ai->i", X, H @ X)
        )
        return np.concatenate([[g_sf], quad / ls ** 3])
    K = _leaf_gram(leaf, A, A)
    WK = W * K
    g_ls, g_ps = np.empty(leaf.dim), np.empty(leaf.dim)
    for i, d, s in _periodic_terms(leaf, A, A):
        c = np.cos(np.pi * d / p.periods[i])
        g_ls[i] = np.sum(WK * s ** 2) / ls[i] ** 3
        g_ps[i] = np.sum(WK * s * c * d) * np.pi / (ls[i] ** 2 * p.periods[i] ** 2)
    return np.concatenate([[2.0 * np.sum(WK) / p.sigma_f], g_ls, g_ps])
