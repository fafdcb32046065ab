"""
Covariance tapering of Matern models with a fixed-range Wendland taper.

The tapered kernel is ``k_theta(t) * w(t)`` with ``w = phi_{nu,kappa}(t / beta0)``
(unit variance, so ``w(0) = 1``), or ``k_theta(t) * w_m(t)`` when the taper
itself is replaced by one of the approximations of
:mod:`truncml.approximations`.  Only ``theta = (sigma2, range)`` of the Matern
model is estimated; the taper is fixed.

The Matern correlation is restricted to the half-integer smoothness values
with elementary closed forms, ``0.5``, ``1.5`` and ``2.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from .approximations import ApproxFamily, ApproxInstance, eval_approx
from .errors import DomainError, NotPositiveDefiniteError
from .grid import SiteSet
from .wendland import SmoothnessConfig, WendlandParams, eval_phi, normalized_order

__all__ = [
    "MaternParams",
    "TaperSpec",
    "matern_corr",
    "matern",
    "taper_values",
    "tapered_kernel",
    "TaperedMaternModel",
    "MaternModel",
    "kl_divergence",
    "fit_tapered",
]

SMOOTHNESS = (0.5, 1.5, 2.5)
_S3, _S5 = math.sqrt(3.0), math.sqrt(5.0)


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    range: float
    smoothness: float = 0.5

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.range > 0):
            raise DomainError("sigma2 and range must be positive")
        if self.smoothness not in SMOOTHNESS:
            raise DomainError(f"smoothness must be one of {SMOOTHNESS}, got {self.smoothness!r}")

    @property
    def theta(self):
        return np.array([self.sigma2, self.range])


def matern_corr(x, smoothness, deriv=0):
    """Matern correlation ``rho(x)`` at scaled distance ``x`` and its first two derivatives."""
    x = np.asarray(x, dtype=float)
    if smoothness == 0.5:
        e = np.exp(-x)
        return (e, -e, e)[deriv]
    if smoothness == 1.5:
        e = np.exp(-_S3 * x)
        if deriv == 0:
            return (1.0 + _S3 * x) * e
        if deriv == 1:
            return -3.0 * x * e
        return -3.0 * e * (1.0 - _S3 * x)
    if smoothness == 2.5:
        e = np.exp(-_S5 * x)
        if deriv == 0:
            return (1.0 + _S5 * x + 5.0 * x**2 / 3.0) * e
        if deriv == 1:
            return -5.0 / 3.0 * x * (1.0 + _S5 * x) * e
        return -5.0 / 3.0 * e * (1.0 + _S5 * x - 5.0 * x**2)
    raise DomainError(f"smoothness must be one of {SMOOTHNESS}, got {smoothness!r}")


def matern(params, t):
    return params.sigma2 * matern_corr(np.asarray(t, dtype=float) / params.range, params.smoothness)


@dataclass(frozen=True)
class TaperSpec:
    """Fixed taper ``phi_{nu,kappa}(t / beta0)``, optionally approximated at level ``m``.

    ``kappa > 2`` is required.
    """

    beta0: float
    smooth: SmoothnessConfig
    approx: Optional[ApproxFamily] = None
    m: Optional[int] = None

    def __post_init__(self):
        if not self.beta0 > 0:
            raise DomainError("taper range beta0 must be positive")
        if not self.smooth.kappa > 2:
            raise DomainError(f"the taper needs kappa > 2, got {self.smooth.kappa}")
        if (self.approx is None) != (self.m is None):
            raise DomainError("approx and m must be given together")

    @property
    def params(self):
        return WendlandParams(1.0, self.beta0, self.smooth)

    def instance(self):
        if self.approx is None:
            return None
        return ApproxInstance(self.approx, self.m, self.params)

    @property
    def support(self):
        if self.approx is None:
            return float(self.beta0)
        cap = self.approx.support(self.m)
        if cap is None:
            return float(self.beta0)
        if self.approx.kind == "truncation":
            return float(min(np.nextafter(cap, math.inf), self.beta0))
        return float(cap)


def taper_values(taper, t, instance=None):
    t = np.asarray(t, dtype=float)
    inst = taper.instance() if instance is None and taper.approx is not None else instance
    if inst is None:
        return np.asarray(eval_phi(taper.params, t), dtype=float)
    return np.asarray(eval_approx(inst, t), dtype=float)


def tapered_kernel(base, taper, t):
    """``k_theta(t) * w(t)`` (or with the approximated taper)."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise DomainError("t must be non-negative")
    out = matern(base, arr) * taper_values(taper, arr)
    return float(out) if arr.ndim == 0 else out


class MaternModel:
    """Untapered Matern family over ``theta = (sigma2, range)``; global support."""

    n_params = 2

    name = "matern"

    def __init__(self, smoothness=0.5):
        self.smoothness = smoothness

    def value(self, t, theta):
        return float(theta[0]) * matern_corr(np.asarray(t) / float(theta[1]), self.smoothness)

    def deriv(self, t, theta, order):
        n_s, n_a = normalized_order(order)
        s2, a = float(theta[0]), float(theta[1])
        t = np.asarray(t, dtype=float)
        x = t / a
        if n_s >= 2:
            return np.zeros_like(t)
        if n_a == 0:
            base = matern_corr(x, self.smoothness)
        elif n_a == 1:
            base = -(t / a**2) * matern_corr(x, self.smoothness, 1)
        elif n_a == 2:
            base = (2.0 * t / a**3) * matern_corr(x, self.smoothness, 1) + (t**2 / a**4) * matern_corr(
                x, self.smoothness, 2
            )
        else:
            raise DomainError("only derivatives up to second order in the range are implemented")
        return base if n_s == 1 else s2 * base

    def support_radius(self, box):
        return math.inf

    def radius_at(self, theta):
        return math.inf


class TaperedMaternModel(MaternModel):
    """Matern family multiplied by a fixed (possibly approximated) Wendland taper.

    The taper does not depend on ``theta`` so every derivative is the Matern
    derivative times the taper.
    """

    def __init__(self, smoothness, taper: TaperSpec):
        super().__init__(smoothness)
        self.taper = taper
        self._inst = taper.instance()

    @property
    def name(self):
        return "tapered" if self.taper.approx is None else f"tapered-{self.taper.approx.name}"

    def _w(self, t):
        return taper_values(self.taper, t, self._inst)

    def value(self, t, theta):
        return super().value(t, theta) * self._w(t)

    def deriv(self, t, theta, order):
        return super().deriv(t, theta, order) * self._w(t)

    def support_radius(self, box):
        return self.taper.support

    def radius_at(self, theta):
        return self.taper.support


def _dense(sites, kernel):
    coords = sites.coords if isinstance(sites, SiteSet) else np.asarray(sites, dtype=float)
    dist = squareform(pdist(coords))
    return kernel(dist)


def kl_divergence(sites, theta0, theta, taper, model_matrix=None):
    """Conditional Kullback-Leibler divergence of the tapered model from the true Matern law.

    ``(1/n) log det(R K^-1) + (1/n) tr(K R^-1) - 1`` with ``K`` the Matern
    matrix at ``theta0`` and ``R`` the tapered matrix at ``theta`` (approximated
    taper when ``taper.approx`` is set).  Two Cholesky factorizations.

    ``model_matrix`` overrides ``R`` (a dense array), for testing.
    """
    if not isinstance(theta0, MaternParams):
        raise DomainError("theta0 must be MaternParams")
    if isinstance(theta, MaternParams):
        base = theta
    else:
        base = MaternParams(float(theta[0]), float(theta[1]), theta0.smoothness)
    k = _dense(sites, lambda d: matern(theta0, d))
    if model_matrix is None:
        r = _dense(sites, lambda d: tapered_kernel(base, taper, d))
    else:
        r = np.asarray(model_matrix, dtype=float)
    n = k.shape[0]
    try:
        lk = linalg.cholesky(k, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("the Matern matrix K is not positive definite") from None
    try:
        lr = linalg.cholesky(r, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("the tapered matrix R is not positive definite") from None
    logdet = 2.0 * (np.sum(np.log(np.diag(lr))) - np.sum(np.log(np.diag(lk))))
    # tr(K R^-1) = ||L_R^-1 L_K||_F^2
    x = linalg.solve_triangular(lr, lk, lower=True)
    return float((logdet + np.sum(x * x)) / n - 1.0)


def fit_tapered(sites, data, smoothness, taper, theta_box, cfg=None):
    """Tapered (or truncated-tapered) ML estimate of ``(sigma2, range)``."""
    from .estimation import fit
    from .likelihood import LikelihoodContext

    model = TaperedMaternModel(smoothness, taper)
    ctx = LikelihoodContext(sites, data, model, theta_box)
    return fit(ctx, cfg)
