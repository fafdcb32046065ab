"""
Parametric radial covariance models with a common interface.

A model maps ``theta = (sigma2, beta)`` to a radial kernel and its parameter
derivatives.  The likelihood only talks to this interface, so the exact
Wendland family and every approximation family are interchangeable.

Interface
---------
``value(t, theta)``
    kernel values at distances ``t``
``deriv(t, theta, order)``
    partial derivative, ``order`` as accepted by :func:`normalized_order`
``support_radius(box)``
    a radius beyond which the kernel vanishes for every ``theta`` in ``box``
"""

from __future__ import annotations

import math

import numpy as np

from .approximations import ApproxFamily, ApproxInstance, default_family, eval_approx, eval_approx_dtheta
from .wendland import SmoothnessConfig, WendlandParams, eval_dphi, eval_phi, normalized_order

__all__ = ["WendlandModel", "ApproxModel", "make_model"]


class WendlandModel:
    """Exact generalized Wendland family ``sigma2 * phi_{nu,kappa}(t / beta)``."""

    n_params = 2

    def __init__(self, smooth: SmoothnessConfig, method="auto"):
        self.smooth = smooth
        self.method = method

    @property
    def name(self):
        return "exact"

    def params(self, theta):
        return WendlandParams(float(theta[0]), float(theta[1]), self.smooth)

    def value(self, t, theta):
        return np.asarray(eval_phi(self.params(theta), t, self.method), dtype=float)

    def deriv(self, t, theta, order):
        order = normalized_order(order)
        if order == (0, 0):
            return self.value(t, theta)
        return np.asarray(eval_dphi(self.params(theta), t, order, self.method), dtype=float)

    def support_radius(self, box):
        return float(box.beta_max)

    def radius_at(self, theta):
        return float(theta[1])

    def __repr__(self):
        return f"WendlandModel(nu={self.smooth.nu}, kappa={self.smooth.kappa}, d={self.smooth.d})"


class ApproxModel:
    """Approximation ``family`` at fixed level ``m`` of the Wendland family."""

    n_params = 2

    def __init__(self, family: ApproxFamily, m: int, smooth: SmoothnessConfig):
        self.family = family
        self.m = int(m)
        self.smooth = smooth
        self._cache_key = None
        self._cache_inst = None

    @property
    def name(self):
        return self.family.name

    def instance(self, theta):
        key = (float(theta[0]), float(theta[1]))
        # consecutive calls at the same theta (value, score, Hessian) share coefficients
        if key != self._cache_key:
            base = WendlandParams(key[0], key[1], self.smooth)
            self._cache_inst = ApproxInstance(self.family, self.m, base)
            self._cache_key = key
        return self._cache_inst

    def value(self, t, theta):
        return np.asarray(eval_approx(self.instance(theta), t), dtype=float)

    def deriv(self, t, theta, order):
        return np.asarray(eval_approx_dtheta(self.instance(theta), t, order), dtype=float)

    def support_radius(self, box):
        return self.radius_at(box.upper)

    def radius_at(self, theta):
        """Support radius of the kernel at ``theta`` (an upper bound for smaller ``beta``)."""
        beta = float(theta[1])
        cap = self.family.support(self.m)
        if cap is None:
            return beta
        if self.family.kind == "truncation" or (
            self.family.kind == "nugget" and self.family.inner is not None
            and self.family.inner.kind == "truncation"
        ):
            # truncation keeps t <= C_m; pairs are collected with a strict inequality
            return float(min(np.nextafter(cap, math.inf), beta))
        return float(cap)

    def __repr__(self):
        return f"ApproxModel({self.family.name!r}, m={self.m})"


def make_model(kind, smooth, beta_max=None, m=None, inner=None):
    """``"exact"`` or an approximation kind with default schedules at level ``m``."""
    if kind == "exact":
        return WendlandModel(smooth)
    if m is None or beta_max is None:
        raise ValueError("approximation models need beta_max and m")
    return ApproxModel(default_family(kind, beta_max, inner=inner), m, smooth)
