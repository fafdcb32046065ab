"""
Generalized Wendland covariance functions.

The base function is

.. math::
    \\phi_{\\nu,\\kappa}(r) = \\frac{1}{B(2\\kappa, \\nu + 1)}
        \\int_r^1 u (u^2 - r^2)^{\\kappa - 1} (1 - u)^{\\nu} \\, du,
        \\qquad 0 \\le r < 1,

and zero for ``r >= 1``.  The parametric family used for estimation is
``phi_theta(t) = sigma2 * phi_{nu,kappa}(t / beta)`` with ``theta = (sigma2, beta)``
and the smoothness pair ``(nu, kappa)`` held fixed.

Three evaluation routes are available for the base function:

* ``"closed"``: exact Askey-polynomial products, integer ``kappa`` only;
* ``"gauss-jacobi"``: vectorized Gauss-Jacobi rule after mapping ``[r, 1]``
  onto ``[0, 1]``, which absorbs both endpoint singularities into the weight;
* ``"quadrature"``: adaptive QUADPACK integration (QAWS) with the algebraic
  weight ``(u - r)^(kappa - 1) (1 - u)^nu``, one call per point.

``"auto"`` picks the closed form when it exists, otherwise Gauss-Jacobi, and
falls back to adaptive quadrature for ``r < 0.05`` when ``kappa < 2`` (the
Gauss-Jacobi rule loses accuracy there because the integrand has a branch point
at distance ``2r`` from the lower endpoint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .errors import DomainError, QuadratureError

__all__ = [
    "SmoothnessConfig",
    "WendlandParams",
    "ThetaBox",
    "QuadratureConfig",
    "phi_base",
    "eval_phi_base",
    "eval_phi",
    "eval_dphi",
    "spectral_density",
    "spectral_density_at_zero",
    "hyp1f2_series",
    "askey_coefficients",
    "normalized_order",
]

_GJ_NODES = 48
_SMALL_R = 0.05


@dataclass(frozen=True)
class SmoothnessConfig:
    """Fixed smoothness pair ``(nu, kappa)`` in ambient dimension ``d``.

    ``nu >= (d + 1) / 2 + kappa`` is exactly the condition for the function to be
    positive definite on R^d, so violating it is a construction error.
    """

    nu: float
    kappa: float
    d: int = 2

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d!r}")
        if not self.kappa > 0:
            raise DomainError(f"kappa must be > 0, got {self.kappa!r}")
        if self.nu < (self.d + 1) / 2 + self.kappa:
            raise DomainError(
                f"nu={self.nu} < (d+1)/2 + kappa = {(self.d + 1) / 2 + self.kappa}: "
                "phi_{nu,kappa} is not positive definite in dimension d"
            )


@dataclass(frozen=True)
class WendlandParams:
    """Covariance parameters ``theta = (sigma2, beta)`` plus the fixed smoothness."""

    sigma2: float
    beta: float
    smooth: SmoothnessConfig

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.beta > 0):
            raise DomainError(
                f"sigma2 and beta must be positive, got ({self.sigma2}, {self.beta})"
            )

    @property
    def theta(self):
        return np.array([self.sigma2, self.beta])

    def with_theta(self, theta):
        return WendlandParams(float(theta[0]), float(theta[1]), self.smooth)


@dataclass(frozen=True)
class ThetaBox:
    """Compact parameter box ``[sigma2_min, sigma2_max] x [beta_min, beta_max]``."""

    sigma2_min: float
    sigma2_max: float
    beta_min: float
    beta_max: float

    def __post_init__(self):
        if not (0 < self.sigma2_min < self.sigma2_max < math.inf):
            raise DomainError(
                f"need 0 < sigma2_min < sigma2_max < inf, got "
                f"[{self.sigma2_min}, {self.sigma2_max}]"
            )
        if not self.beta_min < self.beta_max:
            raise DomainError(
                f"need beta_min < beta_max, got [{self.beta_min}, {self.beta_max}]"
            )

    @property
    def lower(self):
        return np.array([self.sigma2_min, self.beta_min])

    @property
    def upper(self):
        return np.array([self.sigma2_max, self.beta_max])

    @property
    def bounds(self):
        return [(self.sigma2_min, self.sigma2_max), (self.beta_min, self.beta_max)]

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol=0.0):
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def clip(self, theta):
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def check_grid(self, tau):
        """Violations of the range restriction for a perturbed grid with parameter ``tau``."""
        spacing = 1.0 - 2.0 * tau
        if self.beta_min <= spacing:
            return [
                f"beta_min={self.beta_min} must exceed the minimal spacing "
                f"1 - 2*tau = {spacing:g}"
            ]
        return []

    def grid(self, n_sigma2, n_beta=None):
        """Tensor grid of ``n_sigma2 x n_beta`` points covering the box, shape ``(k, 2)``."""
        n_beta = n_sigma2 if n_beta is None else n_beta
        s = np.linspace(self.sigma2_min, self.sigma2_max, n_sigma2)
        b = np.linspace(self.beta_min, self.beta_max, n_beta)
        ss, bb = np.meshgrid(s, b, indexing="ij")
        return np.column_stack([ss.ravel(), bb.ravel()])


@dataclass(frozen=True)
class QuadratureConfig:
    abs_tol: float = 1e-13
    rel_tol: float = 1e-11
    max_subdivisions: int = 200

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise DomainError("quadrature tolerances must be positive")


DEFAULT_QUAD = QuadratureConfig()


def _as_float_array(x):
    arr = np.asarray(x, dtype=float)
    return arr, arr.ndim == 0


def _ret(out, scalar):
    return float(out) if scalar else out


def _is_integer(kappa):
    return float(kappa).is_integer()


def log_norm_const(nu, kappa):
    """``log B(2 kappa, nu + 1)``, computed through log-gamma."""
    return special.betaln(2.0 * kappa, nu + 1.0)


# -- closed form for integer kappa -------------------------------------------


@lru_cache(maxsize=128)
def askey_coefficients(nu, k):
    """Coefficients ``b`` with ``phi_{nu,k}(r) = (1-r)^(nu+k) * sum_i b[i] (1-r)^i``.

    Built by applying ``f -> int_r^1 u f(u) du`` ``k`` times to ``(1-u)^nu`` in
    the variable ``s = 1 - u``, then normalizing so that the value at ``r = 0``
    is one.
    """
    k = int(k)
    if k < 0:
        raise DomainError("k must be a non-negative integer")
    coef = np.array([1.0])
    power = float(nu)
    for _ in range(k):
        new = np.zeros(coef.size + 1)
        new[:-1] += coef / (power + np.arange(coef.size) + 1.0)
        new[1:] -= coef / (power + np.arange(coef.size) + 2.0)
        coef = new
        power += 1.0
    coef = coef / coef.sum()
    coef.setflags(write=False)
    return coef


def _phi_closed(nu, k, r):
    coef = askey_coefficients(float(nu), int(k))
    s = 1.0 - r
    # Horner in s
    poly = np.zeros_like(s)
    for c in coef[::-1]:
        poly = poly * s + c
    return s ** (nu + k) * poly


# -- quadrature routes -------------------------------------------------------


@lru_cache(maxsize=64)
def _gauss_jacobi_rule(nu, kappa, n):
    # weight (1-y)^nu (1+y)^(kappa-1) on [-1, 1] -> x^(kappa-1) (1-x)^nu on [0, 1]
    y, w = special.roots_jacobi(n, nu, kappa - 1.0)
    x = 0.5 * (y + 1.0)
    w = w / 2.0 ** (nu + kappa)
    return x, w


def _phi_gauss_jacobi(nu, kappa, r, n=_GJ_NODES):
    # u = r + (1 - r) x turns the integral into
    # (1-r)^(nu+kappa) int_0^1 x^(kappa-1) (1-x)^nu (r+(1-r)x)(2r+(1-r)x)^(kappa-1) dx
    x, w = _gauss_jacobi_rule(float(nu), float(kappa), n)
    r = r[:, None]
    g = (r + (1.0 - r) * x) * (2.0 * r + (1.0 - r) * x) ** (kappa - 1.0)
    # row-wise sum rather than BLAS gemv: the result for one r must not depend on
    # how many other points are evaluated alongside it
    integral = np.sum(g * w, axis=1)
    r = r[:, 0]
    return (1.0 - r) ** (nu + kappa) * integral * math.exp(-log_norm_const(nu, kappa))


def _phi_adaptive_scalar(nu, kappa, r, quad):
    def integrand(u):
        return u * (u + r) ** (kappa - 1.0)

    res = integrate.quad(
        integrand,
        r,
        1.0,
        weight="alg",
        wvar=(kappa - 1.0, nu),
        epsabs=quad.abs_tol * math.exp(log_norm_const(nu, kappa)),
        epsrel=quad.rel_tol,
        limit=quad.max_subdivisions,
        full_output=1,
    )
    val, err = res[0], res[1]
    scale = math.exp(-log_norm_const(nu, kappa))
    val, err = val * scale, err * scale
    if len(res) > 3 and err > max(quad.abs_tol, quad.rel_tol * abs(val)) * 10:
        raise QuadratureError(
            f"adaptive quadrature for phi_(nu={nu}, kappa={kappa})({r}) did not "
            f"converge in {quad.max_subdivisions} subdivisions: {res[3]}",
            error_estimate=err,
        )
    return val


def phi_base(nu, kappa, r, method="auto", quad=DEFAULT_QUAD):
    """Evaluate ``phi_{nu,kappa}(r)`` for scalar or array ``r``.

    No positive-definiteness check is made on ``(nu, kappa)``; derivative
    formulas need the base function at lowered ``kappa``.

    Parameters
    ----------
    nu, kappa : float
        Smoothness parameters, ``kappa > 0`` and ``nu > -1``.
    r : float or ndarray
        Non-negative arguments.
    method : {"auto", "closed", "gauss-jacobi", "quadrature"}
        Evaluation route, see the module docstring.
    quad : QuadratureConfig
        Tolerances for the adaptive route.

    Returns
    -------
    float or ndarray
    """
    if not kappa > 0:
        raise DomainError(f"phi_(nu,kappa) is undefined for kappa={kappa} <= 0")
    r, scalar = _as_float_array(r)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise DomainError("r must be non-negative")
    flat = r.ravel()
    out = np.zeros_like(flat)
    inside = flat < 1.0
    out[flat == 0.0] = 1.0
    work = inside & (flat > 0.0)
    if not np.any(work):
        return _ret(out.reshape(r.shape), scalar)
    rw = flat[work]
    if method == "auto":
        method = "closed" if _is_integer(kappa) else "gauss-jacobi"
        if method == "gauss-jacobi" and kappa < 2.0:
            small = rw < _SMALL_R
            vals = np.empty_like(rw)
            if np.any(~small):
                vals[~small] = _phi_gauss_jacobi(nu, kappa, rw[~small])
            for i in np.flatnonzero(small):
                vals[i] = _phi_adaptive_scalar(nu, kappa, rw[i], quad)
            out[work] = vals
            return _ret(out.reshape(r.shape), scalar)
    if method == "closed":
        if not _is_integer(kappa):
            raise DomainError(f"no closed form for non-integer kappa={kappa}")
        out[work] = _phi_closed(nu, int(kappa), rw)
    elif method == "gauss-jacobi":
        out[work] = _phi_gauss_jacobi(nu, kappa, rw)
    elif method == "quadrature":
        out[work] = [_phi_adaptive_scalar(nu, kappa, x, quad) for x in rw]
    else:
        raise ValueError(f"unknown method {method!r}")
    return _ret(out.reshape(r.shape), scalar)


def eval_phi_base(smooth, r, quad=DEFAULT_QUAD, method="auto"):
    """``phi_{nu,kappa}(r)`` for a validated :class:`SmoothnessConfig`."""
    return phi_base(smooth.nu, smooth.kappa, r, method=method, quad=quad)


def eval_phi(params, t, method="auto", quad=DEFAULT_QUAD):
    """``sigma2 * phi_{nu,kappa}(t / beta)``; zero for ``t >= beta``."""
    t, scalar = _as_float_array(t)
    if np.any(t < 0):
        raise DomainError("t must be non-negative")
    val = params.sigma2 * np.asarray(
        phi_base(params.smooth.nu, params.smooth.kappa, t / params.beta, method, quad)
    )
    return _ret(val, scalar)


# -- parameter derivatives ---------------------------------------------------

_ORDER_NAMES = {"sigma2": 0, "beta": 1}


def normalized_order(order):
    """Convert a derivative order to a ``(n_sigma2, n_beta)`` pair.

    Accepts a pair of counts, a mapping such as ``{"beta": 2}``, or a sequence
    of parameter names/indices such as ``("sigma2", "beta")`` or ``(0, 1, 1)``.
    """
    if isinstance(order, dict):
        counts = [0, 0]
        for key, cnt in order.items():
            counts[_ORDER_NAMES[key] if isinstance(key, str) else int(key)] += int(cnt)
        return tuple(counts)
    order = tuple(order)
    if len(order) == 2 and all(isinstance(o, (int, np.integer)) for o in order):
        return int(order[0]), int(order[1])
    counts = [0, 0]
    for item in order:
        counts[_ORDER_NAMES[item] if isinstance(item, str) else int(item)] += 1
    return tuple(counts)


def _beta_partials(nu, kappa, beta, t, n_beta, method, quad):
    """``d^b/dbeta^b phi_{nu,kappa}(t/beta)`` for b = 0..3 (unit variance)."""
    r = t / beta
    if n_beta == 0:
        return np.asarray(phi_base(nu, kappa, r, method, quad))
    c0 = log_norm_const(nu, kappa)

    def h(j):
        ratio = math.exp(log_norm_const(nu, kappa - j) - c0)
        return ratio * np.asarray(phi_base(nu, kappa - j, r, _lowered_method(method, kappa - j), quad))

    k1 = kappa - 1.0
    if n_beta == 1:
        return 2.0 * t**2 * k1 / beta**3 * h(1)
    k2 = kappa - 2.0
    if n_beta == 2:
        return 4.0 * t**4 * k1 * k2 / beta**6 * h(2) - 6.0 * t**2 * k1 / beta**4 * h(1)
    k3 = kappa - 3.0
    return (
        8.0 * t**6 * k1 * k2 * k3 / beta**9 * h(3)
        + 24.0 * t**2 * k1 / beta**5 * h(1)
        - 36.0 * t**4 * k1 * k2 / beta**7 * h(2)
    )


def _lowered_method(method, kappa):
    if method == "closed" and not _is_integer(kappa):
        return "auto"
    return method


def eval_dphi(params, t, order, method="auto", quad=DEFAULT_QUAD):
    """Analytic partial derivative of ``phi_theta(t)`` with respect to ``theta``.

    Parameters
    ----------
    params : WendlandParams
    t : float or ndarray
        Non-negative distances.
    order : pair, mapping or sequence
        Derivative order; see :func:`normalized_order`.  Total order at most 3.

    Notes
    -----
    The ``beta`` derivatives involve ``phi_{nu, kappa - b}`` for ``b`` the number
    of ``beta`` derivatives, so ``kappa > b`` is required.  The formulas are
    continuous in ``t``; at ``t = 0`` and ``t = beta`` they return the one-sided
    limits.  For ``b < kappa <= b + 1`` the formula is still evaluated, although
    it leaves the regime ``kappa > b + 1`` where the kernel is known to be
    ``b`` times continuously differentiable in ``beta`` with bounded derivatives.
    """
    n_s, n_b = normalized_order(order)
    if n_s < 0 or n_b < 0 or n_s + n_b > 3:
        raise DomainError(f"derivative order {order!r} not supported (total order <= 3)")
    kappa = params.smooth.kappa
    if n_b > 0 and kappa <= n_b:
        raise DomainError(
            f"d^{n_b}/dbeta^{n_b} needs phi_(nu, kappa-{n_b}), undefined for kappa={kappa}"
        )
    t, scalar = _as_float_array(t)
    if np.any(t < 0):
        raise DomainError("t must be non-negative")
    if n_s >= 2:
        return _ret(np.zeros_like(t), scalar)
    base = _beta_partials(params.smooth.nu, kappa, params.beta, t, n_b, method, quad)
    val = base if n_s == 1 else params.sigma2 * base
    return _ret(np.asarray(val, dtype=float), scalar)


# -- spectral density --------------------------------------------------------


def hyp1f2_series(a, b, c, z, rel_tol=1e-15, max_terms=10_000):
    """Truncated power series of ``1F2(a; b, c; z)``.

    Summation stops once three consecutive terms are below ``rel_tol`` times
    the partial sum.

    Returns
    -------
    value : float
    max_term : float
        Largest absolute term, a measure of cancellation.
    n_terms : int

    Raises
    ------
    QuadratureError
        If the stopping rule is not met within ``max_terms`` terms.
    """
    term = 1.0
    terms = [1.0]
    max_term = 1.0
    small = 0
    total = 1.0
    for k in range(max_terms):
        term *= (a + k) * z / ((b + k) * (c + k) * (k + 1))
        terms.append(term)
        total += term
        max_term = max(max_term, abs(term))
        if abs(term) < rel_tol * abs(total):
            small += 1
            if small >= 3:
                return math.fsum(terms), max_term, k + 2
        else:
            small = 0
    raise QuadratureError(
        f"1F2 series did not converge in {max_terms} terms at z={z}",
        error_estimate=abs(term),
    )


def _spectral_norm_const(smooth):
    nu, kappa, d = smooth.nu, smooth.kappa, smooth.d
    log_k = (
        (-kappa - d + 1.0) * math.log(2.0)
        - 0.5 * d * math.log(math.pi)
        + special.gammaln(nu + 1.0)
        + special.gammaln(2.0 * kappa + d)
        - special.gammaln(kappa + 0.5 * d)
        - special.gammaln(nu + d + 1.0 + 2.0 * kappa)
    )
    log_l = log_k + special.gammaln(kappa) - (1.0 - kappa) * math.log(2.0) - log_norm_const(nu, kappa)
    return math.exp(log_l)


def spectral_density_at_zero(params):
    """``(2 pi)^d sigma2 L beta^d``, the value of the transform at the origin."""
    d = params.smooth.d
    return (2.0 * math.pi) ** d * params.sigma2 * _spectral_norm_const(params.smooth) * params.beta**d


def _fourier_numeric(params, s_norm, rel_tol=1e-10, max_panels=1 << 14):
    # Hankel form: sigma2 beta^d (2pi)^(d/2) rho^(1-d/2) int_0^1 phi(u) u^(d/2) J_(d/2-1)(rho u) du
    smooth = params.smooth
    d = smooth.d
    rho = s_norm * params.beta
    if rho == 0.0:
        return spectral_density_at_zero(params)
    x, w = np.polynomial.legendre.leggauss(24)
    order = 0.5 * d - 1.0

    def estimate(panels):
        edges = np.linspace(0.0, 1.0, panels + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
        half = 0.5 * (edges[1:] - edges[:-1])[:, None]
        u = (mid + half * x).ravel()
        f = phi_base(smooth.nu, smooth.kappa, u) * u ** (0.5 * d) * special.jv(order, rho * u)
        f = f.reshape(panels, -1) * w
        return float(f.sum(axis=1) @ half[:, 0]), float(np.abs(f).sum(axis=1) @ half[:, 0])

    panels = max(4, int(math.ceil(rho / math.pi)) + 4)
    prev, _ = estimate(panels)
    while True:
        panels *= 2
        cur, mass = estimate(panels)
        if abs(cur - prev) <= rel_tol * abs(cur):
            break
        # refining further cannot beat the rounding floor of the integrand
        if panels >= max_panels or abs(cur - prev) <= 1e3 * np.finfo(float).eps * mass:
            raise QuadratureError(
                f"numeric Fourier transform did not settle at |s|={s_norm}",
                error_estimate=abs(cur - prev),
            )
        prev = cur
    return params.sigma2 * params.beta**d * (2.0 * math.pi) ** (0.5 * d) * rho ** (1.0 - 0.5 * d) * cur


def spectral_density(params, s_norm, rel_tol=1e-12, switch=100.0, max_terms=10_000):
    """Fourier transform of ``s -> phi_theta(||s||)`` on R^d at frequency norm ``s_norm``.

    Convention: ``w_hat(s) = int w(x) exp(-i <s, x>) dx``.  Uses the ``1F2``
    series while ``(s_norm * beta)^2 / 4 <= switch`` and the series sum is not
    dominated by cancellation; otherwise a composite Gauss-Legendre Hankel
    transform refined until successive estimates agree.  Where that transform
    cannot settle (the value is below its cancellation floor) the ``1F2`` is
    continued with mpmath.
    """
    if s_norm < 0:
        raise DomainError("s_norm must be non-negative")
    smooth = params.smooth
    z = -((s_norm * params.beta) ** 2) / 4.0
    if -z <= switch:
        a = (smooth.d + 1) / 2.0 + smooth.kappa
        b = a + smooth.nu / 2.0
        val, max_term, n_terms = hyp1f2_series(a, b, b + 0.5, z, rel_tol=rel_tol, max_terms=max_terms)
        # accumulated rounding relative to the result
        if val > 0 and max_term * n_terms * np.finfo(float).eps <= 1e-9 * val:
            return spectral_density_at_zero(params) * val
    try:
        return _fourier_numeric(params, s_norm)
    except QuadratureError:
        # far in the tail the transform sits below the cancellation floor of the
        # oscillatory integral; mpmath continues 1F2 with adaptive precision
        import mpmath

        a = (smooth.d + 1) / 2.0 + smooth.kappa
        b = a + smooth.nu / 2.0
        val = float(mpmath.hyp1f2(a, b, b + 0.5, z))
        if not val > 0:
            raise
        return spectral_density_at_zero(params) * val
