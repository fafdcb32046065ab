"""
Functional approximations of a radial covariance family.

Four operators are provided, each indexed by a fidelity level ``m``:

``truncation``
    ``phi(t) * 1[t <= C_m]`` with ``C_m`` increasing to infinity.
``bernstein``
    Chlodovsky-Bernstein polynomial of ``phi`` on ``[0, b_m]``, cut to zero beyond
    ``min(b_m, M)`` with ``M`` a fixed cap; ``b_m -> inf`` with ``b_m = o(m)``.
``linear_interp``
    Piecewise-linear interpolant of ``phi`` at knots ``0 = t_0 <= ... <= t_N = M``,
    zero beyond ``M``.
``nugget``
    An inner approximation (or ``phi`` itself) plus ``delta(m) -> 0`` at ``t = 0``.

All operators are linear in the function they act on, so parameter derivatives
of an approximation are the operator applied to the derivative of the base
family.  ``delta(m)`` does not depend on ``theta``, so the nugget shift drops
out of every derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import DomainError
from .wendland import WendlandParams, eval_dphi, eval_phi, normalized_order

__all__ = [
    "KINDS",
    "ApproxFamily",
    "ApproxInstance",
    "default_family",
    "eval_approx",
    "eval_approx_dtheta",
    "sup_error",
    "m_for_n",
]

KINDS = ("truncation", "bernstein", "linear_interp", "nugget")


@dataclass(frozen=True)
class ApproxFamily:
    """An approximation scheme with its fidelity schedules.

    Only the fields relevant to ``kind`` are used.  Use :func:`default_family`
    for the standard schedules.
    """

    kind: str
    c_schedule: Optional[Callable[[int], float]] = None
    b_schedule: Optional[Callable[[int], float]] = None
    knot_schedule: Optional[Callable[[int], np.ndarray]] = None
    delta_schedule: Optional[Callable[[int], float]] = None
    support_cap: Optional[float] = None
    inner: Optional["ApproxFamily"] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown approximation kind {self.kind!r}; expected one of {KINDS}")
        needed = {
            "truncation": ("c_schedule",),
            "bernstein": ("b_schedule", "support_cap"),
            "linear_interp": ("knot_schedule", "support_cap"),
            "nugget": ("delta_schedule",),
        }[self.kind]
        for name in needed:
            if getattr(self, name) is None:
                raise DomainError(f"{self.kind} family requires {name}")
        if self.inner is not None and self.kind != "nugget":
            raise DomainError("only the nugget family wraps an inner family")

    @property
    def name(self):
        if self.label:
            return self.label
        if self.kind == "nugget" and self.inner is not None:
            return f"nugget+{self.inner.name}"
        return self.kind

    def support(self, m):
        """Radius beyond which the approximation of any base in the box is zero.

        ``None`` means the support is that of the base function.
        """
        if self.kind == "truncation":
            return float(self.c_schedule(m))
        if self.kind in ("bernstein", "linear_interp"):
            return float(self.support_cap)
        if self.inner is not None:
            return self.inner.support(m)
        return None

    def check_schedule(self, ms):
        """List violated schedule invariants over the increasing levels ``ms``."""
        ms = sorted(int(m) for m in ms)
        problems = []
        if self.kind == "truncation":
            c = [self.c_schedule(m) for m in ms]
            if any(b <= a for a, b in zip(c, c[1:])):
                problems.append("C_m is not strictly increasing")
        elif self.kind == "bernstein":
            b = [self.b_schedule(m) for m in ms]
            if any(y < x for x, y in zip(b, b[1:])):
                problems.append("b_m is not monotone increasing")
            if any(bm > m for bm, m in zip(b, ms)):
                problems.append("b_m exceeds m")
        elif self.kind == "linear_interp":
            for m in ms:
                knots = np.asarray(self.knot_schedule(m), dtype=float)
                if knots[0] != 0.0 or not math.isclose(knots[-1], self.support_cap):
                    problems.append(f"knots at m={m} do not span [0, M]")
                if np.any(np.diff(knots) < 0):
                    problems.append(f"knots at m={m} are not sorted")
        else:
            d = [self.delta_schedule(m) for m in ms]
            if any(x < 0 for x in d):
                problems.append("delta(m) is negative")
            if any(y > x for x, y in zip(d, d[1:])):
                problems.append("delta(m) is increasing")
            if self.inner is not None:
                problems.extend(self.inner.check_schedule(ms))
        return problems


def default_family(kind, beta_max, inner=None):
    """Family with the default schedules for a parameter box with upper range ``beta_max``.

    ``C_m = sqrt(m) * beta_max / 10``, ``b_m = m^(2/3)``, ``N_m = m`` equispaced
    knots, ``delta(m) = 1/m`` and cap ``M = 1.25 * beta_max``.
    """
    cap = 1.25 * float(beta_max)
    if kind == "truncation":
        return ApproxFamily(kind, c_schedule=lambda m: math.sqrt(m) * beta_max / 10.0)
    if kind == "bernstein":
        return ApproxFamily(kind, b_schedule=lambda m: m ** (2.0 / 3.0), support_cap=cap)
    if kind == "linear_interp":
        return ApproxFamily(
            kind, knot_schedule=lambda m: np.linspace(0.0, cap, int(m) + 1), support_cap=cap
        )
    if kind == "nugget":
        if isinstance(inner, str):
            inner = default_family(inner, beta_max)
        return ApproxFamily(kind, delta_schedule=lambda m: 1.0 / m, inner=inner)
    raise DomainError(f"unknown approximation kind {kind!r}")


def m_for_n(n, rule="identity"):
    """Fidelity level tied to sample size; ``rule`` is ``"identity"`` or a callable."""
    if callable(rule):
        return max(1, int(rule(n)))
    if rule == "identity":
        return max(1, int(n))
    raise DomainError(f"unknown m(n) rule {rule!r}")


def _radial(base, t, order=(0, 0)):
    if isinstance(base, WendlandParams):
        if order == (0, 0):
            return np.asarray(eval_phi(base, t), dtype=float)
        return np.asarray(eval_dphi(base, t, order), dtype=float)
    # generic handle: callable(t, order)
    return np.asarray(base(t, order), dtype=float)


def _bernstein_basis(t, m, b, k):
    """Bernstein basis polynomials ``C(m,k) x^k (1-x)^(m-k)``, ``x = t/b <= 1``, shape (len(t), len(k))."""
    return stats.binom.pmf(k[None, :], m, (t / b)[:, None])


class ApproxInstance:
    """Approximation ``family`` at level ``m`` of the radial function ``base``.

    Knot values and Bernstein coefficients of the base function are computed
    once at construction.  The object is not mutated afterwards.
    """

    def __init__(self, family, m, base):
        if int(m) != m or m < 1:
            raise DomainError(f"m must be a positive integer, got {m!r}")
        self.family = family
        self.m = int(m)
        self.base = base
        kind = family.kind
        if kind == "truncation":
            self.cutoff = float(family.c_schedule(self.m))
        elif kind == "bernstein":
            self.b = float(family.b_schedule(self.m))
            self.cap = float(family.support_cap)
            kmax = self._bernstein_kmax()
            self.k = np.arange(kmax + 1)
            self.nodes = self.b * self.k / self.m
            self.coef = _radial(base, self.nodes)
        elif kind == "linear_interp":
            self.cap = float(family.support_cap)
            self.knots = np.asarray(family.knot_schedule(self.m), dtype=float)
            self.knot_values = _radial(base, self.knots)
        else:
            self.delta = float(family.delta_schedule(self.m))
            self.inner = None if family.inner is None else ApproxInstance(family.inner, self.m, base)

    def _bernstein_kmax(self):
        # coefficients phi(b k / m) vanish once b k / m >= support of the base
        support = getattr(self.base, "beta", None)
        if support is None:
            return self.m
        return int(min(self.m, math.ceil(self.m * support / self.b)))

    def __call__(self, t):
        return eval_approx(self, t)

    def _apply(self, t, order):
        kind = self.family.kind
        if kind == "truncation":
            vals = _radial(self.base, t, order)
            return np.where(t <= self.cutoff, vals, 0.0)
        if kind == "bernstein":
            coef = self.coef if order == (0, 0) else _radial(self.base, self.nodes, order)
            # the polynomial is only used on [0, b_m]: a convex combination of
            # coefficients there, so bounded by sigma^2 for every m
            out = np.zeros_like(t)
            mask = t <= min(self.cap, self.b)
            if np.any(mask):
                out[mask] = _bernstein_basis(t[mask], self.m, self.b, self.k) @ coef
            return out
        if kind == "linear_interp":
            vals = self.knot_values if order == (0, 0) else _radial(self.base, self.knots, order)
            out = np.interp(t, self.knots, vals)
            return np.where(t <= self.cap, out, 0.0)
        inner = (
            _radial(self.base, t, order) if self.inner is None else self.inner._apply(t, order)
        )
        if order == (0, 0):
            inner = inner + np.where(t == 0.0, self.delta, 0.0)
        return inner


def eval_approx(inst, t):
    """Value of the approximation at distances ``t``."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise DomainError("t must be non-negative")
    out = inst._apply(np.atleast_1d(arr).ravel(), (0, 0)).reshape(arr.shape)
    return float(out) if arr.ndim == 0 else out


def eval_approx_dtheta(inst, t, order):
    """Parameter derivative of the approximation: the operator applied to the base derivative."""
    order = normalized_order(order)
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise DomainError("t must be non-negative")
    if order == (0, 0):
        return eval_approx(inst, t)
    out = inst._apply(np.atleast_1d(arr).ravel(), order).reshape(arr.shape)
    return float(out) if arr.ndim == 0 else out


def sup_error(inst, grid_step=0.01, theta_box=None, n_theta=5):
    """Grid estimate of ``sup_theta ||approx - phi||_inf``.

    The maximum is taken over a uniform ``t`` grid on ``[0, max(M, beta_max)]``
    and, when ``theta_box`` is given, over an ``n_theta x n_theta`` grid of the
    box (otherwise only the instance's own base is used).  Being a maximum over
    finitely many points, this is a lower bound on the true sup-norm.
    """
    if not grid_step > 0:
        raise DomainError("grid_step must be positive")
    base = inst.base
    if theta_box is None:
        bases = [base]
        beta_max = base.beta
    else:
        bases = [base.with_theta(th) for th in theta_box.grid(n_theta)]
        beta_max = theta_box.beta_max
    cap = inst.family.support(inst.m) if inst.family.kind != "truncation" else None
    upper = max(cap or 0.0, beta_max)
    t = np.arange(0.0, upper + grid_step / 2, grid_step)
    worst = 0.0
    for b in bases:
        other = ApproxInstance(inst.family, inst.m, b)
        diff = np.abs(eval_approx(other, t) - _radial(b, t))
        worst = max(worst, float(diff.max()))
    return worst
