"""
Truncated-modified Gaussian log-likelihood and its derivatives.

For data ``z`` at ``n`` sites and a covariance matrix ``Sigma`` the objective is

    l_n(theta) = (1/n) log det_+(Sigma) + (1/n) z' Sigma^+ z,

which is ``-2/n`` times the Gaussian log-likelihood (up to a constant) whenever
``Sigma`` is positive definite.  Fitting therefore *minimizes* ``l_n``.  On
indefinite matrices ``det_+`` is the product of the positive eigenvalues and
``Sigma^+`` the Moore-Penrose inverse.

Score, Hessian and the Fisher-type matrix are only defined where ``Sigma`` is
positive definite; elsewhere :class:`NotPositiveDefiniteError` is raised.

Traces of ``Sigma^{-1}`` times sparse derivative matrices are computed from the
dense inverse for ``n <= trace_switch`` (2000 by default) and by a Hutchinson
estimator with 64 Rademacher probes from a fixed seed above it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .covariance import factorize, from_pairs
from .errors import DomainError, NotPositiveDefiniteError
from .grid import SiteSet, neighbor_pairs

__all__ = [
    "LikelihoodContext",
    "LikelihoodEval",
    "evaluate",
    "eval_loglik",
    "eval_score",
    "eval_hessian",
    "fisher_matrix",
    "identifiability_gap",
]

# derivative order (n_sigma2, n_beta) for a first derivative in each coordinate
_FIRST = ((1, 0), (0, 1))


def _second(k, l):
    return (_FIRST[k][0] + _FIRST[l][0], _FIRST[k][1] + _FIRST[l][1])


class LikelihoodContext:
    """Sites, data, model and parameter box for repeated likelihood evaluation.

    The neighbor pairs within the model's support radius over the whole box
    are found once here.
    """

    def __init__(self, sites, data, model, theta_box, trace_switch=2000, probes=64, probe_seed=0):
        if not isinstance(sites, SiteSet):
            sites = SiteSet(np.asarray(sites, dtype=float), tau=0.0)
        data = np.asarray(data, dtype=float).ravel()
        if data.size != sites.n:
            raise DomainError(f"data length {data.size} does not match {sites.n} sites")
        self.sites = sites
        self.data = data
        self.model = model
        self.theta_box = theta_box
        self.trace_switch = int(trace_switch)
        self.probes = int(probes)
        self.probe_seed = int(probe_seed)
        self.radius = float(model.support_radius(theta_box))
        self.pairs = neighbor_pairs(sites.coords, self.radius)

    @property
    def n(self):
        return self.sites.n

    def with_data(self, data):
        """Same sites, model and pairs with a different observation vector."""
        new = object.__new__(LikelihoodContext)
        new.__dict__.update(self.__dict__)
        data = np.asarray(data, dtype=float).ravel()
        if data.size != self.n:
            raise DomainError(f"data length {data.size} does not match {self.n} sites")
        new.data = data
        return new

    def matrix(self, theta, order=(0, 0)):
        """Covariance matrix (``order=(0, 0)``) or a derivative matrix at ``theta``."""
        i, j, dist = self.pairs
        zero = np.zeros(1)
        if order == (0, 0):
            vals = self.model.value(dist, theta)
            diag = float(self.model.value(zero, theta)[0])
        else:
            vals = self.model.deriv(dist, theta, order)
            diag = float(self.model.deriv(zero, theta, order)[0])
        return from_pairs(self.n, i, j, vals, diag, self.radius)


@dataclass
class LikelihoodEval:
    """Objective value with optional derivatives.

    ``value == (log_det_plus + quad_form) / n``.
    """

    value: float
    log_det_plus: float
    quad_form: float
    was_pd: bool
    n: int
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    fisher: Optional[np.ndarray] = None


def _check_theta(ctx, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,):
        raise DomainError("theta must have two components (sigma2, beta)")
    if not ctx.theta_box.contains(theta, tol=1e-12):
        raise DomainError(f"theta={theta.tolist()} lies outside the parameter box")
    return theta


def _dense_inverse(sigma):
    c = linalg.cholesky(sigma.toarray(), lower=True)
    inv, info = linalg.lapack.dpotri(c, lower=1)
    if info != 0:  # pragma: no cover - cholesky succeeded so this should not happen
        raise NotPositiveDefiniteError("inverse of the Cholesky factor failed")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def evaluate(ctx, theta, order=0, force_eigen=False):
    """Objective and derivatives up to ``order`` (0, 1 or 2) at ``theta``.

    ``order=2`` also fills ``fisher``.
    """
    theta = _check_theta(ctx, theta)
    n = ctx.n
    z = ctx.data
    sigma = ctx.matrix(theta)
    fac = factorize(sigma, pd_attempt_first=not force_eigen)
    w = fac.solve(z)
    quad = float(z @ w)
    res = LikelihoodEval((fac.log_det_plus + quad) / n, fac.log_det_plus, quad, fac.is_pd, n)
    if order == 0:
        return res
    if not fac.is_pd:
        raise NotPositiveDefiniteError(
            "the covariance matrix is not positive definite at theta="
            f"{theta.tolist()}; derivatives are only defined on the positive definite region"
        )
    dmats = [ctx.matrix(theta, o).tocsr() for o in _FIRST]
    exact = n <= ctx.trace_switch
    if exact:
        sinv = _dense_inverse(sigma)
        tr1 = np.array([float(d.multiply(sinv).sum()) for d in dmats])
    else:
        rng = np.random.default_rng(ctx.probe_seed)
        probes = rng.choice([-1.0, 1.0], size=(n, ctx.probes))
        sv = fac.solve(probes)
        tr1 = np.array([float(np.mean(np.sum(sv * (d @ probes), axis=0))) for d in dmats])
    dw = [d @ w for d in dmats]
    res.gradient = np.array([(tr1[k] - w @ dw[k]) / n for k in range(2)])
    if order == 1:
        return res

    if exact:
        prods = [np.asarray((d @ sinv).T) for d in dmats]  # Sigma^-1 D_k
        tr2 = np.array([[float(np.sum(prods[k] * prods[l].T)) for l in range(2)] for k in range(2)])
    else:
        sdv = [fac.solve(d @ probes) for d in dmats]
        tr2 = np.array(
            [[float(np.mean(np.sum((dmats[k] @ sv) * sdv[l], axis=0))) for l in range(2)] for k in range(2)]
        )
    sdw = [fac.solve(v) for v in dw]
    hess = np.empty((2, 2))
    for k in range(2):
        for l in range(k, 2):
            o2 = _second(k, l)
            if o2[0] >= 2:
                tr_second, quad_second = 0.0, 0.0
            else:
                d2 = ctx.matrix(theta, o2).tocsr()
                if exact:
                    tr_second = float(d2.multiply(sinv).sum())
                else:
                    tr_second = float(np.mean(np.sum(sv * (d2 @ probes), axis=0)))
                quad_second = float(w @ (d2 @ w))
            val = (-tr2[k, l] + tr_second + 2.0 * float(dw[k] @ sdw[l]) - quad_second) / n
            hess[k, l] = hess[l, k] = val
    res.hessian = hess
    fisher = 0.5 * (tr2 + tr2.T) / (2.0 * n)
    res.fisher = fisher
    return res


def eval_loglik(ctx, theta, force_eigen=False):
    """Objective value ``l_n(theta)``; works on indefinite matrices."""
    return evaluate(ctx, theta, order=0, force_eigen=force_eigen)


def eval_score(ctx, theta):
    """Gradient of ``l_n`` at a positive definite ``theta``."""
    return evaluate(ctx, theta, order=1).gradient


def eval_hessian(ctx, theta):
    """Hessian of ``l_n`` at a positive definite ``theta``; exactly symmetric."""
    return evaluate(ctx, theta, order=2).hessian


def fisher_matrix(ctx, theta):
    """``[(1/2n) tr(Sigma^-1 d_k Sigma Sigma^-1 d_l Sigma)]_{k,l}``."""
    return evaluate(ctx, theta, order=2).fisher


def identifiability_gap(sites, model, theta, theta0):
    """``(1/n) sum_{i,j} (c_theta(s_i - s_j) - c_theta0(s_i - s_j))^2`` over all ordered pairs."""
    coords = sites.coords if isinstance(sites, SiteSet) else np.atleast_2d(np.asarray(sites, dtype=float))
    n = coords.shape[0]
    radius = max(model.radius_at(theta), model.radius_at(theta0))
    _, _, dist = neighbor_pairs(coords, radius, strict=False)
    zero = np.zeros(1)
    diag = float(model.value(zero, theta)[0] - model.value(zero, theta0)[0])
    off = model.value(dist, theta) - model.value(dist, theta0)
    return float((n * diag**2 + 2.0 * np.sum(off**2)) / n)
