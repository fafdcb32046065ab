"""
Box-constrained minimization of the truncated-modified log-likelihood.

Each start runs Nelder-Mead while the covariance matrix is not positive
definite (the objective is still well defined there, its gradient is not) and
switches to L-BFGS-B with the analytic score once a positive definite iterate
is found.  If L-BFGS-B steps out of the positive definite region the start
finishes with Nelder-Mead from the best point seen.

Among starts the winner has the lowest objective; exact ties go to the
lexicographically smallest ``theta``.  This makes the estimator a function of
the data even when the minimizer is not unique.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import DomainError, FitError, NotPositiveDefiniteError
from .likelihood import evaluate

__all__ = [
    "FitConfig",
    "FitResult",
    "ConfidenceEllipse",
    "start_points",
    "fit",
    "confidence_region",
]

OPTIMIZERS = ("hybrid", "simplex", "quasi-newton")


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``optimizer`` is ``"hybrid"`` (default), ``"simplex"`` (Nelder-Mead only) or
    ``"quasi-newton"`` (L-BFGS-B only; non-PD starts are then skipped).
    """

    starts: int = 5
    max_iters: int = 200
    grad_tol: float = 1e-7
    step_tol: float = 1e-9
    optimizer: str = "hybrid"

    def __post_init__(self):
        if int(self.starts) != self.starts or self.starts < 1:
            raise DomainError(f"starts must be a positive integer, got {self.starts!r}")
        if self.max_iters < 1:
            raise DomainError("max_iters must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise DomainError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    objective: float
    fisher_at_hat: np.ndarray
    asymp_cov: np.ndarray
    n_used: int
    converged: bool
    pd_fraction: float
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "theta_hat": [float(v) for v in self.theta_hat],
            "objective": float(self.objective),
            "fisher": _nested(self.fisher_at_hat),
            "cov": _nested(self.asymp_cov),
            "n_used": int(self.n_used),
            "converged": bool(self.converged),
            "pd_fraction": float(self.pd_fraction),
            "trace": self.trace,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta_hat=np.array(d["theta_hat"], dtype=float),
            objective=float(d["objective"]),
            fisher_at_hat=np.array(d["fisher"], dtype=float),
            asymp_cov=np.array(d["cov"], dtype=float),
            n_used=int(d["n_used"]),
            converged=bool(d["converged"]),
            pd_fraction=float(d["pd_fraction"]),
            trace=list(d.get("trace", [])),
            diagnostics=dict(d.get("diagnostics", {})),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _nested(a):
    # JSON has no NaN; singular information matrices are written as null
    return [[None if not math.isfinite(v) else float(v) for v in row] for row in np.asarray(a, dtype=float)]


def start_points(box, k):
    """Box center, then the four points at 1/4 and 3/4 of each side, then Halton points."""
    lo, hi = box.lower, box.upper
    fracs = [(0.5, 0.5), (0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    if k > len(fracs):
        extra = stats.qmc.Halton(d=2, scramble=False).random(k - len(fracs) + 1)[1:]
        fracs += [tuple(p) for p in extra]
    return [lo + np.array(f) * (hi - lo) for f in fracs[:k]]


class _LeftPD(Exception):
    pass


class _Run:
    """Bookkeeping for one start: evaluation log and best point so far."""

    def __init__(self, ctx, start_id, log):
        self.ctx = ctx
        self.start_id = start_id
        self.log = log
        self.best = None  # (value, theta, pd)
        self.best_pd = None

    def record(self, theta, value, pd):
        self.log.append(
            {"start": self.start_id, "iter": len(self.log), "theta": [float(t) for t in theta],
             "value": float(value), "pd": bool(pd)}
        )
        cand = (value, tuple(theta))
        if math.isfinite(value):
            if self.best is None or cand < (self.best[0], tuple(self.best[1])):
                self.best = (value, np.array(theta), pd)
            if pd and (self.best_pd is None or cand < (self.best_pd[0], tuple(self.best_pd[1]))):
                self.best_pd = (value, np.array(theta))

    def value(self, theta):
        theta = self.ctx.theta_box.clip(theta)
        try:
            res = evaluate(self.ctx, theta, order=0)
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            # non-finite kernel values or a failed eigensolver: treat as +inf
            self.record(theta, math.inf, False)
            return math.inf
        self.record(theta, res.value, res.was_pd)
        return res.value

    def value_grad(self, theta):
        theta = self.ctx.theta_box.clip(theta)
        try:
            res = evaluate(self.ctx, theta, order=1)
        except NotPositiveDefiniteError:
            self.value(theta)
            raise _LeftPD from None
        self.record(theta, res.value, True)
        return res.value, res.gradient


def _simplex(run, x0, cfg, stop_when_pd):
    box = run.ctx.theta_box
    scale = box.upper - box.lower

    def cb(intermediate_result):
        if stop_when_pd and run.best_pd is not None:
            raise StopIteration

    res = optimize.minimize(
        run.value,
        x0,
        method="Nelder-Mead",
        bounds=box.bounds,
        callback=cb,
        options={
            "maxiter": cfg.max_iters,
            "xatol": cfg.step_tol * float(scale.max()),
            "fatol": 1e-12,
            "initial_simplex": np.array([x0, x0 + [0.1 * scale[0], 0], x0 + [0, 0.1 * scale[1]]])
            if np.all(x0 + 0.1 * scale <= box.upper)
            else None,
        },
    )
    return bool(res.success)


def _quasi_newton(run, x0, cfg):
    res = optimize.minimize(
        run.value_grad,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=run.ctx.theta_box.bounds,
        options={"maxiter": cfg.max_iters, "gtol": cfg.grad_tol, "ftol": 1e-15},
    )
    # ABNORMAL line-search exits at a stationary box corner still count if the projected gradient is small
    return bool(res.success) or _projected_grad_small(run, res.x, cfg)


def _projected_grad_small(run, x, cfg):
    try:
        g = evaluate(run.ctx, x, order=1).gradient
    except NotPositiveDefiniteError:
        return False
    box = run.ctx.theta_box
    pg = np.where((x <= box.lower) & (g > 0) | (x >= box.upper) & (g < 0), 0.0, g)
    return bool(np.max(np.abs(pg)) <= 10 * cfg.grad_tol)


def _run_start(ctx, x0, cfg, start_id, log):
    run = _Run(ctx, start_id, log)
    converged = False
    if cfg.optimizer == "simplex":
        converged = _simplex(run, x0, cfg, stop_when_pd=False)
    else:
        v0 = run.value(x0)
        start = x0 if run.best_pd is not None else None
        if start is None and cfg.optimizer == "hybrid" and math.isfinite(v0):
            _simplex(run, x0, cfg, stop_when_pd=True)
            start = None if run.best_pd is None else run.best_pd[1]
        if start is not None:
            try:
                converged = _quasi_newton(run, start, cfg)
            except _LeftPD:
                if cfg.optimizer == "hybrid":
                    converged = _simplex(run, run.best[1], cfg, stop_when_pd=False)
        elif cfg.optimizer == "hybrid" and run.best is not None:
            converged = _simplex(run, run.best[1], cfg, stop_when_pd=False)
    return run, converged


def fit(ctx, cfg=None):
    """Truncated-ML estimate of ``theta`` over ``ctx.theta_box``.

    Returns
    -------
    FitResult
        ``asymp_cov`` is ``fisher^-1 / n``; it is NaN when the Fisher-type
        matrix at the estimate is singular or undefined (non-PD estimate).

    Raises
    ------
    FitError
        If no start produced a finite objective value.
    """
    cfg = FitConfig() if cfg is None else cfg
    log = []
    best = None
    any_converged = {}
    for sid, x0 in enumerate(start_points(ctx.theta_box, cfg.starts)):
        run, conv = _run_start(ctx, np.asarray(x0, dtype=float), cfg, sid, log)
        if run.best is None:
            continue
        key = (run.best[0], tuple(run.best[1]))
        any_converged[key] = conv
        if best is None or key < best:
            best = key
    if best is None:
        raise FitError("no start produced a finite objective value")
    theta_hat = np.array(best[1])
    n = ctx.n
    diagnostics = {}
    try:
        ev = evaluate(ctx, theta_hat, order=2)
        fisher = ev.fisher
        try:
            cov = np.linalg.inv(fisher) / n
            if np.linalg.eigvalsh(fisher)[0] <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            cov = np.full((2, 2), np.nan)
        if fisher[1, 1] == 0.0:
            diagnostics["flat_beta"] = True
    except NotPositiveDefiniteError:
        fisher = np.full((2, 2), np.nan)
        cov = np.full((2, 2), np.nan)
        diagnostics["estimate_not_pd"] = True
    pd_flags = [e["pd"] for e in log]
    return FitResult(
        theta_hat=theta_hat,
        objective=float(best[0]),
        fisher_at_hat=fisher,
        asymp_cov=cov,
        n_used=n,
        converged=any_converged[best],
        pd_fraction=float(np.mean(pd_flags)) if pd_flags else 0.0,
        trace=log,
        diagnostics=diagnostics,
    )


@dataclass(frozen=True)
class ConfidenceEllipse:
    """``{theta : (theta - center)' precision (theta - center) <= threshold}``."""

    center: np.ndarray
    precision: np.ndarray
    threshold: float
    level: float

    def statistic(self, theta):
        d = np.asarray(theta, dtype=float) - self.center
        return float(d @ self.precision @ d)

    def contains(self, theta):
        return self.statistic(theta) <= self.threshold

    @property
    def semi_axes(self):
        """Semi-axis lengths and their directions (columns)."""
        w, v = np.linalg.eigh(self.precision)
        return np.sqrt(self.threshold / w), v

    @property
    def area(self):
        return math.pi * self.threshold / math.sqrt(float(np.linalg.det(self.precision)))


def confidence_region(res, level=0.95):
    """Asymptotic confidence ellipse ``n (theta - theta_hat)' F (theta - theta_hat) <= chi2_{2, level}``."""
    if not 0.0 <= level < 1.0:
        raise DomainError("level must lie in [0, 1)")
    fisher = np.asarray(res.fisher_at_hat, dtype=float)
    if not np.all(np.isfinite(fisher)) or np.linalg.eigvalsh(fisher)[0] <= 0:
        raise DomainError(
            "the Fisher-type matrix at the estimate is singular; check that theta is "
            "identifiable from these sites (is beta_min above the minimal spacing?)"
        )
    return ConfidenceEllipse(
        np.asarray(res.theta_hat, dtype=float).copy(),
        res.n_used * fisher,
        float(stats.chi2.ppf(level, df=fisher.shape[0])),
        float(level),
    )
