"""
Reproducible Monte Carlo experiments driven by a YAML configuration file.

Configuration schema (all keys optional unless noted, defaults shown)::

    kind: mc-consistency     # required: simulate | fit | mc-consistency |
                             #   mc-normality | kl-study | approx-error
    seed: 0                  # unsigned 64-bit
    replicates: 1
    grid: {d: 2, tau: 0.3}
    n_sweep: [100, 225, 400]
    model: {nu: 9.0, kappa: 4.5, theta0: [1.0, 1.8]}
    theta_box: {sigma2: [0.5, 2.0], beta: [1.0, 2.6]}
    families: [exact, truncation, bernstein, linear_interp, nugget]
    m_rule: identity         # m = n
    nugget_inner: null       # inner approximation wrapped by the nugget family
    fit: {starts: 5, max_iters: 200, grad_tol: 1.0e-07, step_tol: 1.0e-09,
          optimizer: hybrid}
    level: 0.95
    data: null               # fit: CSV with columns x1..xd and value
    taper:                   # kl-study
      beta0: 3.0
      nu: 5.0
      kappa: 2.5
      matern_smoothness: 1.5
      theta0: [1.0, 1.0]
      theta_box: {sigma2: [0.5, 2.0], range: [0.5, 2.0]}
      family: linear_interp
      m_values: [10, 100, 1000]
      grid_points: 5
      scan_points: 25
    approx_error: {m_values: [10, 50, 200, 1000], grid_step: 0.01, n_theta: 5}
    output: {dir: results}

Replicate ``r`` uses child ``r`` of ``SeedSequence(seed)``, split again into a
stream for the sites and one for the field, so results do not depend on the
number of worker processes.  Each worker limits BLAS to one thread.

Output files (in ``output.dir``), with ``<kind>`` the experiment kind:

``<kind>_estimates.csv``
    one row per replicate, family and ``n``: ``replicate,family,n,m,sigma2_hat,
    beta_hat,objective,converged,pd_fraction,error_norm,covered,z_sigma2,z_beta``
``<kind>_summary.json``
    aggregated statistics (bias, MSE, median error, coverage, KS statistics,
    KL gaps, ...)
``<kind>_long.csv``
    the summary flattened to ``group,n,metric,component,value`` rows
``<kind>_errors.log``
    per-replicate failures, only written when there are any
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing

import numpy as np
import yaml
from scipy import stats
from threadpoolctl import threadpool_limits

from .approximations import KINDS, ApproxInstance, default_family, m_for_n, sup_error
from .errors import DomainError, TruncMLError
from .estimation import FitConfig, confidence_region, fit
from .grid import GridSpec, SiteSet, generate, write_sites_csv
from .likelihood import LikelihoodContext
from .models import WendlandModel, make_model
from .simulation import SimSpec, simulate, write_fields_binary, write_fields_csv
from .tapering import MaternModel, MaternParams, TaperedMaternModel, TaperSpec, kl_divergence
from .wendland import SmoothnessConfig, ThetaBox, WendlandParams

__all__ = [
    "EXPERIMENT_KINDS",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "validate",
    "run_experiment",
    "replicate_seeds",
    "standardized_error",
]

EXPERIMENT_KINDS = ("simulate", "fit", "mc-consistency", "mc-normality", "kl-study", "approx-error")
FAMILY_NAMES = ("exact",) + KINDS

_DEFAULTS = {
    "kind": None,
    "seed": 0,
    "replicates": 1,
    "grid": {"d": 2, "tau": 0.3},
    "n_sweep": [100, 225, 400],
    "model": {"nu": 9.0, "kappa": 4.5, "theta0": [1.0, 1.8]},
    "theta_box": {"sigma2": [0.5, 2.0], "beta": [1.0, 2.6]},
    "families": list(FAMILY_NAMES),
    "m_rule": "identity",
    "nugget_inner": None,
    "fit": {"starts": 5, "max_iters": 200, "grad_tol": 1e-7, "step_tol": 1e-9, "optimizer": "hybrid"},
    "level": 0.95,
    "data": None,
    "taper": {
        "beta0": 3.0,
        "nu": 5.0,
        "kappa": 2.5,
        "matern_smoothness": 1.5,
        "theta0": [1.0, 1.0],
        "theta_box": {"sigma2": [0.5, 2.0], "range": [0.5, 2.0]},
        "family": "linear_interp",
        "m_values": [10, 100, 1000],
        "grid_points": 5,
        "scan_points": 25,
    },
    "approx_error": {"m_values": [10, 50, 200, 1000], "grid_step": 0.01, "n_theta": 5},
    "output": {"dir": "results"},
}


class ConfigError(TruncMLError, ValueError):
    """Invalid configuration; ``problems`` lists ``(line, field, message)``."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(_fmt_problem(p) for p in self.problems))


def _fmt_problem(p):
    line, fld, msg = p
    where = f"line {line}: " if line else ""
    return f"{where}{fld}: {msg}"


@dataclass
class ExperimentConfig:
    """Parsed and type-checked configuration; ``raw`` is the canonical nested dict."""

    raw: dict
    source: str = field(default="<dict>", compare=False)

    def __getattr__(self, name):
        raw = self.__dict__.get("raw", {})
        if name in raw:
            return raw[name]
        raise AttributeError(name)

    @property
    def smooth(self):
        m = self.raw["model"]
        return SmoothnessConfig(m["nu"], m["kappa"], self.raw["grid"]["d"])

    @property
    def box(self):
        b = self.raw["theta_box"]
        return ThetaBox(b["sigma2"][0], b["sigma2"][1], b["beta"][0], b["beta"][1])

    @property
    def theta0(self):
        return np.array(self.raw["model"]["theta0"], dtype=float)

    @property
    def fit_config(self):
        return FitConfig(**self.raw["fit"])

    def with_overrides(self, seed=None, out_dir=None):
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if out_dir is not None:
            raw["output"]["dir"] = str(out_dir)
        return parse_config(raw, source=self.source)


# -- parsing -------------------------------------------------------------------


def _line_map(text):
    """Map dotted key paths to 1-based line numbers of a YAML document."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for idx, v in enumerate(node.value):
                p = f"{path}[{idx}]"
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, "")
    return lines


def _merge(defaults, given, path, problems):
    if not isinstance(given, dict):
        problems.append((path, f"expected a mapping, got {type(given).__name__}"))
        return copy.deepcopy(defaults)
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        p = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            problems.append((p, "unknown key"))
            continue
        if isinstance(defaults[key], dict) and key not in ("theta_box",):
            out[key] = _merge(defaults[key], val if val is not None else {}, p, problems)
        else:
            out[key] = val
    return out


def _num(val, p, problems, lo=None, hi=None, integer=False, strict_lo=False):
    ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    if ok and integer and int(val) != val:
        ok = False
    if not ok:
        problems.append((p, f"expected {'an integer' if integer else 'a number'}, got {val!r}"))
        return None
    val = int(val) if integer else float(val)
    if lo is not None and (val <= lo if strict_lo else val < lo):
        problems.append((p, f"must be {'>' if strict_lo else '>='} {lo}, got {val}"))
    if hi is not None and val >= hi:
        problems.append((p, f"must be < {hi}, got {val}"))
    return val


def _pair(val, p, problems):
    if not (isinstance(val, (list, tuple)) and len(val) == 2):
        problems.append((p, f"expected a two-element list, got {val!r}"))
        return None
    a = _num(val[0], f"{p}[0]", problems)
    b = _num(val[1], f"{p}[1]", problems)
    if a is None or b is None:
        return None
    return [a, b]


def parse_config(data, source="<dict>", text=None):
    """Validate a configuration mapping and return an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        With one ``(line, field, message)`` entry per problem; ``line`` is
        known when ``text`` (the YAML source) is given.
    """
    problems = []
    if data is None:
        data = {}
    raw = _merge(_DEFAULTS, data, "", problems)
    if not isinstance(data, dict) or "kind" not in data:
        problems.append(("kind", "missing required key"))
    elif raw["kind"] not in EXPERIMENT_KINDS:
        problems.append(("kind", f"must be one of {list(EXPERIMENT_KINDS)}, got {raw['kind']!r}"))

    raw["seed"] = _num(raw["seed"], "seed", problems, lo=0, hi=2**64, integer=True)
    raw["replicates"] = _num(raw["replicates"], "replicates", problems, lo=1, integer=True)
    g = raw["grid"]
    g["d"] = _num(g["d"], "grid.d", problems, lo=1, integer=True)
    g["tau"] = _num(g["tau"], "grid.tau", problems, lo=0.0, hi=0.5)
    if not isinstance(raw["n_sweep"], list) or not raw["n_sweep"]:
        problems.append(("n_sweep", "expected a non-empty list of sample sizes"))
    else:
        raw["n_sweep"] = [_num(v, f"n_sweep[{i}]", problems, lo=1, integer=True) for i, v in enumerate(raw["n_sweep"])]
    mdl = raw["model"]
    mdl["nu"] = _num(mdl["nu"], "model.nu", problems, lo=0.0, strict_lo=True)
    mdl["kappa"] = _num(mdl["kappa"], "model.kappa", problems, lo=0.0, strict_lo=True)
    mdl["theta0"] = _pair(mdl["theta0"], "model.theta0", problems)
    if None not in (mdl["nu"], mdl["kappa"], g["d"]):
        try:
            SmoothnessConfig(mdl["nu"], mdl["kappa"], g["d"])
        except DomainError as exc:
            problems.append(("model.nu", str(exc)))

    box = raw["theta_box"]
    if not isinstance(box, dict) or set(box) != {"sigma2", "beta"}:
        problems.append(("theta_box", "expected keys sigma2 and beta"))
    else:
        box["sigma2"] = _pair(box["sigma2"], "theta_box.sigma2", problems)
        box["beta"] = _pair(box["beta"], "theta_box.beta", problems)
        if box["sigma2"] and box["beta"]:
            try:
                ThetaBox(box["sigma2"][0], box["sigma2"][1], box["beta"][0], box["beta"][1])
            except DomainError as exc:
                problems.append(("theta_box", str(exc)))

    if not isinstance(raw["families"], list) or not raw["families"]:
        problems.append(("families", "expected a non-empty list"))
    else:
        for i, f in enumerate(raw["families"]):
            if f not in FAMILY_NAMES:
                problems.append((f"families[{i}]", f"must be one of {list(FAMILY_NAMES)}, got {f!r}"))
    if raw["m_rule"] != "identity":
        problems.append(("m_rule", f"only 'identity' is supported, got {raw['m_rule']!r}"))
    if raw["nugget_inner"] not in (None,) + tuple(k for k in KINDS if k != "nugget"):
        problems.append(("nugget_inner", f"must be null or an approximation kind, got {raw['nugget_inner']!r}"))

    fc = raw["fit"]
    fc["starts"] = _num(fc["starts"], "fit.starts", problems, lo=1, integer=True)
    fc["max_iters"] = _num(fc["max_iters"], "fit.max_iters", problems, lo=1, integer=True)
    fc["grad_tol"] = _num(fc["grad_tol"], "fit.grad_tol", problems, lo=0.0, strict_lo=True)
    fc["step_tol"] = _num(fc["step_tol"], "fit.step_tol", problems, lo=0.0, strict_lo=True)
    if fc["optimizer"] not in ("hybrid", "simplex", "quasi-newton"):
        problems.append(("fit.optimizer", f"must be hybrid, simplex or quasi-newton, got {fc['optimizer']!r}"))
    raw["level"] = _num(raw["level"], "level", problems, lo=0.0, hi=1.0)
    if raw["data"] is not None and not isinstance(raw["data"], str):
        problems.append(("data", "expected a file path"))
    if raw["kind"] == "fit" and raw["data"] is None:
        problems.append(("data", "the fit experiment needs a data file"))

    tp = raw["taper"]
    tp["beta0"] = _num(tp["beta0"], "taper.beta0", problems, lo=0.0, strict_lo=True)
    tp["nu"] = _num(tp["nu"], "taper.nu", problems, lo=0.0, strict_lo=True)
    tp["kappa"] = _num(tp["kappa"], "taper.kappa", problems, lo=0.0, strict_lo=True)
    if tp["matern_smoothness"] not in (0.5, 1.5, 2.5):
        problems.append(("taper.matern_smoothness", "must be 0.5, 1.5 or 2.5"))
    tp["theta0"] = _pair(tp["theta0"], "taper.theta0", problems)
    tb = tp["theta_box"]
    if not isinstance(tb, dict) or set(tb) != {"sigma2", "range"}:
        problems.append(("taper.theta_box", "expected keys sigma2 and range"))
    else:
        tb["sigma2"] = _pair(tb["sigma2"], "taper.theta_box.sigma2", problems)
        tb["range"] = _pair(tb["range"], "taper.theta_box.range", problems)
    if tp["family"] not in (None,) + KINDS:
        problems.append(("taper.family", f"must be null or one of {list(KINDS)}"))
    for key in ("m_values",):
        if not isinstance(tp[key], list) or not tp[key]:
            problems.append((f"taper.{key}", "expected a non-empty list"))
        else:
            tp[key] = [_num(v, f"taper.{key}[{i}]", problems, lo=1, integer=True) for i, v in enumerate(tp[key])]
    tp["grid_points"] = _num(tp["grid_points"], "taper.grid_points", problems, lo=1, integer=True)
    tp["scan_points"] = _num(tp["scan_points"], "taper.scan_points", problems, lo=2, integer=True)

    ae = raw["approx_error"]
    if not isinstance(ae["m_values"], list) or not ae["m_values"]:
        problems.append(("approx_error.m_values", "expected a non-empty list"))
    else:
        ae["m_values"] = [
            _num(v, f"approx_error.m_values[{i}]", problems, lo=1, integer=True) for i, v in enumerate(ae["m_values"])
        ]
    ae["grid_step"] = _num(ae["grid_step"], "approx_error.grid_step", problems, lo=0.0, strict_lo=True)
    ae["n_theta"] = _num(ae["n_theta"], "approx_error.n_theta", problems, lo=1, integer=True)
    if not isinstance(raw["output"].get("dir"), str):
        problems.append(("output.dir", "expected a directory path"))

    if problems:
        lines = _line_map(text) if text is not None else {}
        located = []
        for p, msg in problems:
            line = lines.get(p)
            probe = p
            while line is None and ("." in probe or "[" in probe):
                probe = probe[: max(probe.rfind("."), probe.rfind("["))]
                line = lines.get(probe)
            located.append((line, p, msg))
        raise ConfigError(located)
    return ExperimentConfig(raw, source)


def load_config(path):
    """Read and validate a YAML configuration file."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError([(line, "<document>", f"YAML syntax error: {getattr(exc, 'problem', exc)}")]) from None
    return parse_config(data, source=str(path), text=text)


def dump_config(cfg):
    """Canonical YAML text; ``parse_config(yaml.safe_load(dump_config(c))) == c``."""
    return yaml.safe_dump(cfg.raw, sort_keys=True, default_flow_style=None)


# -- validation ------------------------------------------------------------------


def validate(cfg):
    """Scientific sanity checks beyond the schema.

    Returns ``{"violations": [...], "warnings": [...]}``; violations make the
    theory inapplicable, warnings flag a mismatch between the goal of the
    experiment and the smoothness of the model.
    """
    violations, warnings = [], []
    box = cfg.box
    violations.extend(box.check_grid(cfg.raw["grid"]["tau"]))
    if not box.contains(cfg.theta0):
        violations.append(f"theta0={cfg.raw['model']['theta0']} lies outside the parameter box")
    kappa = cfg.raw["model"]["kappa"]
    kind = cfg.raw["kind"]
    if kind in ("mc-consistency", "mc-normality", "fit") and kappa <= 2:
        warnings.append(f"kappa={kappa}: consistency of the approximate estimators needs kappa > 2")
    if kind == "mc-normality" and kappa <= 4:
        warnings.append(f"kappa={kappa}: asymptotic normality needs kappa > 4")
    ms = sorted(m_for_n(n, cfg.raw["m_rule"]) for n in cfg.raw["n_sweep"])
    for fam in cfg.raw["families"]:
        if fam == "exact":
            continue
        family = default_family(fam, box.beta_max, inner=cfg.raw["nugget_inner"] if fam == "nugget" else None)
        violations.extend(f"{fam}: {p}" for p in family.check_schedule(ms))
    if kind == "kl-study":
        tp = cfg.raw["taper"]
        if tp["kappa"] <= 2:
            violations.append(f"taper.kappa={tp['kappa']}: the taper needs kappa > 2")
        if tp["nu"] < (cfg.raw["grid"]["d"] + 1) / 2 + tp["kappa"]:
            violations.append("taper: nu < (d+1)/2 + kappa, the taper is not positive definite")
        tb = tp["theta_box"]
        lo = np.array([tb["sigma2"][0], tb["range"][0]])
        hi = np.array([tb["sigma2"][1], tb["range"][1]])
        if np.any(lo <= 0) or np.any(lo >= hi):
            violations.append("taper.theta_box must satisfy 0 < lower < upper")
    return {"violations": violations, "warnings": warnings}


# -- helpers -----------------------------------------------------------------------


def replicate_seeds(seed, replicates):
    """``(site_seed, field_seed)`` for each replicate."""
    out = []
    for child in np.random.SeedSequence(int(seed)).spawn(int(replicates)):
        a, b = child.spawn(2)
        out.append((int(a.generate_state(1, np.uint64)[0]), int(b.generate_state(1, np.uint64)[0])))
    return out


def standardized_error(res, theta0):
    """``sqrt(n) F^{1/2} (theta_hat - theta0)`` with ``F^{1/2}`` the symmetric square root."""
    fisher = np.asarray(res.fisher_at_hat, dtype=float)
    if not np.all(np.isfinite(fisher)):
        return np.full(2, np.nan)
    w, v = np.linalg.eigh(0.5 * (fisher + fisher.T))
    if w[0] <= 0:
        return np.full(2, np.nan)
    half = (v * np.sqrt(w)) @ v.T
    return math.sqrt(res.n_used) * half @ (np.asarray(res.theta_hat) - np.asarray(theta0))


def _model_for(cfg, family, n):
    if family == "exact":
        return WendlandModel(cfg.smooth)
    inner = cfg.raw["nugget_inner"] if family == "nugget" else None
    return make_model(family, cfg.smooth, cfg.box.beta_max, m_for_n(n, cfg.raw["m_rule"]), inner=inner)


def _fit_row(cfg, ctx, family, n, rep):
    res = fit(ctx, cfg.fit_config)
    theta0 = cfg.theta0
    z = standardized_error(res, theta0)
    try:
        covered = bool(confidence_region(res, cfg.raw["level"]).contains(theta0))
    except DomainError:
        covered = None
    return {
        "replicate": rep,
        "family": family,
        "n": n,
        "m": 0 if family == "exact" else m_for_n(n, cfg.raw["m_rule"]),
        "sigma2_hat": float(res.theta_hat[0]),
        "beta_hat": float(res.theta_hat[1]),
        "objective": float(res.objective),
        "converged": bool(res.converged),
        "pd_fraction": float(res.pd_fraction),
        "error_norm": float(np.linalg.norm(res.theta_hat - theta0)),
        "covered": covered,
        "z_sigma2": float(z[0]),
        "z_beta": float(z[1]),
    }


def _mc_replicate(raw, rep):
    """All fits of one replicate; returns ``(rows, error_message_or_None)``."""
    cfg = parse_config(raw)
    with threadpool_limits(limits=1):
        try:
            site_seed, field_seed = replicate_seeds(cfg.raw["seed"], cfg.raw["replicates"])[rep]
            n_max = max(cfg.raw["n_sweep"])
            sites = generate(GridSpec(cfg.raw["grid"]["d"], cfg.raw["grid"]["tau"], n_max, site_seed))
            exact = WendlandModel(cfg.smooth)
            field_ = simulate(SimSpec(sites, exact, tuple(cfg.theta0), 1, field_seed))[0]
            rows = []
            for n in cfg.raw["n_sweep"]:
                sub = sites.head(n)
                for family in cfg.raw["families"]:
                    ctx = LikelihoodContext(sub, field_[:n], _model_for(cfg, family, n), cfg.box)
                    rows.append(_fit_row(cfg, ctx, family, n, rep))
            return rows, None
        except (TruncMLError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            return [], f"replicate {rep}: {type(exc).__name__}: {exc}"


def _parallel_map(fn, args, threads):
    if threads <= 1:
        return [fn(*a) for a in args]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=int(threads), mp_context=ctx) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _strictly_decreasing(values):
    vals = [v for v in values if v is not None]
    return len(vals) == len(values) and all(b < a for a, b in zip(vals, vals[1:]))


def summarize_fits(rows, theta0, families, n_sweep):
    """Per ``(family, n)`` statistics of a set of fit rows."""
    out = {}
    theta0 = np.asarray(theta0, dtype=float)
    for fam in families:
        per_n = {}
        for n in n_sweep:
            sel = [r for r in rows if r["family"] == fam and r["n"] == n]
            if not sel:
                continue
            est = np.array([[r["sigma2_hat"], r["beta_hat"]] for r in sel])
            err = est - theta0
            z = np.array([[r["z_sigma2"], r["z_beta"]] for r in sel])
            cov = [r["covered"] for r in sel if r["covered"] is not None]
            entry = {
                "replicates": len(sel),
                "bias": err.mean(axis=0).tolist(),
                "mse": (err**2).mean(axis=0).tolist(),
                "median_error_norm": float(np.median([r["error_norm"] for r in sel])),
                "mean_error_norm": float(np.mean([r["error_norm"] for r in sel])),
                "coverage": float(np.mean(cov)) if cov else None,
                "converged_fraction": float(np.mean([r["converged"] for r in sel])),
            }
            ks_stat, ks_p = [], []
            for k in range(2):
                zk = z[:, k][np.isfinite(z[:, k])]
                if zk.size >= 2:
                    res = stats.kstest(zk, "norm")
                    ks_stat.append(float(res.statistic))
                    ks_p.append(float(res.pvalue))
                else:
                    ks_stat.append(None)
                    ks_p.append(None)
            entry["ks_statistic"] = ks_stat
            entry["ks_pvalue"] = ks_p
            per_n[str(n)] = entry
        meds = [per_n[str(n)]["median_error_norm"] if str(n) in per_n else None for n in n_sweep]
        out[fam] = {"by_n": per_n, "median_error_strictly_decreasing": _strictly_decreasing(meds)}
    return out


# -- experiment kinds ------------------------------------------------------------------


def _run_mc(cfg, threads):
    raw = cfg.raw
    results = _parallel_map(_mc_replicate, [(raw, r) for r in range(raw["replicates"])], threads)
    rows = [row for rs, _ in results for row in rs]
    errors = [e for _, e in results if e]
    summary = {
        "kind": raw["kind"],
        "seed": raw["seed"],
        "theta0": raw["model"]["theta0"],
        "level": raw["level"],
        "failed_replicates": len(errors),
        "families": summarize_fits(rows, cfg.theta0, raw["families"], raw["n_sweep"]),
    }
    return rows, summary, errors


def _run_simulate(cfg, threads, out_dir):
    raw = cfg.raw
    n = max(raw["n_sweep"])
    site_seed, field_seed = replicate_seeds(raw["seed"], 1)[0]
    sites = generate(GridSpec(raw["grid"]["d"], raw["grid"]["tau"], n, site_seed))
    with threadpool_limits(limits=1):
        fields = simulate(SimSpec(sites, WendlandModel(cfg.smooth), tuple(cfg.theta0), raw["replicates"], field_seed))
    if out_dir is not None:
        write_sites_csv(sites, os.path.join(out_dir, "simulate_sites.csv"))
        write_fields_csv(fields, os.path.join(out_dir, "simulate_fields.csv"))
        write_fields_binary(sites, fields, os.path.join(out_dir, "simulate_fields.bin"))
    summary = {
        "kind": "simulate",
        "seed": raw["seed"],
        "n": n,
        "replicates": raw["replicates"],
        "theta0": raw["model"]["theta0"],
        "mean_squared_norm": float(np.mean(np.sum(fields**2, axis=1) / n)),
    }
    return [], summary, []


def read_data_csv(path):
    """Sites and observations from a CSV with columns ``x1..xd`` and ``value``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        xs = sorted((c for c in reader.fieldnames if c.startswith("x")), key=lambda c: int(c[1:]))
        if "value" not in reader.fieldnames or not xs:
            raise ValueError(f"{path}: expected columns x1..xd and value")
        rows = [([float(r[c]) for c in xs], float(r["value"])) for r in reader]
    coords = np.array([r[0] for r in rows])
    return coords, np.array([r[1] for r in rows])


def _run_fit(cfg, threads):
    raw = cfg.raw
    coords, z = read_data_csv(raw["data"])
    sites = SiteSet(coords, raw["grid"]["tau"])
    n = sites.n
    rows, fits = [], {}
    with threadpool_limits(limits=1):
        for family in raw["families"]:
            ctx = LikelihoodContext(sites, z, _model_for(cfg, family, n), cfg.box)
            res = fit(ctx, cfg.fit_config)
            d = res.to_dict()
            d.pop("trace")
            fits[family] = d
            z_std = standardized_error(res, cfg.theta0)
            rows.append(
                {
                    "replicate": 0,
                    "family": family,
                    "n": n,
                    "m": 0 if family == "exact" else m_for_n(n, raw["m_rule"]),
                    "sigma2_hat": float(res.theta_hat[0]),
                    "beta_hat": float(res.theta_hat[1]),
                    "objective": float(res.objective),
                    "converged": bool(res.converged),
                    "pd_fraction": float(res.pd_fraction),
                    "error_norm": float(np.linalg.norm(res.theta_hat - cfg.theta0)),
                    "covered": None,
                    "z_sigma2": float(z_std[0]),
                    "z_beta": float(z_std[1]),
                }
            )
    return rows, {"kind": "fit", "n": n, "fits": fits}, []


def _taper_parts(cfg):
    tp = cfg.raw["taper"]
    smooth = SmoothnessConfig(tp["nu"], tp["kappa"], cfg.raw["grid"]["d"])
    theta0 = MaternParams(tp["theta0"][0], tp["theta0"][1], tp["matern_smoothness"])
    tb = tp["theta_box"]
    box = ThetaBox(tb["sigma2"][0], tb["sigma2"][1], tb["range"][0], tb["range"][1])
    return tp, smooth, theta0, box


def kl_gap_sweep(sites, theta0, taper_exact, family, m_values, thetas):
    """``sup_theta |d - d_m|`` for each ``m`` over the given ``theta`` points."""
    d = np.array([kl_divergence(sites, theta0, th, taper_exact) for th in thetas])
    gaps = []
    for m in m_values:
        approx = TaperSpec(taper_exact.beta0, taper_exact.smooth, family, m)
        dm = np.array([kl_divergence(sites, theta0, th, approx) for th in thetas])
        gaps.append(float(np.max(np.abs(d - dm))))
    return d, gaps


def _kl_replicate(raw, rep):
    cfg = parse_config(raw)
    tp, smooth, theta0, box = _taper_parts(cfg)
    with threadpool_limits(limits=1):
        try:
            site_seed, field_seed = replicate_seeds(raw["seed"], raw["replicates"])[rep]
            n = max(raw["n_sweep"])
            sites = generate(GridSpec(raw["grid"]["d"], raw["grid"]["tau"], n, site_seed))
            truth = MaternModel(tp["matern_smoothness"])
            field_ = simulate(SimSpec(sites, truth, tuple(theta0.theta), 1, field_seed, support_radius=math.inf))[0]
            m = m_for_n(n, raw["m_rule"])
            family = None if tp["family"] is None else default_family(tp["family"], tp["beta0"])
            taper = TaperSpec(tp["beta0"], smooth, family, None if family is None else m)
            ctx = LikelihoodContext(sites, field_, TaperedMaternModel(tp["matern_smoothness"], taper), box)
            res = fit(ctx, cfg.fit_config)
            exact = TaperSpec(tp["beta0"], smooth)
            d_hat = kl_divergence(sites, theta0, res.theta_hat, exact)
            scan = box.grid(tp["scan_points"])
            d_scan = np.array([kl_divergence(sites, theta0, th, exact) for th in scan])
            return {
                "replicate": rep,
                "n": n,
                "m": m,
                "sigma2_hat": float(res.theta_hat[0]),
                "range_hat": float(res.theta_hat[1]),
                "converged": bool(res.converged),
                "d_at_estimate": d_hat,
                "d_grid_min": float(d_scan.min()),
                "d_grid_max": float(d_scan.max()),
                "d_grid_argmin": [float(v) for v in scan[int(np.argmin(d_scan))]],
            }, None
        except (TruncMLError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            return None, f"replicate {rep}: {type(exc).__name__}: {exc}"


def _run_kl(cfg, threads):
    raw = cfg.raw
    tp, smooth, theta0, box = _taper_parts(cfg)
    exact = TaperSpec(tp["beta0"], smooth)
    family = default_family(tp["family"] or "linear_interp", tp["beta0"])
    thetas = box.grid(tp["grid_points"])
    gaps = {}
    seeds = replicate_seeds(raw["seed"], 1)[0]
    with threadpool_limits(limits=1):
        for n in raw["n_sweep"]:
            sites = generate(GridSpec(raw["grid"]["d"], raw["grid"]["tau"], n, seeds[0]))
            _, g = kl_gap_sweep(sites, theta0, exact, family, tp["m_values"], thetas)
            gaps[str(n)] = {"m_values": tp["m_values"], "sup_gap": g, "strictly_decreasing": _strictly_decreasing(g)}
    results = _parallel_map(_kl_replicate, [(raw, r) for r in range(raw["replicates"])], threads)
    rows = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e]
    within = [
        r["d_at_estimate"] <= r["d_grid_min"] + 0.1 * (r["d_grid_max"] - r["d_grid_min"]) for r in rows
    ]
    summary = {
        "kind": "kl-study",
        "seed": raw["seed"],
        "taper_family": family.name,
        "kl_gaps": gaps,
        "fit": {
            "replicates": len(rows),
            "within_10pct_of_grid_range": float(np.mean(within)) if within else None,
            "mean_d_at_estimate": float(np.mean([r["d_at_estimate"] for r in rows])) if rows else None,
        },
        "failed_replicates": len(errors),
    }
    return rows, summary, errors


def _run_approx_error(cfg, threads):
    raw = cfg.raw
    ae = raw["approx_error"]
    box = cfg.box
    base = WendlandParams(box.sigma2_max, box.beta_max, cfg.smooth)
    out = {}
    rows = []
    for fam in raw["families"]:
        if fam == "exact":
            continue
        family = default_family(fam, box.beta_max, inner=raw["nugget_inner"] if fam == "nugget" else None)
        errs = []
        for m in ae["m_values"]:
            e = sup_error(ApproxInstance(family, m, base), ae["grid_step"], box, ae["n_theta"])
            errs.append(e)
            rows.append({"family": fam, "m": m, "sup_error": e})
        out[fam] = {"m_values": ae["m_values"], "sup_error": errs}
    return rows, {"kind": "approx-error", "families": out}, []


# -- output ------------------------------------------------------------------------------


def _flatten(summary):
    """Long-format rows ``(group, n, metric, component, value)``."""
    out = []
    fams = summary.get("families")
    if summary.get("kind") in ("mc-consistency", "mc-normality", "fit") and isinstance(fams, dict):
        for fam, body in fams.items():
            for n, entry in body.get("by_n", {}).items():
                for metric, val in entry.items():
                    if isinstance(val, list):
                        for c, v in enumerate(val):
                            out.append((fam, n, metric, c, v))
                    else:
                        out.append((fam, n, metric, "", val))
    elif summary.get("kind") == "approx-error":
        for fam, body in fams.items():
            for m, e in zip(body["m_values"], body["sup_error"]):
                out.append((fam, m, "sup_error", "", e))
    elif summary.get("kind") == "kl-study":
        for n, body in summary["kl_gaps"].items():
            for m, g in zip(body["m_values"], body["sup_gap"]):
                out.append((summary["taper_family"], n, "sup_kl_gap", m, g))
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_outputs(kind, rows, summary, errors, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    if rows:
        p = os.path.join(out_dir, f"{kind}_estimates.csv")
        keys = list(rows[0].keys())
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in rows:
                w.writerow([_fmt(r[k]) if not isinstance(r[k], list) else " ".join(map(repr, r[k])) for k in keys])
        paths["estimates"] = p
    p = os.path.join(out_dir, f"{kind}_summary.json")
    with open(p, "w") as fh:
        json.dump(_clean(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary"] = p
    p = os.path.join(out_dir, f"{kind}_long.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "n", "metric", "component", "value"])
        for row in _flatten(_clean(summary)):
            w.writerow([_fmt(v) for v in row])
    paths["long"] = p
    if errors:
        p = os.path.join(out_dir, f"{kind}_errors.log")
        with open(p, "w") as fh:
            fh.write("\n".join(errors) + "\n")
        paths["errors"] = p
    return paths


def run_experiment(cfg, threads=1, out_dir=None, kind=None):
    """Run an experiment; returns ``(rows, summary, errors)``.

    Outputs are written when ``out_dir`` is given (``None`` keeps everything
    in memory).  ``kind`` overrides ``cfg.kind``.
    """
    kind = kind or cfg.raw["kind"]
    if kind != cfg.raw["kind"]:
        raw = copy.deepcopy(cfg.raw)
        raw["kind"] = kind
        cfg = parse_config(raw, cfg.source)
    if kind in ("mc-consistency", "mc-normality"):
        rows, summary, errors = _run_mc(cfg, threads)
    elif kind == "simulate":
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        rows, summary, errors = _run_simulate(cfg, threads, out_dir)
    elif kind == "fit":
        rows, summary, errors = _run_fit(cfg, threads)
    elif kind == "kl-study":
        rows, summary, errors = _run_kl(cfg, threads)
    else:
        rows, summary, errors = _run_approx_error(cfg, threads)
    if out_dir is not None:
        write_outputs(kind, rows, summary, errors, out_dir)
    return rows, summary, errors
