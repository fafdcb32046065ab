"""
Reproducible simulation of zero-mean Gaussian fields at a set of sites.

``z = L u`` with ``L`` the Cholesky factor of the covariance matrix and ``u``
standard normal.  Replicate ``r`` draws ``u`` from its own stream, child ``r``
of ``SeedSequence(seed)``, so replicate ``r`` does not depend on how many
replicates are requested or on the order they are generated in.

Because the factor is taken after a bandwidth-reducing permutation,
``z[perm] = L u``; a prefix of a simulated field is a valid draw at the
corresponding prefix of sites.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .covariance import assemble, factorize
from .errors import DomainError, NotPositiveDefiniteError
from .grid import SiteSet

__all__ = [
    "SimSpec",
    "simulate",
    "replicate_rngs",
    "write_fields_csv",
    "read_fields_csv",
    "write_fields_binary",
    "read_fields_binary",
]

FIELDS_MAGIC = b"TMLF"
FORMAT_VERSION = 1
_FIELDS_HEADER = struct.Struct("<4sIqqqdQ")


@dataclass(frozen=True, eq=False)
class SimSpec:
    """What to simulate.

    ``model`` is any object with ``value(t, theta)`` and ``radius_at(theta)``
    (see :mod:`truncml.models`), or a plain callable ``kernel(t)`` together
    with ``support_radius``.
    """

    sites: SiteSet
    model: object
    theta0: tuple
    replicates: int = 1
    seed: int = 0
    support_radius: float = None

    def __post_init__(self):
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise DomainError(f"replicates must be a positive integer, got {self.replicates!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")

    def kernel(self):
        if hasattr(self.model, "value"):
            theta = np.asarray(self.theta0, dtype=float)
            return lambda t: self.model.value(t, theta)
        return self.model

    def radius(self):
        if self.support_radius is not None:
            return float(self.support_radius)
        return float(self.model.radius_at(np.asarray(self.theta0, dtype=float)))


def replicate_rngs(seed, replicates):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(int(replicates))]


def simulate(spec):
    """Array of shape ``(replicates, n)``.

    Raises
    ------
    NotPositiveDefiniteError
        If the covariance matrix at ``theta0`` is not positive definite.
    """
    sigma = assemble(spec.sites, spec.kernel(), spec.radius())
    fac = factorize(sigma)
    if not fac.is_pd:
        raise NotPositiveDefiniteError(
            "cannot simulate: the covariance matrix at theta0 is not positive definite"
        )
    low, perm = fac.lower_factor_dense()
    n = spec.sites.n
    out = np.empty((spec.replicates, n))
    for r, rng in enumerate(replicate_rngs(spec.seed, spec.replicates)):
        out[r, perm] = low @ rng.standard_normal(n)
    return out


def write_fields_csv(fields, path):
    """Long CSV with columns ``replicate,site_index,value``."""
    fields = np.atleast_2d(fields)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["replicate", "site_index", "value"])
        for r, row in enumerate(fields):
            for i, v in enumerate(row):
                writer.writerow([r, i, repr(float(v))])


def read_fields_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(r["replicate"]), int(r["site_index"]), float(r["value"])) for r in reader]
    n_rep = max(r for r, _, _ in rows) + 1
    n = max(i for _, i, _ in rows) + 1
    out = np.full((n_rep, n), np.nan)
    for r, i, v in rows:
        out[r, i] = v
    return out


def write_fields_binary(sites, fields, path):
    """Site-set binary layout extended by a replicate dimension.

    Header ``<4sIqqqdQ``: magic ``TMLF``, version, d, n, replicates, tau, seed;
    then ``n*d`` float64 coordinates and ``replicates*n`` float64 values,
    little-endian, row-major.
    """
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    if fields.shape[1] != sites.n:
        raise DomainError("fields and sites disagree on n")
    header = _FIELDS_HEADER.pack(
        FIELDS_MAGIC, FORMAT_VERSION, sites.d, sites.n, fields.shape[0], float(sites.tau), int(sites.seed)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(sites.coords, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(fields, dtype="<f8").tobytes())


def read_fields_binary(path):
    """Returns ``(sites, fields)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, d, n, reps, tau, seed = _FIELDS_HEADER.unpack_from(buf, 0)
    if magic != FIELDS_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a simulated-field binary file")
    off = _FIELDS_HEADER.size
    coords = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    values = np.frombuffer(buf, dtype="<f8", count=reps * n, offset=off + 8 * n * d).reshape(reps, n)
    return SiteSet(coords, tau, seed), values.copy()
