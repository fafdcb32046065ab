"""
Randomly perturbed regular grids and fixed-radius neighbor search.

Sites are ``S_i = v_i + tau * X_i`` where ``v_i`` runs over N^d shell by shell,
so the first ``I^d`` points always occupy ``{1, ..., I}^d``, and the ``X_i`` are
i.i.d. uniform on ``[-1, 1]^d``.  Any two distinct sites are at least
``1 - 2 tau`` apart.

Within a shell ``{1..I}^d \\ {1..I-1}^d`` the points are listed in lexicographic
order.  The perturbations are drawn as one ``(n, d)`` block from a PCG64 stream
seeded with ``seed``, so the sites for ``n`` are a prefix of the sites for any
larger ``n`` with the same seed and ``tau``.
"""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "GridSpec",
    "SiteSet",
    "generate",
    "lattice_points",
    "min_spacing",
    "min_spacing_bruteforce",
    "neighbor_pairs",
    "packing_bound",
    "write_sites_csv",
    "read_sites_csv",
    "write_sites_binary",
    "read_sites_binary",
]

SITES_MAGIC = b"TMLS"
FORMAT_VERSION = 1
_SITES_HEADER = struct.Struct("<4sIqqdQ")


@dataclass(frozen=True)
class GridSpec:
    d: int
    tau: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d!r}")
        if not 0.0 <= self.tau < 0.5:
            raise DomainError(f"tau must lie in [0, 1/2), got {self.tau!r}")
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")

    @property
    def spacing(self):
        """Guaranteed minimal distance ``1 - 2 tau``."""
        return 1.0 - 2.0 * self.tau


@dataclass(frozen=True, eq=False)
class SiteSet:
    """Observation sites; ``coords`` has shape ``(n, d)`` and is read-only."""

    coords: np.ndarray
    tau: float
    seed: int = 0
    lattice: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float, copy=True)
        if coords.ndim == 1:
            coords = coords[:, None]
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.lattice is not None:
            lat = np.array(self.lattice, dtype=np.int64, copy=True)
            lat.setflags(write=False)
            object.__setattr__(self, "lattice", lat)

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def d(self):
        return self.coords.shape[1]

    @property
    def spacing(self):
        return 1.0 - 2.0 * self.tau

    def head(self, n):
        """The first ``n`` sites."""
        lat = None if self.lattice is None else self.lattice[:n]
        return SiteSet(self.coords[:n], self.tau, self.seed, lat)

    def __eq__(self, other):
        if not isinstance(other, SiteSet):
            return NotImplemented
        return (
            self.tau == other.tau
            and self.seed == other.seed
            and np.array_equal(self.coords, other.coords)
        )


def lattice_points(d, n):
    """First ``n`` points of N^d, shell by shell, lexicographic within a shell."""
    out = []
    count = 0
    shell = 0
    while count < n:
        shell += 1
        for p in itertools.product(range(1, shell + 1), repeat=d):
            if max(p) == shell:
                out.append(p)
                count += 1
                if count == n:
                    break
    return np.array(out, dtype=np.int64).reshape(n, d)


def generate(spec):
    """Draw ``spec.n`` sites of a perturbed grid."""
    lattice = lattice_points(spec.d, spec.n)
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    x = rng.uniform(-1.0, 1.0, size=(spec.n, spec.d))
    return SiteSet(lattice + spec.tau * x, spec.tau, int(spec.seed), lattice)


def packing_bound(d, radius, tau):
    """Upper bound ``2^(2d) d C^(d-1) / (1 - 2 tau)^d`` on sites within radius ``C``."""
    return 2.0 ** (2 * d) * d * radius ** (d - 1) / (1.0 - 2.0 * tau) ** d


def neighbor_pairs(coords, radius, strict=True):
    """All pairs ``i < j`` with ``||x_i - x_j|| < radius`` (``<=`` if not strict).

    Cell-list search: points are binned into cubes of side ``radius`` and
    only the ``3^d`` surrounding cells are scanned, giving O(n) work for point
    sets with bounded density.

    Returns
    -------
    i, j : ndarray of int
    dist : ndarray of float
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    n, d = coords.shape
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))
    if n < 2 or not radius > 0:
        return empty
    lo = coords.min(axis=0)
    cell = np.floor((coords - lo) / radius).astype(np.int64)
    dims = cell.max(axis=0) + 3  # pad so that offsets never wrap
    cell += 1
    keys = np.ravel_multi_index(cell.T, dims)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    all_i, all_j = [], []
    for offset in itertools.product((-1, 0, 1), repeat=d):
        nkeys = np.ravel_multi_index((cell + np.array(offset)).T, dims)
        start = np.searchsorted(sorted_keys, nkeys, side="left")
        stop = np.searchsorted(sorted_keys, nkeys, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        ii = np.repeat(np.arange(n), counts)
        # position within each run
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        jj = order[np.repeat(start, counts) + within]
        keep = ii < jj
        all_i.append(ii[keep])
        all_j.append(jj[keep])
    if not all_i:
        return empty
    i = np.concatenate(all_i)
    j = np.concatenate(all_j)
    dist = np.sqrt(((coords[i] - coords[j]) ** 2).sum(axis=1))
    keep = dist < radius if strict else dist <= radius
    i, j, dist = i[keep], j[keep], dist[keep]
    srt = np.lexsort((j, i))
    return i[srt], j[srt], dist[srt]


def min_spacing(sites):
    """Exact minimum distance between distinct sites."""
    coords = sites.coords if isinstance(sites, SiteSet) else np.asarray(sites, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[0] < 2:
        raise DomainError("min_spacing needs at least two sites")
    extent = float(np.max(coords.max(axis=0) - coords.min(axis=0)))
    radius = max(1.0, 1e-9 * extent)
    while True:
        _, _, dist = neighbor_pairs(coords, radius, strict=False)
        if dist.size:
            return float(dist.min())
        radius *= 2.0


def min_spacing_bruteforce(sites):
    coords = sites.coords if isinstance(sites, SiteSet) else np.asarray(sites, dtype=float)
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


# -- serialization -----------------------------------------------------------


def write_sites_csv(sites, path_or_buf):
    """CSV with header ``index,x1,...,xd``; floats written with full precision."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index"] + [f"x{k + 1}" for k in range(sites.d)])
        for i, row in enumerate(sites.coords):
            writer.writerow([i] + [repr(float(v)) for v in row])
    finally:
        if own:
            fh.close()


def read_sites_csv(path_or_buf, tau=0.0, seed=0):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [k for k, name in enumerate(header) if name.startswith("x")]
        rows = [[float(r[k]) for k in cols] for r in reader if r]
    finally:
        if own:
            fh.close()
    return SiteSet(np.array(rows, dtype=float).reshape(len(rows), len(cols)), tau, seed)


def sites_to_bytes(sites):
    header = _SITES_HEADER.pack(
        SITES_MAGIC, FORMAT_VERSION, sites.d, sites.n, float(sites.tau), int(sites.seed)
    )
    return header + np.ascontiguousarray(sites.coords, dtype="<f8").tobytes()


def sites_from_bytes(buf):
    magic, version, d, n, tau, seed = _SITES_HEADER.unpack_from(buf, 0)
    if magic != SITES_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a site-set binary file")
    coords = np.frombuffer(buf, dtype="<f8", count=n * d, offset=_SITES_HEADER.size)
    return SiteSet(coords.reshape(n, d), tau, seed)


def write_sites_binary(sites, path):
    """Binary layout: header ``<4sIqqdQ`` (magic ``TMLS``, version, d, n, tau, seed)
    followed by ``n*d`` little-endian float64 coordinates, row-major."""
    with open(path, "wb") as fh:
        fh.write(sites_to_bytes(sites))


def read_sites_binary(path):
    with open(path, "rb") as fh:
        return sites_from_bytes(fh.read())
