"""
Covariance matrix assembly and factorization.

Matrices are assembled from a radial kernel evaluated on the site pairs found
by the cell-list search, so only pairs closer than the stated support radius
are ever touched.  :func:`factorize` first attempts a Cholesky factorization
(banded after a reverse Cuthill-McKee reordering when that pays off) and falls
back to a dense symmetric eigendecomposition, which is what the pseudo
determinant ``det_+`` and the Moore-Penrose inverse need on indefinite input.

Eigenvalues with ``|lambda| <= n * eps * max|lambda|`` are treated as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as splinalg

from .errors import DomainError, NumericError
from .grid import SiteSet, neighbor_pairs

__all__ = [
    "SymMatrix",
    "Factorization",
    "assemble",
    "assemble_dense_bruteforce",
    "from_pairs",
    "factorize",
    "apply_pinv",
    "spectral_gap_report",
    "power_norm",
    "write_triplets",
    "read_triplets",
]

CHOLESKY_PD = "CholeskyPD"
EIGEN_INDEFINITE = "EigenIndefinite"


class SymMatrix:
    """Symmetric ``n x n`` matrix stored sparse (CSR) or dense.

    Entries beyond ``support_radius`` are structurally absent.  Both triangles
    are stored and ``entry(i, j)`` and ``entry(j, i)`` are the same float.
    """

    def __init__(self, data, support_radius=math.inf):
        if sparse.issparse(data):
            data = sparse.csr_matrix(data)
        else:
            data = np.asarray(data, dtype=float)
            if data.ndim != 2:
                raise DomainError("matrix must be two-dimensional")
        if data.shape[0] != data.shape[1]:
            raise DomainError(f"matrix must be square, got {data.shape}")
        self._data = data
        self.support_radius = float(support_radius)

    @property
    def n(self):
        return self._data.shape[0]

    @property
    def is_sparse(self):
        return sparse.issparse(self._data)

    @property
    def nnz(self):
        if self.is_sparse:
            return int(self._data.nnz)
        return int(np.count_nonzero(self._data))

    def toarray(self):
        return self._data.toarray() if self.is_sparse else self._data.copy()

    def tocsr(self):
        return self._data.copy() if self.is_sparse else sparse.csr_matrix(self._data)

    def matvec(self, v):
        return self._data @ v

    def __matmul__(self, other):
        return self._data @ other

    def __sub__(self, other):
        other_data = other._data if isinstance(other, SymMatrix) else other
        if self.is_sparse and sparse.issparse(other_data):
            return SymMatrix(self._data - other_data)
        return SymMatrix(self.toarray() - (other_data.toarray() if sparse.issparse(other_data) else other_data))

    def is_symmetric(self):
        if self.is_sparse:
            diff = self._data - self._data.T
            return diff.nnz == 0 or not np.any(diff.data)
        return bool(np.array_equal(self._data, self._data.T))

    def max_abs_row_sum(self):
        if self.is_sparse:
            return float(np.max(np.asarray(abs(self._data).sum(axis=1)).ravel()))
        return float(np.max(np.abs(self._data).sum(axis=1)))


def from_pairs(n, i, j, values, diag, support_radius=math.inf, dense=False):
    """Symmetric matrix with off-diagonal ``values`` at ``(i, j)`` and ``(j, i)``.

    ``diag`` is a scalar or length-``n`` vector for the diagonal.
    """
    diag = np.broadcast_to(np.asarray(diag, dtype=float), (n,))
    if dense:
        out = np.zeros((n, n))
        out[i, j] = values
        out[j, i] = values
        out[np.arange(n), np.arange(n)] = diag
        return SymMatrix(out, support_radius)
    keep = values != 0.0
    ii, jj, vv = i[keep], j[keep], values[keep]
    rows = np.concatenate([ii, jj, np.arange(n)])
    cols = np.concatenate([jj, ii, np.arange(n)])
    vals = np.concatenate([vv, vv, diag])
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.eliminate_zeros()
    return SymMatrix(mat, support_radius)


def assemble(sites, kernel, support_radius, dense=False):
    """Covariance matrix ``[kernel(||s_i - s_j||)]`` of a site set.

    Parameters
    ----------
    sites : SiteSet or ndarray
    kernel : callable
        Vectorized radial function of distance.  Must vanish at distances
        ``>= support_radius``; pairs at or beyond that radius are not evaluated.
    support_radius : float
    """
    coords = sites.coords if isinstance(sites, SiteSet) else np.atleast_2d(np.asarray(sites, dtype=float))
    n = coords.shape[0]
    i, j, dist = neighbor_pairs(coords, support_radius)
    values = np.asarray(kernel(dist), dtype=float) if dist.size else np.empty(0)
    diag = float(np.asarray(kernel(np.zeros(1)), dtype=float)[0])
    return from_pairs(n, i, j, values, diag, support_radius, dense=dense)


def assemble_dense_bruteforce(sites, kernel, support_radius):
    """All-pairs dense assembly, for cross-checking :func:`assemble`."""
    coords = sites.coords if isinstance(sites, SiteSet) else np.atleast_2d(np.asarray(sites, dtype=float))
    n = coords.shape[0]
    out = np.zeros((n, n))
    for a in range(n):
        out[a, a] = float(np.asarray(kernel(np.zeros(1)))[0])
        for b in range(a + 1, n):
            dist = math.sqrt(float(((coords[a] - coords[b]) ** 2).sum()))
            if dist < support_radius:
                out[a, b] = out[b, a] = float(np.asarray(kernel(np.array([dist])))[0])
    return out


@dataclass(frozen=True, eq=False)
class Factorization:
    """Result of :func:`factorize`.

    ``kind`` records which path produced it.  ``log_det_plus`` is the log of the
    product of eigenvalues above ``pd_tol`` (zero when there is none) and
    ``rank_positive`` their count.  On the Cholesky path this is the ordinary
    log-determinant and ``rank_positive == n``.
    """

    kind: str
    n: int
    log_det_plus: float
    rank_positive: int
    pd_tol: float = 0.0
    _chol: object = field(default=None, repr=False)
    _banded: bool = field(default=False, repr=False)
    _perm: np.ndarray = field(default=None, repr=False)
    _eigvals: np.ndarray = field(default=None, repr=False)
    _eigvecs: np.ndarray = field(default=None, repr=False)

    @property
    def is_pd(self):
        return self.kind == CHOLESKY_PD

    @property
    def eigenvalues(self):
        return self._eigvals

    def solve(self, rhs):
        """``A^{-1} rhs`` on the Cholesky path, ``A^+ rhs`` on the eigen path."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise DomainError(f"dimension mismatch: {rhs.shape[0]} vs {self.n}")
        if self.kind == CHOLESKY_PD:
            if self._perm is None:
                if self._banded:
                    return linalg.cho_solve_banded((self._chol, True), rhs)
                return linalg.cho_solve((self._chol, True), rhs)
            p = self._perm
            sol = (
                linalg.cho_solve_banded((self._chol, True), rhs[p])
                if self._banded
                else linalg.cho_solve((self._chol, True), rhs[p])
            )
            out = np.empty_like(sol)
            out[p] = sol
            return out
        w, v = self._eigvals, self._eigvecs
        keep = np.abs(w) > self.pd_tol
        coeff = v[:, keep].T @ rhs
        if coeff.ndim == 1:
            coeff = coeff / w[keep]
        else:
            coeff = coeff / w[keep][:, None]
        return v[:, keep] @ coeff

    def inverse(self):
        """Dense ``A^{-1}`` (or ``A^+``)."""
        if self.kind == EIGEN_INDEFINITE:
            w, v = self._eigvals, self._eigvecs
            keep = np.abs(w) > self.pd_tol
            return (v[:, keep] / w[keep]) @ v[:, keep].T
        inv = self.solve(np.eye(self.n))
        return 0.5 * (inv + inv.T)

    def lower_factor_dense(self):
        """Dense lower Cholesky factor ``L`` with ``P A P^T = L L^T``, and ``P`` as an index array."""
        if self.kind != CHOLESKY_PD:
            raise DomainError("no Cholesky factor on the eigen path")
        if self._banded:
            cb = self._chol
            u = cb.shape[0] - 1
            low = np.zeros((self.n, self.n))
            for k in range(u + 1):
                idx = np.arange(self.n - k)
                low[idx + k, idx] = cb[k, : self.n - k]
        else:
            low = np.tril(self._chol)
        perm = np.arange(self.n) if self._perm is None else self._perm
        return low, perm


def _pd_tol(w, n):
    return n * np.finfo(float).eps * float(np.max(np.abs(w))) if w.size else 0.0


def _eigen_factor(dense):
    n = dense.shape[0]
    try:
        w, v = linalg.eigh(dense)
    except linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericError(f"symmetric eigensolver failed: {exc}") from exc
    tol = _pd_tol(w, n)
    pos = w > tol
    logdet = float(np.sum(np.log(w[pos]))) if np.any(pos) else 0.0
    return Factorization(
        EIGEN_INDEFINITE, n, logdet, int(pos.sum()), tol, _eigvals=w, _eigvecs=v
    )


def _bandwidth(csr):
    coo = csr.tocoo()
    return int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0


def factorize(mat, pd_attempt_first=True, banded=None):
    """Factorize a symmetric matrix.

    Parameters
    ----------
    mat : SymMatrix or ndarray
    pd_attempt_first : bool
        Try Cholesky first; with ``False`` the eigen path is forced.
    banded : bool, optional
        Force (``True``) or forbid (``False``) the banded Cholesky route for
        sparse input; by default it is used when the reordered bandwidth is
        below ``n / 4``.
    """
    if not isinstance(mat, SymMatrix):
        mat = SymMatrix(mat)
    if pd_attempt_first:
        try:
            return _cholesky(mat, banded)
        except linalg.LinAlgError:
            pass
    return _eigen_factor(mat.toarray())


def _cholesky(mat, banded):
    n = mat.n
    if mat.is_sparse and banded is not False and n > 1:
        csr = mat.tocsr()
        perm = csgraph.reverse_cuthill_mckee(csr, symmetric_mode=True).astype(np.int64)
        permuted = csr[perm][:, perm]
        bw = _bandwidth(permuted)
        if banded or bw < n / 4:
            ab = np.zeros((bw + 1, n))
            coo = sparse.tril(permuted).tocoo()
            ab[coo.row - coo.col, coo.col] = coo.data
            cb = linalg.cholesky_banded(ab, lower=True)
            logdet = 2.0 * float(np.sum(np.log(cb[0])))
            return Factorization(CHOLESKY_PD, n, logdet, n, _chol=cb, _banded=True, _perm=perm)
    dense = mat.toarray()
    low = linalg.cholesky(dense, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
    return Factorization(CHOLESKY_PD, n, logdet, n, _chol=low)


def apply_pinv(fac, v):
    """Apply the inverse (PD) or the pseudo-inverse (indefinite) to ``v``."""
    return fac.solve(v)


def power_norm(mat, tol=1e-12, max_iter=20_000, seed=0):
    """Spectral norm of a symmetric matrix by power iteration.

    Iterates ``x <- A x / ||A x||`` and monitors ``||A x||``; this converges to
    ``max |lambda|`` even when ``+lambda`` and ``-lambda`` are both extremal.
    """
    data = mat._data if isinstance(mat, SymMatrix) else mat
    n = data.shape[0]
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    est = 0.0
    for it in range(1, max_iter + 1):
        y = data @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        # two steps of A act like A^2, whose Rayleigh quotient is est^2
        if it > 2 and abs(new - est) <= tol * new:
            return new
        est = new
        x = y / new
    raise NumericError(
        f"power iteration did not converge in {max_iter} iterations", iterations=max_iter
    )


def _extremal(mat, which, tol):
    n = mat.n
    if n <= 3:
        w = linalg.eigvalsh(mat.toarray())
        return float(w[0] if which == "SA" else w[-1])
    op = mat.tocsr()
    try:
        w = splinalg.eigsh(op, k=1, which=which, tol=tol, maxiter=50 * n, return_eigenvectors=False)
    except splinalg.ArpackNoConvergence as exc:
        raise NumericError(
            f"Lanczos iteration for the {'smallest' if which == 'SA' else 'largest'} "
            f"eigenvalue did not converge",
            iterations=50 * n,
        ) from exc
    return float(w[0])


def spectral_gap_report(mat_a, mat_b, tol=1e-12):
    """Extremal eigenvalues of two matrices and the spectral norm of their difference."""
    if not isinstance(mat_a, SymMatrix):
        mat_a = SymMatrix(mat_a)
    if not isinstance(mat_b, SymMatrix):
        mat_b = SymMatrix(mat_b)
    if mat_a.n != mat_b.n:
        raise DomainError("matrices must have the same dimension")
    diff = mat_a - mat_b
    return {
        "spec_norm_diff": power_norm(diff, tol=tol),
        "lambda_min_a": _extremal(mat_a, "SA", tol),
        "lambda_min_b": _extremal(mat_b, "SA", tol),
        "lambda_max_a": _extremal(mat_a, "LA", tol),
        "lambda_max_b": _extremal(mat_b, "LA", tol),
    }


def write_triplets(mat, path):
    """Sparse triplet text export.

    First line ``# n=<n> support_radius=<r>``, then one ``i j value`` line per
    stored entry (both triangles, 0-based, row-major order, values in ``repr``
    precision).
    """
    coo = mat.tocsr().tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# n={mat.n} support_radius={mat.support_radius!r}\n")
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")


def read_triplets(path):
    with open(path) as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(item.split("=") for item in header)
        rows, cols, vals = [], [], []
        for line in fh:
            a, b, c = line.split()
            rows.append(int(a))
            cols.append(int(b))
            vals.append(float(c))
    n = int(meta["n"])
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SymMatrix(mat, float(meta["support_radius"]))
