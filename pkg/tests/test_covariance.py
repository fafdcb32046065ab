import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import sparse

from truncml.covariance import (
    CHOLESKY_PD,
    EIGEN_INDEFINITE,
    SymMatrix,
    apply_pinv,
    assemble,
    assemble_dense_bruteforce,
    factorize,
    power_norm,
    read_triplets,
    spectral_gap_report,
    write_triplets,
)
from truncml.errors import DomainError
from truncml.grid import GridSpec, generate, packing_bound
from truncml.wendland import SmoothnessConfig, ThetaBox, WendlandParams, eval_phi

SM = SmoothnessConfig(9.0, 4.5, 2)


def kernel(s2=1.0, beta=1.8, smooth=SM):
    p = WendlandParams(s2, beta, smooth)
    return lambda t: eval_phi(p, t)


class TestAssemble:
    def test_single_site(self):
        mat = assemble(generate(GridSpec(2, 0.3, 1, seed=1)), kernel(1.7), 1.8)
        np.testing.assert_array_equal(mat.toarray(), [[1.7]])

    def test_tridiagonal_line(self):
        sites = generate(GridSpec(1, 0.0, 3))
        mat = assemble(sites, kernel(1.0, 1.5, SmoothnessConfig(5.0, 1.0, 1)), 1.5).toarray()
        assert np.count_nonzero(mat) == 7
        assert mat[0, 2] == 0.0 and mat[0, 1] > 0 and mat[1, 2] > 0

    @pytest.mark.parametrize("dense", [False, True])
    def test_bruteforce_oracle(self, dense):
        rng = np.random.default_rng(7)
        for _ in range(50):
            d = int(rng.integers(1, 4))
            n = int(rng.integers(2, 120))
            tau = float(rng.uniform(0, 0.45))
            beta = float(rng.uniform(0.5, 3.0))
            sites = generate(GridSpec(d, tau, n, seed=int(rng.integers(2**32))))
            k = kernel(1.0, beta)
            mat = assemble(sites, k, beta, dense=dense)
            np.testing.assert_array_equal(mat.toarray(), assemble_dense_bruteforce(sites, k, beta))
            assert mat.is_symmetric()

    def test_sparsity_respects_packing(self):
        sites = generate(GridSpec(2, 0.3, 400, seed=3))
        mat = assemble(sites, kernel(1.0, 2.0), 2.0)
        assert mat.is_sparse
        assert mat.nnz <= sites.n * (1 + packing_bound(2, 2.0, 0.3))

    def test_not_square(self):
        with pytest.raises(DomainError):
            SymMatrix(np.zeros((2, 3)))


class TestFactorize:
    def test_identity(self):
        fac = factorize(SymMatrix(np.eye(4)))
        assert fac.kind == CHOLESKY_PD and fac.log_det_plus == 0.0 and fac.rank_positive == 4
        v = np.array([1.0, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(apply_pinv(fac, v), v)

    def test_indefinite_diag(self):
        fac = factorize(np.diag([2.0, -1.0]))
        assert fac.kind == EIGEN_INDEFINITE
        assert fac.log_det_plus == pytest.approx(math.log(2.0))
        assert fac.rank_positive == 1
        np.testing.assert_allclose(apply_pinv(fac, np.array([2.0, 3.0])), [1.0, -3.0])

    def test_all_nonpositive(self):
        fac = factorize(np.diag([-1.0, -3.0]))
        assert fac.log_det_plus == 0.0 and fac.rank_positive == 0

    def test_forced_eigen_matches_cholesky(self):
        sites = generate(GridSpec(2, 0.3, 150, seed=5))
        mat = assemble(sites, kernel(1.3, 2.2), 2.2)
        chol, eig = factorize(mat), factorize(mat, pd_attempt_first=False)
        assert chol.kind == CHOLESKY_PD and eig.kind == EIGEN_INDEFINITE
        assert chol.log_det_plus == pytest.approx(eig.log_det_plus, rel=1e-10)
        z = np.random.default_rng(0).standard_normal(sites.n)
        np.testing.assert_allclose(chol.solve(z), eig.solve(z), rtol=1e-8, atol=1e-10)

    @pytest.mark.parametrize("banded", [True, False])
    def test_round_trip_both_cholesky_routes(self, banded):
        sites = generate(GridSpec(2, 0.3, 200, seed=8))
        mat = assemble(sites, kernel(1.0, 1.8), 1.8)
        fac = factorize(mat, banded=banded)
        z = np.random.default_rng(1).standard_normal(sites.n)
        np.testing.assert_allclose(mat.matvec(fac.solve(z)), z, atol=1e-10)
        low, perm = fac.lower_factor_dense()
        dense = mat.toarray()
        np.testing.assert_allclose(low @ low.T, dense[np.ix_(perm, perm)], atol=1e-12)

    def test_random_pd_round_trip(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((20, 20))
        a = a @ a.T + 20 * np.eye(20)
        fac = factorize(a)
        v = rng.standard_normal(20)
        np.testing.assert_allclose(apply_pinv(fac, a @ v), v, atol=1e-10)

    def test_indefinite_matches_dense_eigen(self):
        rng = np.random.default_rng(3)
        for n in (5, 40, 120):
            q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            w = rng.uniform(-2, 3, n)
            a = (q * w) @ q.T
            a = 0.5 * (a + a.T)
            fac = factorize(a)
            assert fac.kind == EIGEN_INDEFINITE
            assert fac.log_det_plus == pytest.approx(np.sum(np.log(w[w > 0])), rel=1e-9)
            assert fac.rank_positive == int(np.sum(w > 0))
            np.testing.assert_allclose(fac.inverse(), np.linalg.pinv(a), atol=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            factorize(np.eye(3)).solve(np.ones(2))

    def test_no_factor_on_eigen_path(self):
        with pytest.raises(DomainError):
            factorize(np.diag([1.0, -1.0])).lower_factor_dense()

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, 6), elements=st.floats(-3, 3)))
    def test_pinv_is_moore_penrose(self, a):
        a = a + a.T
        fac = factorize(a)
        p = fac.inverse()
        scale = max(1.0, np.abs(a).max())
        np.testing.assert_allclose(a @ p @ a, a, atol=1e-7 * scale**2 * max(1.0, np.abs(p).max()))
        np.testing.assert_allclose(p, p.T, atol=1e-12 * max(1.0, np.abs(p).max()))


class TestSpectral:
    def test_same_matrix(self):
        mat = assemble(generate(GridSpec(2, 0.3, 50, seed=1)), kernel(), 1.8)
        assert spectral_gap_report(mat, mat)["spec_norm_diff"] == 0.0

    @pytest.mark.parametrize("n", [2, 60, 300])
    def test_dense_oracle(self, n):
        sites = generate(GridSpec(2, 0.3, n, seed=n))
        a = assemble(sites, kernel(1.0, 2.0), 2.0)
        b = assemble(sites, kernel(0.8, 1.5), 1.5)
        rep = spectral_gap_report(a, b)
        wa, wb = np.linalg.eigvalsh(a.toarray()), np.linalg.eigvalsh(b.toarray())
        wd = np.linalg.eigvalsh(a.toarray() - b.toarray())
        assert rep["lambda_min_a"] == pytest.approx(wa[0], rel=1e-8)
        assert rep["lambda_max_a"] == pytest.approx(wa[-1], rel=1e-8)
        assert rep["lambda_min_b"] == pytest.approx(wb[0], rel=1e-8)
        assert rep["lambda_max_b"] == pytest.approx(wb[-1], rel=1e-8)
        assert rep["spec_norm_diff"] == pytest.approx(np.abs(wd).max(), rel=1e-8)

    def test_gershgorin(self):
        box = ThetaBox(0.5, 2.0, 1.0, 2.6)
        sites = generate(GridSpec(2, 0.3, 200, seed=2))
        for s2, beta in box.grid(3):
            mat = assemble(sites, kernel(s2, beta), beta)
            assert spectral_gap_report(mat, mat)["lambda_max_a"] <= mat.max_abs_row_sum() + 1e-12

    def test_power_norm_zero(self):
        assert power_norm(SymMatrix(np.zeros((3, 3)))) == 0.0

    def test_power_norm_symmetric_spectrum(self):
        assert power_norm(np.diag([1.0, -3.0, 3.0, 0.5])) == pytest.approx(3.0, rel=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            spectral_gap_report(np.eye(2), np.eye(3))


def test_eigenvalue_floor_and_ceiling():
    box = ThetaBox(0.5, 2.0, 1.0, 2.6)
    ceiling = box.sigma2_max * packing_bound(2, box.beta_max, 0.3)
    for n in (50, 150):
        sites = generate(GridSpec(2, 0.3, n, seed=n))
        for s2, beta in box.grid(3):
            w = np.linalg.eigvalsh(assemble(sites, kernel(s2, beta), beta).toarray())
            assert 0 < w[0] and w[-1] <= ceiling


def test_triplets_round_trip(tmp_path):
    mat = assemble(generate(GridSpec(2, 0.3, 30, seed=1)), kernel(), 1.8)
    path = tmp_path / "m.txt"
    write_triplets(mat, path)
    back = read_triplets(path)
    assert back.support_radius == 1.8
    np.testing.assert_array_equal(back.toarray(), mat.toarray())
    assert path.read_text().startswith("# n=30 support_radius=1.8\n")


def test_sub_mixed_storage():
    a = SymMatrix(sparse.identity(3, format="csr"))
    b = SymMatrix(np.full((3, 3), 0.5))
    np.testing.assert_array_equal((a - b).toarray(), np.eye(3) - 0.5)
