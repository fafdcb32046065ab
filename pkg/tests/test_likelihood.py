import math

import numpy as np
import pytest

from truncml.covariance import assemble
from truncml.errors import DomainError, NotPositiveDefiniteError
from truncml.grid import GridSpec, generate
from truncml.likelihood import (
    LikelihoodContext,
    eval_hessian,
    eval_loglik,
    eval_score,
    evaluate,
    fisher_matrix,
    identifiability_gap,
)
from truncml.models import ApproxModel, WendlandModel, make_model
from truncml.approximations import ApproxFamily
from truncml.simulation import SimSpec, simulate
from truncml.wendland import SmoothnessConfig, ThetaBox, WendlandParams, eval_phi

SM = SmoothnessConfig(9.0, 4.5, 2)
BOX = ThetaBox(0.5, 2.0, 1.0, 2.6)
THETA0 = (1.0, 1.8)


def field(n, seed=0, model=None, theta=THETA0, tau=0.3):
    sites = generate(GridSpec(2, tau, n, seed=seed))
    model = model or WendlandModel(SM)
    z = simulate(SimSpec(sites, model, theta, 1, seed + 1))[0]
    return sites, z


def iid_ctx(z, box=None):
    # beta below the minimal spacing of the integer line: Sigma = sigma2 I
    sites = generate(GridSpec(1, 0.0, len(z)))
    box = box or ThetaBox(0.2, 5.0, 0.3, 0.9)
    return LikelihoodContext(sites, np.asarray(z, dtype=float), WendlandModel(SmoothnessConfig(9.0, 4.5, 1)), box)


def dense_loglik(sites, z, theta, smooth=SM):
    p = WendlandParams(theta[0], theta[1], smooth)
    sig = assemble(sites, lambda t: eval_phi(p, t), theta[1], dense=True).toarray()
    sign, logdet = np.linalg.slogdet(sig)
    assert sign > 0
    return (logdet + z @ np.linalg.solve(sig, z)) / len(z)


class TestValue:
    def test_single_site(self):
        sites = generate(GridSpec(2, 0.3, 1, seed=1))
        ctx = LikelihoodContext(sites, np.array([0.7]), WendlandModel(SM), BOX)
        assert eval_loglik(ctx, (1.5, 2.0)).value == pytest.approx(math.log(1.5) + 0.49 / 1.5)

    def test_identity_covariance(self):
        z = np.random.default_rng(0).standard_normal(30)
        assert eval_loglik(iid_ctx(z), (1.0, 0.8)).value == pytest.approx(z @ z / 30)

    def test_dense_oracle(self):
        sites, z = field(100, seed=3)
        ctx = LikelihoodContext(sites, z, WendlandModel(SM), BOX)
        for theta in [(1.0, 1.8), (0.6, 2.5), (1.9, 1.1)]:
            assert eval_loglik(ctx, theta).value == pytest.approx(dense_loglik(sites, z, theta), rel=1e-8)

    def test_value_decomposition(self):
        sites, z = field(60, seed=4)
        ev = eval_loglik(LikelihoodContext(sites, z, WendlandModel(SM), BOX), (1.2, 2.0))
        assert ev.value == pytest.approx((ev.log_det_plus + ev.quad_form) / ev.n)
        assert ev.was_pd

    def test_forced_eigen_agrees(self):
        sites, z = field(150, seed=5)
        ctx = LikelihoodContext(sites, z, WendlandModel(SM), BOX)
        for theta in [(1.0, 1.8), (2.0, 2.6)]:
            a = eval_loglik(ctx, theta).value
            b = eval_loglik(ctx, theta, force_eigen=True).value
            assert b == pytest.approx(a, rel=1e-9)

    def test_outside_box(self):
        sites, z = field(10)
        ctx = LikelihoodContext(sites, z, WendlandModel(SM), BOX)
        with pytest.raises(DomainError):
            eval_loglik(ctx, (3.0, 1.8))

    def test_data_length(self):
        sites, _ = field(10)
        with pytest.raises(DomainError):
            LikelihoodContext(sites, np.zeros(9), WendlandModel(SM), BOX)

    def test_indefinite_value_and_refused_gradient(self):
        # cutting a wide Askey-type kernel at 1.5 destroys positive definiteness
        smooth = SmoothnessConfig(2.5, 1.0, 2)
        box = ThetaBox(0.5, 2.0, 1.0, 6.0)
        fam = ApproxFamily("truncation", c_schedule=lambda m: 1.5)
        sites, z = field(80, seed=6)
        ctx = LikelihoodContext(sites, z, ApproxModel(fam, 2, smooth), box)
        ev = eval_loglik(ctx, (1.0, 5.0))
        assert not ev.was_pd and np.isfinite(ev.value)
        assert ev.value == pytest.approx((ev.log_det_plus + ev.quad_form) / 80)
        with pytest.raises(NotPositiveDefiniteError):
            eval_score(ctx, (1.0, 5.0))


class TestScore:
    def test_iid_closed_form(self):
        z = np.random.default_rng(1).standard_normal(40)
        ctx = iid_ctx(z)
        s2 = 1.3
        score = eval_score(ctx, (s2, 0.7))
        assert score[0] == pytest.approx(1 / s2 - z @ z / (40 * s2**2), rel=1e-12)
        assert score[1] == 0.0
        assert eval_score(ctx, (z @ z / 40, 0.7))[0] == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("kind", ["exact", "truncation", "bernstein", "linear_interp", "nugget"])
    def test_finite_differences(self, kind):
        rng = np.random.default_rng(11)
        for rep in range(4):
            n = int(rng.choice([50, 100, 150]))
            model = make_model(kind, SM, beta_max=BOX.beta_max, m=n)
            sites, z = field(n, seed=100 + rep)
            ctx = LikelihoodContext(sites, z, model, BOX)
            theta = np.array([rng.uniform(0.7, 1.8), rng.uniform(1.2, 2.4)])
            grad = eval_score(ctx, theta)
            for k in range(2):
                h = np.zeros(2)
                h[k] = 1e-5 * theta[k]
                fd = (eval_loglik(ctx, theta + h).value - eval_loglik(ctx, theta - h).value) / (2 * h[k])
                assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_centered_at_truth(self):
        n, reps = 40, 500
        sites = generate(GridSpec(2, 0.3, n, seed=2))
        model = WendlandModel(SM)
        zs = simulate(SimSpec(sites, model, THETA0, reps, seed=3))
        ctx = LikelihoodContext(sites, zs[0], model, BOX)
        scores = np.array([eval_score(ctx.with_data(z), THETA0) for z in zs])
        mean = scores.mean(axis=0)
        se = scores.std(axis=0, ddof=1) / math.sqrt(reps)
        assert np.all(np.abs(mean) < 3 * se)

    def test_hutchinson_close_to_exact(self):
        sites, z = field(300, seed=8)
        exact = LikelihoodContext(sites, z, WendlandModel(SM), BOX)
        stoch = LikelihoodContext(sites, z, WendlandModel(SM), BOX, trace_switch=0, probes=256)
        a, b = evaluate(exact, THETA0, order=2), evaluate(stoch, THETA0, order=2)
        assert b.value == a.value
        np.testing.assert_allclose(b.gradient, a.gradient, atol=0.05)
        np.testing.assert_allclose(b.fisher, a.fisher, rtol=0.2)


class TestHessian:
    def test_iid_closed_form(self):
        z = np.random.default_rng(2).standard_normal(25)
        s2 = 0.9
        h = eval_hessian(iid_ctx(z), (s2, 0.5))
        assert h[0, 0] == pytest.approx(-1 / s2**2 + 2 * (z @ z) / (25 * s2**3), rel=1e-12)
        assert h[0, 1] == h[1, 0] == h[1, 1] == 0.0

    @pytest.mark.parametrize("kind", ["exact", "linear_interp", "bernstein"])
    def test_finite_differences_of_score(self, kind):
        sites, z = field(120, seed=21)
        ctx = LikelihoodContext(sites, z, make_model(kind, SM, beta_max=BOX.beta_max, m=120), BOX)
        theta = np.array([1.1, 1.9])
        hess = eval_hessian(ctx, theta)
        assert hess[0, 1] == hess[1, 0]
        for k in range(2):
            h = np.zeros(2)
            h[k] = 1e-5 * theta[k]
            fd = (eval_score(ctx, theta + h) - eval_score(ctx, theta - h)) / (2 * h[k])
            np.testing.assert_allclose(hess[:, k], fd, rtol=1e-4, atol=1e-8)


class TestFisher:
    def test_iid(self):
        z = np.ones(10)
        f = fisher_matrix(iid_ctx(z), (2.0, 0.5))
        np.testing.assert_allclose(f, [[1 / 8, 0], [0, 0]], atol=1e-15)

    def test_positive_definite_at_truth(self):
        sites, z = field(400, seed=31)
        f = fisher_matrix(LikelihoodContext(sites, z, WendlandModel(SM), BOX), THETA0)
        assert np.linalg.eigvalsh(f)[0] > 0

    def test_dense_trace_oracle(self):
        sites, z = field(80, seed=32)
        ctx = LikelihoodContext(sites, z, WendlandModel(SM), BOX)
        sig = ctx.matrix(THETA0).toarray()
        d = [ctx.matrix(THETA0, o).toarray() for o in ((1, 0), (0, 1))]
        a = [np.linalg.solve(sig, dk) for dk in d]
        want = np.array([[np.trace(a[k] @ a[l]) for l in range(2)] for k in range(2)]) / (2 * 80)
        np.testing.assert_allclose(fisher_matrix(ctx, THETA0), want, rtol=1e-10)

    def test_stable_in_n(self):
        f = []
        for n in (400, 900):
            sites, z = field(n, seed=33)
            f.append(fisher_matrix(LikelihoodContext(sites, z, WendlandModel(SM), BOX), THETA0))
        assert np.all(np.abs(f[1] - f[0]) < 0.25 * np.abs(f[0]))


class TestIdentifiabilityGap:
    def test_zero_at_truth(self):
        sites = generate(GridSpec(2, 0.3, 100, seed=1))
        assert identifiability_gap(sites, WendlandModel(SM), THETA0, THETA0) == 0.0

    def test_variance_shift(self):
        sites = generate(GridSpec(1, 0.0, 100))
        gap = identifiability_gap(sites, WendlandModel(SmoothnessConfig(5, 1, 1)), (2.0, 1.8), (1.0, 1.8))
        assert gap > 1

    def test_bruteforce(self):
        sites = generate(GridSpec(2, 0.3, 60, seed=2))
        model = WendlandModel(SM)
        d = np.sqrt(((sites.coords[:, None] - sites.coords[None]) ** 2).sum(-1))
        a = model.value(d.ravel(), np.array([1.3, 2.2])) - model.value(d.ravel(), np.array(THETA0))
        assert identifiability_gap(sites, model, (1.3, 2.2), THETA0) == pytest.approx(np.sum(a**2) / 60, rel=1e-12)

    def test_monotone_along_axes(self):
        sites = generate(GridSpec(2, 0.3, 400, seed=3))
        model = WendlandModel(SM)
        for axis, steps in ((0, [0.1, 0.3, 0.6, 1.0]), (1, [0.1, 0.3, 0.5, 0.8])):
            gaps = []
            for s in steps:
                th = np.array(THETA0)
                th[axis] += s
                gaps.append(identifiability_gap(sites, model, th, THETA0))
            assert all(b > a for a, b in zip(gaps, gaps[1:]))
