import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from narsmc.data import Dataset, Family, Measurement, ModelFormula, Role, VariableSpec
from narsmc.glm import (
    ConvergenceError,
    FitError,
    RankDeficiencyError,
    bernoulli_logpmf,
    density,
    draw_params,
    fit,
    gaussian_logpdf,
    predict_mean,
    predict_mean_rows,
    wirls_batch,
    wols_batch,
)

Y = VariableSpec("y", Role.OUTCOME, Measurement.CONTINUOUS)
YB = VariableSpec("y", Role.OUTCOME, Measurement.BINARY)
X = VariableSpec("x", Role.EXPOSURE, Measurement.BINARY)
XC = VariableSpec("x", Role.EXPOSURE, Measurement.CONTINUOUS)
C = VariableSpec("c", Role.COMPLETE_CONFOUNDER, Measurement.CONTINUOUS)


def dataset(y, x, c=None, binary_y=False, binary_x=True):
    cols = [YB if binary_y else Y, X if binary_x else XC]
    arrays = [np.asarray(y, float), np.asarray(x, float)]
    if c is not None:
        cols.append(C)
        arrays.append(np.asarray(c, float))
    return Dataset(cols, np.column_stack(arrays))


GAUSS = ModelFormula("y", ("x",))
LOGIT = ModelFormula("y", ("x",), family=Family.BERNOULLI)


class TestFit:
    def test_two_points_determine_line(self):
        d = dataset([0.0, 2.0], [0, 1])
        res = fit(GAUSS, d)
        assert res.coef == pytest.approx([0.0, 2.0], abs=1e-12)
        assert res.dispersion == 0.0

    def test_weights_match_replicated_rows(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=6)
        x = rng.integers(0, 2, 6).astype(float)
        c = rng.normal(size=6)
        d = dataset(y, x, c)
        w = np.array([2.0, 1, 3, 1, 2, 1])
        rep = np.repeat(np.arange(6), w.astype(int))
        d_rep = dataset(y[rep], x[rep], c[rep])
        f = ModelFormula("y", ("x", "c"))
        a = fit(f, d, weights=w)
        b = fit(f, d_rep)
        assert a.coef == pytest.approx(b.coef, abs=1e-10)
        assert a.dispersion == pytest.approx(b.dispersion, abs=1e-10)
        assert a.covariance == pytest.approx(b.covariance, abs=1e-10)

    def test_separation_reported_as_nonconvergence(self):
        d = dataset([1, 1, 1, 1, 1], [0, 1, 0, 1, 0], binary_y=True)
        with pytest.raises(ConvergenceError):
            fit(LOGIT, d)

    def test_rank_deficiency_names_column(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 2, 20).astype(float)
        d = dataset(rng.normal(size=20), x, x)  # c duplicates x
        with pytest.raises(RankDeficiencyError, match="'c'"):
            fit(ModelFormula("y", ("x", "c")), d)

    def test_too_few_rows(self):
        d = dataset([0.0, 2.0], [0, 1])
        with pytest.raises(FitError, match="at least"):
            fit(ModelFormula("y", ("x",)), d, row_filter=np.array([True, False]))

    def test_logit_matches_brute_force_likelihood(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=300)
        p = expit(-0.4 + 0.9 * x)
        y = (rng.random(300) < p).astype(float)
        d = dataset(y, x, binary_y=True, binary_x=False)
        res = fit(LOGIT, d)

        def nll(beta):
            eta = beta[0] + beta[1] * x
            return -np.sum(y * eta - np.logaddexp(0.0, eta))

        brute = minimize(nll, np.zeros(2), method="Nelder-Mead", options={"xatol": 1e-8, "fatol": 1e-12})
        assert res.coef == pytest.approx(brute.x, abs=1e-4)

    def test_logit_score_equation_zero_at_mle(self):
        rng = np.random.default_rng(9)
        x = rng.integers(0, 2, 400).astype(float)
        c = rng.normal(size=400)
        y = (rng.random(400) < expit(0.3 * x - 0.5 * c)).astype(float)
        d = dataset(y, x, c, binary_y=True)
        f = ModelFormula("y", ("x", "c"), family=Family.BERNOULLI)
        res = fit(f, d)
        Xmat = np.column_stack([np.ones(400), x, c])
        mu = expit(Xmat @ res.coef)
        assert np.max(np.abs(Xmat.T @ (y - mu))) < 1e-6

    def test_gaussian_scale_consistency(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=100)
        y = 1.0 + 0.5 * x + rng.normal(size=100)
        d1 = dataset(y, x, binary_x=False)
        d2 = dataset(3.0 * y, x, binary_x=False)
        a = fit(GAUSS, d1)
        b = fit(GAUSS, d2)
        assert b.coef == pytest.approx(3.0 * a.coef, abs=1e-10)
        assert b.dispersion == pytest.approx(9.0 * a.dispersion, abs=1e-10)


class TestDrawParams:
    def test_zero_covariance_returns_coef(self):
        d = dataset([0.0, 2.0], [0, 1])
        res = fit(GAUSS, d)  # saturated: dispersion 0, covariance 0
        coef, disp = draw_params(res, np.random.default_rng(0))
        assert np.array_equal(coef, res.coef) and disp == 0.0

    def test_same_seed_same_draw(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=50)
        y = 1.0 + 2.0 * x + rng.normal(size=50)
        res = fit(GAUSS, dataset(y, x, binary_x=False))
        a = draw_params(res, np.random.default_rng(99))
        b = draw_params(res, np.random.default_rng(99))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_draw_mean_recovers_coef(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=200)
        y = 1.0 + 2.0 * x + rng.normal(size=200)
        res = fit(GAUSS, dataset(y, x, binary_x=False))
        draws = np.array([draw_params(res, rng)[0] for _ in range(10_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - res.coef) < 3.5 * se)


class TestPredictAndDensity:
    def test_identity_prediction(self):
        d = dataset([0.0, 2.0], [0, 1])
        res = fit(GAUSS, d)
        assert predict_mean(res, d, 1) == pytest.approx(2.0)

    def test_logit_intercept_only_half(self):
        d = dataset([1, 0, 1, 0], [0, 1, 1, 0], binary_y=True)
        res = fit(ModelFormula("y", (), family=Family.BERNOULLI), d)
        assert predict_mean(res, d, 0) == pytest.approx(0.5, abs=1e-9)

    def test_logit_saturates_without_overflow(self):
        from narsmc.glm import GlmFit

        base = dataset([1.0, 0.0, 1.0, 0.0], [1, 0, 1, 0], binary_y=True)
        gf = GlmFit(LOGIT, np.array([0.0, 1e6]), np.zeros((2, 2)), 1.0, 4, 2.0)
        assert abs(predict_mean(gf, base, 0) - 1.0) < 1e-12

    def test_gaussian_density_standard_normal(self):
        from narsmc.glm import GlmFit

        gf = GlmFit(GAUSS, np.array([0.0, 0.0]), np.zeros((2, 2)), 1.0, 10, 8.0)
        d = dataset([0.0, 1.0], [0, 1])
        assert density(gf, d, 0, 0.0) == pytest.approx(0.3989422804, abs=1e-9)

    def test_gaussian_density_closed_form(self):
        from narsmc.glm import GlmFit

        gf = GlmFit(GAUSS, np.array([1.0, 0.0]), np.zeros((2, 2)), 4.0, 10, 8.0)
        d = dataset([0.0, 1.0], [0, 1])
        expected = np.exp(-0.5) / np.sqrt(8.0 * np.pi)
        assert density(gf, d, 0, 3.0) == pytest.approx(expected, abs=1e-7)

    def test_bernoulli_density_definition(self):
        from narsmc.glm import GlmFit

        eta = np.log(0.25 / 0.75)
        gf = GlmFit(LOGIT, np.array([eta, 0.0]), np.zeros((2, 2)), 1.0, 4, 2.0)
        d = dataset([1.0, 0.0], [0, 1], binary_y=True)
        assert density(gf, d, 0, 1.0) == pytest.approx(0.25, abs=1e-12)
        assert density(gf, d, 0, 0.0) + density(gf, d, 0, 1.0) == pytest.approx(1.0)

    def test_gaussian_density_integrates_to_one(self):
        from narsmc.glm import GlmFit

        gf = GlmFit(GAUSS, np.array([0.7, -0.2]), np.zeros((2, 2)), 2.5, 10, 8.0)
        d = dataset([0.0, 1.0], [0, 1])
        mu = predict_mean(gf, d, 0)
        sd = np.sqrt(2.5)
        ys = np.linspace(mu - 10 * sd, mu + 10 * sd, 20_001)
        dens = np.array([density(gf, d, 0, y) for y in ys])
        assert np.trapezoid(dens, ys) == pytest.approx(1.0, abs=1e-6)

    def test_nonpositive_variance_rejected(self):
        from narsmc.glm import GlmFit

        gf = GlmFit(GAUSS, np.array([0.0, 0.0]), np.zeros((2, 2)), 0.0, 10, 8.0)
        d = dataset([0.0, 1.0], [0, 1])
        with pytest.raises(FitError, match="variance"):
            density(gf, d, 0, 0.0)


class TestBatchedRoutes:
    def test_wols_matches_single_fits(self):
        rng = np.random.default_rng(21)
        B, n = 7, 60
        Xb = np.concatenate(
            [np.ones((B, n, 1)), rng.normal(size=(B, n, 2))], axis=2
        )
        yb = rng.normal(size=(B, n))
        beta, sigma2, cov, df = wols_batch(Xb, yb, want_cov=True)
        for b in range(B):
            ref = np.linalg.lstsq(Xb[b], yb[b], rcond=None)[0]
            assert beta[b] == pytest.approx(ref, abs=1e-9)
            resid = yb[b] - Xb[b] @ ref
            assert sigma2[b] == pytest.approx(resid @ resid / (n - 3), abs=1e-9)

    def test_wirls_matches_single_fits(self):
        rng = np.random.default_rng(22)
        B, n = 5, 200
        Xb = np.concatenate([np.ones((B, n, 1)), rng.normal(size=(B, n, 2))], axis=2)
        etas = np.einsum("bnk,k->bn", Xb, np.array([0.2, -0.7, 0.4]))
        yb = (rng.random((B, n)) < expit(etas)).astype(float)
        beta, converged, cov, df = wirls_batch(Xb, yb, want_cov=True)
        assert converged.all()
        for b in range(B):
            d = Dataset(
                [YB, VariableSpec("x1", Role.EXPOSURE, Measurement.CONTINUOUS),
                 VariableSpec("x2", Role.COMPLETE_CONFOUNDER, Measurement.CONTINUOUS)],
                np.column_stack([yb[b], Xb[b, :, 1], Xb[b, :, 2]]),
            )
            ref = fit(ModelFormula("y", ("x1", "x2"), family=Family.BERNOULLI), d)
            assert beta[b] == pytest.approx(ref.coef, abs=1e-7)

    def test_weighted_counts_match_resampled_rows(self):
        rng = np.random.default_rng(23)
        n = 40
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.normal(size=n)
        counts = rng.multinomial(n, np.full(n, 1.0 / n))
        beta_w, *_ = wols_batch(X[None], y[None], counts[None].astype(float))
        rows = np.repeat(np.arange(n), counts)
        ref = np.linalg.lstsq(X[rows], y[rows], rcond=None)[0]
        assert beta_w[0] == pytest.approx(ref, abs=1e-9)


def test_log_density_helpers_match_direct():
    assert gaussian_logpdf(0.0, 0.0, 1.0) == pytest.approx(np.log(0.3989422804), abs=1e-8)
    eta = np.array([800.0, -800.0])
    vals = bernoulli_logpmf(np.array([1.0, 1.0]), eta)
    assert vals[0] == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(vals[1])
