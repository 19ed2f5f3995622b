import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from mdypl.core import zeta_prime
from mdypl.estimator import (
    Dataset,
    FitDivergence,
    FitError,
    FitOptions,
    MdyplFit,
    fit_mdypl,
    hat_diagonal,
    pseudo_loglik,
    pseudo_responses,
    read_dataset,
    rescale,
    sloe,
    tau_hat,
    write_dataset,
)


def random_data(n=200, p=20, seed=0, intercept=False, scale=2.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) / math.sqrt(n)
    beta = scale * rng.standard_normal(p)
    y = (rng.uniform(size=n) < zeta_prime(0.3 * intercept + X @ beta)).astype(float)
    return Dataset(y, X, intercept)


TOY_X = np.array([[1.0], [1.0], [-1.0], [-1.0]]) / math.sqrt(2)
TOY_Y = np.array([1.0, 1.0, 0.0, 0.0])


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset([0, 1, 2], np.ones((3, 1)))
        with pytest.raises(ValueError):
            Dataset([0, 1], np.ones((2, 2)))
        with pytest.raises(ValueError):
            Dataset([0, 1, 1], np.array([[1.0], [np.nan], [0.0]]))
        with pytest.raises(ValueError):
            Dataset([0, 1], np.ones((3, 1)))

    def test_intercept_design(self):
        d = random_data(10, 2, intercept=True)
        np.testing.assert_array_equal(d.design()[:, 0], 1.0)
        assert d.design().shape == (10, 3)

    def test_drop(self):
        d = random_data(10, 4)
        np.testing.assert_array_equal(d.drop([1, 3]).X, d.X[:, [0, 2]])


class TestPseudoResponses:
    def test_ml_limit(self):
        np.testing.assert_array_equal(pseudo_responses(TOY_Y, 1.0), TOY_Y)

    def test_value(self):
        assert pseudo_responses([1.0], 1 / 1.2)[0] == pytest.approx(11 / 12, abs=1e-15)

    @given(st.floats(0.01, 1.0), st.lists(st.integers(0, 1), min_size=1, max_size=50))
    def test_mean_and_range(self, alpha, y):
        y = np.array(y, dtype=float)
        ys = pseudo_responses(y, alpha)
        assert abs(ys.mean() - (alpha * y.mean() + (1 - alpha) / 2)) <= 1e-14
        assert np.all((ys >= (1 - alpha) / 2 - 1e-15) & (ys <= (1 + alpha) / 2 + 1e-15))

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            pseudo_responses(TOY_Y, 0.0)


class TestFit:
    def test_toy_golden_section_oracle(self):
        alpha = 0.5
        ys = pseudo_responses(TOY_Y, alpha)
        x = TOY_X[:, 0]
        # golden section on |score| has a kink at the root, so it resolves to
        # full precision where the flat objective itself would not
        score = lambda b: abs(np.sum(x * (ys - zeta_prime(b * x))))
        oracle = minimize_scalar(score, bracket=(0, 1, 10), method="golden",
                                 options=dict(xtol=1e-14)).x
        fit = fit_mdypl(Dataset(TOY_Y, TOY_X), alpha)
        assert abs(fit.beta_hat[0] - oracle) <= 1e-8
        # zeta'(b / sqrt 2) = 3/4 in closed form
        assert abs(fit.beta_hat[0] - math.sqrt(2) * math.log(3)) <= 1e-8

    def test_toy_separated_ml_diverges(self):
        with pytest.raises(FitDivergence):
            fit_mdypl(Dataset(TOY_Y, TOY_X), 1.0)

    def test_stationarity(self):
        for intercept in (False, True):
            d = random_data(300, 30, seed=1, intercept=intercept)
            fit = fit_mdypl(d, 0.8)
            grad = d.design().T @ (pseudo_responses(d.y, 0.8) - zeta_prime(fit.eta_hat))
            assert np.max(np.abs(grad)) <= 1e-8
            assert fit.converged and fit.gradient_norm <= 1e-8

    def test_improves_on_zero(self):
        d = random_data(seed=2)
        fit = fit_mdypl(d, 0.7)
        assert fit.loglik_pseudo >= -d.n * math.log(2)
        assert fit.loglik_pseudo == pytest.approx(
            pseudo_loglik(fit.eta_hat, pseudo_responses(d.y, 0.7)), rel=1e-14)

    def test_equivariance(self):
        d = random_data(seed=3, p=5)
        A = np.random.default_rng(9).standard_normal((5, 5)) + 3 * np.eye(5)
        fit = fit_mdypl(d, 0.6)
        fit_a = fit_mdypl(Dataset(d.y, d.X @ A), 0.6)
        np.testing.assert_allclose(fit_a.beta_hat, np.linalg.solve(A, fit.beta_hat), atol=1e-8)

    def test_prior_mode_limit(self):
        d = random_data(seed=4)
        small = fit_mdypl(d, 1e-4).beta_hat
        mid = fit_mdypl(d, 0.5).beta_hat
        assert np.linalg.norm(small) <= 1e-2 * np.linalg.norm(mid)

    def test_strict_concavity(self):
        d = random_data(60, 5, seed=5)
        fit = fit_mdypl(d, 0.9)
        w = zeta_prime(fit.eta_hat) * zeta_prime(-fit.eta_hat)
        H = -d.X.T @ (w[:, None] * d.X)
        assert np.max(np.linalg.eigvalsh(H)) < 0

    def test_shrinkage_ordering_on_separated_data(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            X = rng.standard_normal((30, 3))
            y = (X @ np.array([1.0, -1.0, 0.5]) > 0).astype(float)
            d = Dataset(y, X)
            norms = [np.linalg.norm(fit_mdypl(d, a).beta_hat) for a in (0.2, 0.5, 0.8, 0.95)]
            assert np.all(np.diff(norms) > 0)
            with pytest.raises(FitDivergence):
                fit_mdypl(d, 1.0)

    def test_iteration_cap(self):
        with pytest.raises(FitError):
            fit_mdypl(random_data(seed=7), 0.8, FitOptions(maxiter=1))

    def test_warm_start(self):
        d = random_data(seed=8)
        fit = fit_mdypl(d, 0.8)
        again = fit_mdypl(d, 0.8, start=fit.beta_hat)
        assert again.iterations <= 1
        np.testing.assert_allclose(again.beta_hat, fit.beta_hat, atol=1e-10)

    def test_coef_with_intercept(self):
        d = random_data(seed=9, intercept=True)
        fit = fit_mdypl(d, 0.8)
        assert fit.coef.size == d.p + 1
        assert fit.coef[0] == fit.theta_hat


class TestHat:
    def test_sum_and_range(self):
        for intercept in (False, True):
            d = random_data(150, 12, seed=10, intercept=intercept)
            fit = fit_mdypl(d, 0.8)
            assert abs(fit.hat_diag.sum() - (d.p + intercept)) <= 1e-8
            assert np.all((fit.hat_diag >= 0) & (fit.hat_diag < 1))

    def test_matches_explicit_matrix(self):
        d = random_data(40, 4, seed=11)
        fit = fit_mdypl(d, 0.8)
        w = zeta_prime(fit.eta_hat) * zeta_prime(-fit.eta_hat)
        H = d.X @ np.linalg.inv(d.X.T @ (w[:, None] * d.X)) @ d.X.T * w[None, :]
        np.testing.assert_allclose(hat_diagonal(d.X, fit.eta_hat), np.diag(H), atol=1e-12)

    def test_skipped_when_disabled(self):
        fit = fit_mdypl(random_data(seed=12), 0.8, FitOptions(hat=False))
        assert fit.hat_diag is None
        with pytest.raises(FitError):
            sloe(fit, random_data(seed=12))


class TestSloe:
    def test_zero_fit_printed(self):
        d = random_data(50, 5, seed=13)
        eta = np.zeros(d.n)
        h = hat_diagonal(d.X, eta)
        fit = MdyplFit(0.8, np.zeros(d.p), eta, h, 0.0, 0.0, 0, True)
        s = -h / (1 - h) * (d.y - 0.5)
        assert sloe(fit, d, squared=True, variant="printed") == pytest.approx(np.var(s), rel=1e-14)

    def test_zero_fit_loo(self):
        d = random_data(50, 5, seed=13)
        eta = np.zeros(d.n)
        h = hat_diagonal(d.X, eta)
        fit = MdyplFit(0.8, np.zeros(d.p), eta, h, 0.0, 0.0, 0, True)
        s = -h / (0.25 * (1 - h)) * (pseudo_responses(d.y, 0.8) - 0.5)
        assert sloe(fit, d, squared=True) == pytest.approx(np.var(s), rel=1e-14)

    def test_square_root(self):
        d = random_data(seed=14)
        fit = fit_mdypl(d, 0.8)
        assert sloe(fit, d) ** 2 == pytest.approx(sloe(fit, d, squared=True), rel=1e-14)

    def test_row_permutation_invariance(self):
        d = random_data(seed=15)
        perm = np.random.default_rng(1).permutation(d.n)
        dp = Dataset(d.y[perm], d.X[perm])
        for variant in ("loo", "printed"):
            a = sloe(fit_mdypl(d, 0.8), d, variant=variant)
            b = sloe(fit_mdypl(dp, 0.8), dp, variant=variant)
            assert abs(a - b) <= 1e-12

    def test_loo_matches_refits(self):
        # the one-step correction approximates leave-one-out predictors x_j^T beta_(-j)
        d = random_data(120, 10, seed=16)
        fit = fit_mdypl(d, 0.8)
        h, eta = fit.hat_diag, fit.eta_hat
        w = zeta_prime(eta) * zeta_prime(-eta)
        s = eta - h / (w * (1 - h)) * (pseudo_responses(d.y, 0.8) - zeta_prime(eta))
        for j in range(5):
            keep = np.arange(d.n) != j
            loo = fit_mdypl(Dataset(d.y[keep], d.X[keep]), 0.8, FitOptions(hat=False))
            assert abs(d.X[j] @ loo.beta_hat - s[j]) <= 0.05 * max(1.0, abs(s[j]))

    def test_hat_near_one_rejected(self):
        d = random_data(30, 5, seed=17)
        fit = fit_mdypl(d, 0.8)
        fit.hat_diag = fit.hat_diag.copy()
        fit.hat_diag[0] = 1.0
        with pytest.raises(FitError):
            sloe(fit, d)

    def test_unknown_variant(self):
        d = random_data(seed=18)
        with pytest.raises(ValueError):
            sloe(fit_mdypl(d, 0.8), d, variant="other")


class TestTau:
    def test_orthogonal_design(self):
        n, p = 64, 8
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((n, p)))
        X = Q * math.sqrt(n)
        np.testing.assert_allclose(tau_hat(X) ** 2, n / (n - p + 1), rtol=1e-12)

    def test_regression_definition(self):
        rng = np.random.default_rng(1)
        n, p = 50, 6
        X = rng.standard_normal((n, p))
        for j in range(p):
            others = np.delete(X, j, axis=1)
            coef, *_ = np.linalg.lstsq(others, X[:, j], rcond=None)
            rss = np.sum((X[:, j] - others @ coef) ** 2)
            assert tau_hat(X)[j] ** 2 == pytest.approx(rss / (n - p + 1), rel=1e-10)

    def test_single_column(self):
        x = np.random.default_rng(2).standard_normal((40, 1))
        np.testing.assert_allclose(tau_hat(x) ** 2, np.sum(x ** 2) / 40, rtol=1e-12)

    def test_equicorrelated(self):
        rng = np.random.default_rng(3)
        n, p, rho = 2000, 20, 0.5
        L = np.linalg.cholesky((1 - rho) * np.eye(p) + rho * np.ones((p, p)))
        est = np.array([tau_hat(rng.standard_normal((n, p)) @ L.T) ** 2 for _ in range(20)])
        target = (p + 1) / (2 * p)
        mean, se = est.mean(), est.std() / math.sqrt(est.size)
        assert abs(mean - target) <= 3 * se + 1e-3

    def test_singular(self):
        X = np.random.default_rng(4).standard_normal((20, 3))
        X = np.column_stack([X, X[:, 0]])
        with pytest.raises(np.linalg.LinAlgError):
            tau_hat(X)


class TestRescale:
    def test_identity_and_linearity(self):
        b = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(rescale(b, 1.0), b)
        np.testing.assert_allclose(rescale(3 * b, 0.8), 3 * rescale(b, 0.8), rtol=1e-15)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            rescale(np.ones(2), 1e-9)


class TestIO:
    @pytest.mark.parametrize("suffix", [".csv", ".npz"])
    def test_round_trip(self, tmp_path, suffix):
        d = random_data(20, 3, seed=19)
        path = str(tmp_path / f"data{suffix}")
        write_dataset(path, d)
        back = read_dataset(path)
        np.testing.assert_array_equal(back.y, d.y)
        np.testing.assert_array_equal(back.X, d.X)

    def test_missing_response(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_dataset(str(path))

    def test_response_column_anywhere(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,y,x2\n0.5,1,2\n-1,0,3\n2,1,0.25\n")
        d = read_dataset(str(path))
        np.testing.assert_array_equal(d.y, [1, 0, 1])
        np.testing.assert_array_equal(d.X, [[0.5, 2], [-1, 3], [2, 0.25]])
