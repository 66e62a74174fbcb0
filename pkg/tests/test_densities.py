import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from gcwm.densities import (GaussianMarginal, LogNormalMarginal, MultinomialMarginal,
                            ZipConditional, gaussian_logpdf, lognormal_logpdf,
                            multinomial_logpmf, regularize_covariance, softplus, zip_links,
                            zip_logpmf)

from conftest import random_spd


class TestGaussian:
    def test_matches_scipy(self, rng):
        for p in (1, 2, 4):
            S = random_spd(rng, p)
            mu = rng.normal(size=p)
            m = GaussianMarginal(mu, S)
            t = rng.normal(size=(20, p))
            np.testing.assert_allclose(gaussian_logpdf(t, m),
                                       stats.multivariate_normal(mu, S).logpdf(t), rtol=1e-12)

    def test_single_row_returns_float(self):
        m = GaussianMarginal([0.0], [[1.0]])
        assert gaussian_logpdf([0.0], m) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_standard_normal_at_zero(self):
        m = GaussianMarginal(np.zeros(2), np.eye(2))
        assert gaussian_logpdf(np.zeros(2), m) == pytest.approx(-math.log(2 * math.pi))

    def test_integrates_to_one(self):
        m = GaussianMarginal([1.5], [[2.3]])
        val, _ = integrate.quad(lambda t: math.exp(gaussian_logpdf([t], m)), -np.inf, np.inf,
                                epsabs=1e-12)
        assert abs(val - 1) < 1e-6

    def test_not_positive_definite(self):
        m = GaussianMarginal([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ValueError, match="positive definite"):
            gaussian_logpdf([0.0, 0.0], m)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            gaussian_logpdf([0.0, 1.0, 2.0], GaussianMarginal([0.0, 0.0], np.eye(2)))

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianMarginal([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


class TestLogNormal:
    def test_standard_at_one(self):
        m = LogNormalMarginal([0.0], [[1.0]])
        assert lognormal_logpdf([1.0], m) == pytest.approx(-0.5 * math.log(2 * math.pi),
                                                           abs=1e-15)

    def test_matches_scipy_univariate(self):
        m = LogNormalMarginal([0.4], [[0.49]])
        u = np.linspace(0.1, 6, 30)[:, None]
        ref = stats.lognorm(s=0.7, scale=math.exp(0.4)).logpdf(u[:, 0])
        np.testing.assert_allclose(lognormal_logpdf(u, m), ref, rtol=1e-12)

    def test_integrates_to_one(self):
        m = LogNormalMarginal([0.3], [[0.6]])
        f = lambda u: math.exp(lognormal_logpdf([u], m))  # noqa: E731
        val = sum(integrate.quad(f, a, b, epsabs=1e-13, limit=200)[0]
                  for a, b in ((0, 1), (1, 10), (10, np.inf)))
        assert abs(val - 1) < 1e-6

    def test_jacobian_identity(self, rng):
        S = random_spd(rng, 3, 0.1)
        mu = rng.normal(size=3)
        u = np.exp(rng.normal(size=(100, 3)))
        lhs = lognormal_logpdf(u, LogNormalMarginal(mu, S))
        rhs = gaussian_logpdf(np.log(u), GaussianMarginal(mu, S)) - np.log(u).sum(axis=1)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    def test_bivariate_integrates_to_one(self):
        m = LogNormalMarginal([0.0, 0.2], [[0.3, 0.1], [0.1, 0.2]])
        # substitute u = exp(z): the integral of the Jacobian-corrected density is 1
        f = lambda z1, z2: math.exp(lognormal_logpdf([math.exp(z1), math.exp(z2)], m)  # noqa
                                    + z1 + z2)
        val, _ = integrate.dblquad(f, -6, 6, -6, 6, epsabs=1e-10)
        assert abs(val - 1) < 1e-6

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            lognormal_logpdf([0.0], LogNormalMarginal([0.0], [[1.0]]))


class TestMultinomial:
    def test_product_of_probabilities(self):
        m = MultinomialMarginal(([0.2, 0.8], [0.1, 0.3, 0.6]))
        assert multinomial_logpmf([1, 2], m) == pytest.approx(math.log(0.8 * 0.6))

    def test_sums_to_one_over_all_cells(self):
        m = MultinomialMarginal(([0.2, 0.8], [0.1, 0.3, 0.6]))
        cells = np.array([[a, b] for a in range(2) for b in range(3)])
        assert np.exp(multinomial_logpmf(cells, m)).sum() == pytest.approx(1.0, abs=1e-15)

    def test_floor_keeps_absent_levels_finite(self):
        m = MultinomialMarginal.from_proportions([np.array([0.0, 1.0])])
        assert np.isfinite(multinomial_logpmf([0], m))
        assert m.gamma[0].sum() == pytest.approx(1.0, abs=1e-15)

    def test_invalid_vector(self):
        with pytest.raises(ValueError):
            MultinomialMarginal(([0.5, 0.6],))

    def test_code_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            multinomial_logpmf([2], MultinomialMarginal(([0.5, 0.5],)))


class TestZip:
    def test_zero_mass(self):
        z = ZipConditional([0.0], [0.0])
        # lambda = 1, psi = 0.5
        assert math.exp(zip_logpmf(0, [1.0], z)) == pytest.approx(0.5 + 0.5 * math.exp(-1))

    def test_positive_mass(self):
        z = ZipConditional([math.log(2.0)], [-1.0])
        psi = 1 / (1 + math.e)
        want = (1 - psi) * math.exp(-2) * 2 ** 3 / 6
        assert math.exp(zip_logpmf(3, [1.0], z)) == pytest.approx(want, rel=1e-13)

    def test_no_inflation_is_poisson(self):
        z = ZipConditional([0.3, -0.2])
        x = np.array([[1.0, 0.5], [1.0, 2.0]])
        y = np.array([0, 4])
        lam = np.exp(x @ z.beta)
        np.testing.assert_allclose(zip_logpmf(y, x, z), stats.poisson(lam).logpmf(y),
                                   rtol=1e-13)

    def test_exposure_offset(self):
        z = ZipConditional([0.0], [-2.0])
        lam, psi = zip_links([1.0], z, exposure=0.25)
        assert lam == pytest.approx(0.25)
        z2 = ZipConditional([0.0], [-2.0], offset_log_exposure=False)
        assert zip_links([1.0], z2, exposure=0.25)[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("beta,beta_bar", [(0.0, 0.0), (1.2, -3.0), (-2.0, 2.5),
                                                (2.5, -0.4)])
    def test_pmf_sums_to_one(self, beta, beta_bar):
        z = ZipConditional([beta], [beta_bar])
        ys = np.arange(0, 200)
        total = math.fsum(np.exp(zip_logpmf(ys, np.ones((ys.size, 1)), z)))
        assert abs(total - 1) < 1e-12

    def test_pmf_sum_mpmath(self):
        beta, beta_bar = 0.7, -0.3
        lam = mpmath.e ** beta
        psi = 1 / (1 + mpmath.e ** (-beta_bar))
        ref = [psi + (1 - psi) * mpmath.e ** (-lam)] + [
            (1 - psi) * mpmath.e ** (-lam) * lam ** y / mpmath.factorial(y) for y in range(1, 40)]
        z = ZipConditional([beta], [beta_bar])
        got = np.exp(zip_logpmf(np.arange(40), np.ones((40, 1)), z))
        np.testing.assert_allclose(got, [float(r) for r in ref], rtol=1e-13)

    def test_negative_count(self):
        with pytest.raises(ValueError):
            zip_logpmf(-1, [1.0], ZipConditional([0.0], [0.0]))


@given(st.floats(-700, 700))
def test_softplus_matches_logaddexp(x):
    assert softplus(x) == pytest.approx(np.logaddexp(0.0, x), rel=1e-14, abs=1e-300)


class TestRegularize:
    def test_leaves_well_conditioned_alone(self, rng):
        S = random_spd(rng, 3)
        np.testing.assert_array_equal(regularize_covariance(S), 0.5 * (S + S.T))

    def test_singular_gets_ridge(self):
        S = np.array([[1.0, 1.0], [1.0, 1.0]])
        R = regularize_covariance(S)
        assert np.linalg.eigvalsh(R)[0] > 0
        np.testing.assert_allclose(R - S, 1e-8 * np.eye(2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_result_is_cholesky_factorable(self, p, seed):
        r = np.random.default_rng(seed)
        A = r.normal(size=(p, max(1, p - 1)))
        np.linalg.cholesky(regularize_covariance(A @ A.T))
