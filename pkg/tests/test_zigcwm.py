import numpy as np
import pytest
from scipy import optimize
from scipy.special import expit

from gcwm.data import CovariateSpec, Dataset, DesignSpec
from gcwm.densities import zip_logpmf, ZipConditional
from gcwm.em import InitStrategy, fit_gcwm, observed_loglik
from gcwm.errors import InputError
from gcwm.metrics import confusion_report
from gcwm.simulate import toy_dataset
from gcwm.zigcwm import (bp_candidates, fit_zigcwm, fit_zip_cluster, zip_em, zip_information,
                         zip_posterior_zero)

DESIGN = DesignSpec(("T",))
FAST = InitStrategy(n_random=2, seed=0)


def _zip_sample(rng, n, beta, beta_bar):
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    lam = np.exp(X @ beta)
    psi = expit(X @ beta_bar)
    y = np.where(rng.random(n) < psi, 0, rng.poisson(lam)).astype(float)
    return X, y


class TestPosteriorZero:
    def test_zero_predictors(self):
        assert zip_posterior_zero([0.0], [0.0], [0.0])[0] == pytest.approx(0.731059, abs=5e-7)

    def test_positive_counts_are_zero(self):
        np.testing.assert_array_equal(zip_posterior_zero([1, 5, 0], [0.3, 2.0, 0.1],
                                                         [4.0, 9.0, -1.0])[:2], 0.0)


class TestZipEm:
    def test_matches_numeric_maximizer(self, rng):
        X, y = _zip_sample(rng, 800, [0.5, 0.4], [-0.7, 0.8])
        fit = zip_em(X, X, y)

        def negll(theta):
            z = ZipConditional(theta[:2], theta[2:])
            return -np.sum(zip_logpmf(y, X, z, 1.0, X))

        ref = optimize.minimize(negll, np.zeros(4), method="BFGS",
                                options={"gtol": 1e-9}).x
        np.testing.assert_allclose(np.r_[fit.beta, fit.beta_bar], ref, atol=1e-4)
        assert fit.loglik == pytest.approx(-negll(ref), abs=1e-6)

    def test_inner_loglik_monotone(self, rng):
        X, y = _zip_sample(rng, 500, [0.2, 0.5], [-0.3, -0.5])
        tr = zip_em(X, X, y, weights=rng.uniform(0.1, 1, 500)).loglik_trace
        assert np.all(np.diff(tr) >= -1e-8)

    def test_information_matches_numeric_hessian(self, rng):
        X, y = _zip_sample(rng, 400, [0.3, 0.2], [-1.0, 0.5])
        w = rng.uniform(0.5, 1.5, 400)
        fit = zip_em(X, X, y, w)

        def ll(theta):
            z = ZipConditional(theta[:2], theta[2:])
            return np.sum(w * zip_logpmf(y, X, z, 1.0, X))

        theta = np.r_[fit.beta, fit.beta_bar]
        h = 1e-4
        H = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                e_i, e_j = np.eye(4)[i] * h, np.eye(4)[j] * h
                H[i, j] = (ll(theta + e_i + e_j) - ll(theta + e_i - e_j)
                           - ll(theta - e_i + e_j) + ll(theta - e_i - e_j)) / (4 * h * h)
        info = zip_information(X, X, y, w, X @ fit.beta, X @ fit.beta_bar)
        np.testing.assert_allclose(info, -H, rtol=1e-4, atol=1e-3)

    def test_no_zeros_reduces_to_poisson(self, rng):
        X = np.column_stack([np.ones(50), rng.normal(size=50)])
        fit = zip_em(X, X, rng.poisson(3, 50) + 1.0)
        assert not fit.inflated and "no-zeros" in fit.flags
        np.testing.assert_array_equal(fit.zstar, 0.0)

    def test_all_zeros_flagged(self):
        X = np.ones((20, 1))
        fit = zip_em(X, X, np.zeros(20))
        assert "all-zeros" in fit.flags and np.isfinite(fit.loglik)

    def test_rejects_noninteger(self):
        with pytest.raises(InputError):
            zip_em(np.ones((2, 1)), np.ones((2, 1)), [0.5, 1.0])

    def test_coverage_of_true_coefficients(self):
        truth = np.array([0.6, 0.3, -0.8, 0.5])
        hits = 0
        for seed in range(100):
            X, y = _zip_sample(np.random.default_rng(seed), 2000, truth[:2], truth[2:])
            fit = zip_em(X, X, y)
            est = np.r_[fit.beta, fit.beta_bar]
            hits += np.all(np.abs(est - truth) <= 3 * fit.std_errors)
        assert hits >= 90

    def test_fit_zip_cluster_uses_claim_weights(self, rng):
        sim = toy_dataset("zip-frequency", 1, 300, seed=4).dataset
        doubled = Dataset.from_columns(sim.specs, sim.columns(), sim.response,
                                       claim_weights=np.full(sim.n, 2.0))
        a = fit_zip_cluster(sim, np.ones(sim.n), DESIGN)
        b = fit_zip_cluster(doubled, np.full(sim.n, 0.5), DESIGN)
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-6)


class TestFitZigcwm:
    def test_nesting_single_component(self):
        ds = toy_dataset("zip-frequency", 1, 300, seed=2).dataset
        zi = fit_zigcwm(ds, 1, DESIGN, FAST, zero_inflation=False)
        pois = fit_gcwm(ds, 1, "poisson-frequency", DESIGN, FAST)
        assert zi.loglik == pytest.approx(pois.loglik, abs=1e-8)

    def test_no_zeros_is_poisson_gcwm(self):
        base = toy_dataset("poisson-frequency", 2, 300, seed=3).dataset
        ds = base.with_response(base.response + 1)
        zi = fit_zigcwm(ds, 2, DESIGN, FAST)
        pois = fit_gcwm(ds, 2, "poisson-frequency", DESIGN, FAST)
        assert zi.loglik == pytest.approx(pois.loglik, rel=1e-12)
        assert all(not c.zip.inflated for c in zi.components)

    @pytest.mark.parametrize("partition", ["bp", "poisson", "bernoulli"])
    def test_partitions_and_metadata(self, partition):
        ds = toy_dataset("zip-frequency", 2, 400, seed=5).dataset
        model = fit_zigcwm(ds, 2, DESIGN, FAST, partition=partition)
        assert model.response_kind == "zip-frequency"
        assert model.metadata["partition"] == partition
        assert len(model.metadata["lr_tests"]) == 2
        assert observed_loglik(ds, model) == pytest.approx(model.loglik, rel=1e-12)
        np.testing.assert_allclose(model.posteriors.sum(axis=1), 1.0, atol=1e-10)

    def test_bp_picks_highest_candidate(self):
        ds = toy_dataset("zip-frequency", 2, 400, seed=6).dataset
        model = fit_zigcwm(ds, 2, DESIGN, FAST)
        scores = model.metadata["bp_candidate_logliks"]
        assert model.loglik == max(scores.values())
        assert model.metadata["bp_choice"] in ("poisson", "bernoulli", "average")

    def test_bp_candidates_aligned(self):
        ds = toy_dataset("zip-frequency", 2, 400, seed=6).dataset
        fits = {k: fit_gcwm(ds, 2, kind, DESIGN, FAST) for k, kind in
                (("poisson", "poisson-frequency"), ("bernoulli", "bernoulli-zero"))}
        c = bp_candidates(fits)
        np.testing.assert_allclose(c["average"], 0.5 * (c["poisson"] + c["bernoulli"]))
        flipped = {"poisson": fits["poisson"],
                   "bernoulli": fits["bernoulli"].permuted([1, 0])}
        np.testing.assert_allclose(bp_candidates(flipped)["bernoulli"], c["bernoulli"])

    def test_refine_does_not_lower_loglik(self):
        ds = toy_dataset("zip-frequency", 2, 400, seed=7).dataset
        frozen = fit_zigcwm(ds, 2, DESIGN, FAST, partition="poisson")
        refined = fit_zigcwm(ds, 2, DESIGN, FAST, partition="poisson", refine=True)
        assert refined.loglik >= frozen.loglik - 1e-8
        assert np.all(np.diff(refined.loglik_trace) >= -1e-8)

    def test_unknown_partition(self):
        ds = toy_dataset("zip-frequency", 2, 200, seed=1).dataset
        with pytest.raises(InputError, match="partition"):
            fit_zigcwm(ds, 2, DESIGN, FAST, partition="random")

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 300)
        t = rng.normal(10.0 * labels, 1.0)
        y = np.where(rng.random(600) < 0.3, 0, rng.poisson(np.where(labels, 4.0, 1.0)))
        ds = Dataset.from_columns([CovariateSpec("T", "gaussian")], {"T": t}, y)
        model = fit_zigcwm(ds, 2, DesignSpec(), FAST)
        assert confusion_report(labels, model.labels).misclassification == 0.0
