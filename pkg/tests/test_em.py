import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import logsumexp

from gcwm.data import DesignSpec
from gcwm.em import (COLLAPSE_FRACTION, InitStrategy, StopRule, aitken_converged, estep,
                     fit_gcwm, hard_labels, mstep, observed_loglik, refit_from)
from gcwm.errors import CollapseError, InputError, SizingError
from gcwm.glm import fit_gaussian_weighted, fit_poisson_weighted
from gcwm.simulate import toy_dataset

DESIGN = DesignSpec(("T",))
KINDS = ("gaussian-severity", "poisson-frequency", "bernoulli-zero", "zip-frequency")


def _reference_loglik(ds, model):
    """Direct evaluation of the mixture density with scipy distributions."""
    t, u, w, y = ds.gaussian[:, 0], ds.lognormal[:, 0], ds.discrete[:, 0], ds.response
    X = np.column_stack([np.ones(ds.n), t])
    cols = []
    for c in model.components:
        g = c.glm
        eta = X @ g.coefficients
        if model.response_kind == "gaussian-severity":
            lq = stats.norm(eta, np.sqrt(g.dispersion)).logpdf(y)
        else:
            lq = stats.poisson(np.exp(eta)).logpmf(y)
        lt = stats.norm(c.gaussian.mu[0], np.sqrt(c.gaussian.sigma[0, 0])).logpdf(t)
        lu = stats.lognorm(s=np.sqrt(c.lognormal.sigma[0, 0]),
                           scale=np.exp(c.lognormal.mu[0])).logpdf(u)
        lw = np.log(c.discrete.gamma[0][w])
        cols.append(np.log(c.tau) + lq + lt + lu + lw)
    L = np.column_stack(cols)
    return logsumexp(L, axis=1).sum(), np.exp(L - logsumexp(L, axis=1)[:, None])


@pytest.fixture(scope="module")
def severity_fit():
    ds = toy_dataset("gaussian-severity", 2, 300, seed=3).dataset
    return ds, fit_gcwm(ds, 2, "gaussian-severity", DESIGN, InitStrategy(n_random=3, seed=1))


class TestEstep:
    @pytest.mark.parametrize("kind", ["gaussian-severity", "poisson-frequency"])
    def test_matches_direct_density(self, kind):
        ds = toy_dataset(kind, 2, 300, seed=5).dataset
        model = fit_gcwm(ds, 2, kind, DESIGN, InitStrategy(n_random=2, seed=0))
        ll, post = _reference_loglik(ds, model)
        assert model.loglik == pytest.approx(ll, rel=1e-10)
        np.testing.assert_allclose(estep(ds, model), post, atol=1e-10)
        assert observed_loglik(ds, model) == pytest.approx(ll, rel=1e-10)

    def test_rows_sum_to_one(self, severity_fit):
        ds, model = severity_fit
        np.testing.assert_allclose(estep(ds, model).sum(axis=1), 1.0, atol=1e-12)

    def test_schema_mismatch(self, severity_fit):
        ds, model = severity_fit
        with pytest.raises(InputError, match="schema"):
            estep(ds.as_cwm(), model)


class TestMstep:
    def test_weighted_statistics(self, severity_fit):
        ds, model = severity_fit
        post = model.posteriors
        comps = mstep(ds, post, "gaussian-severity", DESIGN)
        t, logu, w = ds.gaussian[:, 0], np.log(ds.lognormal[:, 0]), ds.discrete[:, 0]
        for k, c in enumerate(comps):
            z = post[:, k]
            assert c.tau == pytest.approx(z.mean(), rel=1e-12)
            mt = np.average(t, weights=z)
            assert c.gaussian.mu[0] == pytest.approx(mt, rel=1e-12)
            assert c.gaussian.sigma[0, 0] == pytest.approx(np.average((t - mt) ** 2, weights=z),
                                                           rel=1e-10)
            mu = np.average(logu, weights=z)
            assert c.lognormal.mu[0] == pytest.approx(mu, rel=1e-12)
            props = np.bincount(w, weights=z, minlength=3) / z.sum()
            np.testing.assert_allclose(c.discrete.gamma[0], props, rtol=1e-9, atol=1e-9)
            ref = fit_gaussian_weighted(np.column_stack([np.ones(ds.n), t]), ds.response, z)
            np.testing.assert_allclose(c.glm.coefficients, ref.coefficients, rtol=1e-10)

    def test_label_swap_equivariance(self, severity_fit):
        ds, model = severity_fit
        a = mstep(ds, model.posteriors, "gaussian-severity", DESIGN)
        b = mstep(ds, model.posteriors[:, ::-1], "gaussian-severity", DESIGN)
        for ca, cb in zip(a, b[::-1]):
            assert ca.tau == pytest.approx(cb.tau, rel=1e-12)
            np.testing.assert_allclose(ca.glm.coefficients, cb.glm.coefficients, rtol=1e-10)

    def test_claim_weight_scale_leaves_coefficients(self):
        ds = toy_dataset("gaussian-severity", 2, 200, seed=8).dataset
        post = np.column_stack([np.linspace(0.1, 0.9, 200), np.linspace(0.9, 0.1, 200)])
        scaled = type(ds).from_columns(ds.specs, ds.columns(), ds.response,
                                       claim_weights=np.full(ds.n, 4.0))
        a = mstep(ds, post, "gaussian-severity", DESIGN)
        b = mstep(scaled, post, "gaussian-severity", DESIGN)
        for ca, cb in zip(a, b):
            np.testing.assert_allclose(ca.glm.coefficients, cb.glm.coefficients, rtol=1e-10)

    def test_collapse_detected(self):
        ds = toy_dataset("poisson-frequency", 2, 200, seed=2).dataset
        post = np.zeros((200, 2))
        post[:, 0] = 1.0
        with pytest.raises(CollapseError) as err:
            mstep(ds, post, "poisson-frequency", DESIGN)
        assert err.value.threshold == pytest.approx(COLLAPSE_FRACTION * 200 / 2)

    def test_rejects_unnormalized(self):
        ds = toy_dataset("poisson-frequency", 2, 50, seed=2).dataset
        with pytest.raises(InputError):
            mstep(ds, np.full((50, 2), 0.3), "poisson-frequency", DESIGN)


class TestFit:
    @pytest.mark.parametrize("kind", KINDS)
    def test_loglik_monotone(self, kind):
        ds = toy_dataset(kind, 2, 300, seed=11).dataset
        model = fit_gcwm(ds, 2, kind, DESIGN, InitStrategy(n_random=2, seed=4))
        assert np.all(np.diff(model.loglik_trace) >= -1e-8 * abs(model.loglik))
        assert model.converged

    def test_single_component_is_glm(self):
        ds = toy_dataset("poisson-frequency", 1, 200, seed=1).dataset
        model = fit_gcwm(ds, 1, "poisson-frequency", DESIGN)
        X = np.column_stack([np.ones(200), ds.gaussian[:, 0]])
        ref = fit_poisson_weighted(X, ds.response)
        np.testing.assert_allclose(model.components[0].glm.coefficients, ref.coefficients,
                                   rtol=1e-10)
        assert model.components[0].tau == 1.0

    def test_deterministic_given_seed(self):
        ds = toy_dataset("gaussian-severity", 2, 200, seed=6).dataset
        a = fit_gcwm(ds, 2, "gaussian-severity", DESIGN, InitStrategy(n_random=2, seed=9))
        b = fit_gcwm(ds, 2, "gaussian-severity", DESIGN, InitStrategy(n_random=2, seed=9))
        assert a.loglik_trace == b.loglik_trace

    def test_sizing_refused(self):
        ds = toy_dataset("poisson-frequency", 2, 30, seed=1).dataset
        with pytest.raises(SizingError, match="at least 40"):
            fit_gcwm(ds, 4, "poisson-frequency", DESIGN)

    def test_user_labels(self):
        sim = toy_dataset("gaussian-severity", 2, 200, seed=6)
        model = fit_gcwm(sim.dataset, 2, "gaussian-severity", DESIGN,
                         InitStrategy(labels=sim.labels))
        assert model.metadata["restarts"] == 1
        assert np.mean(model.labels == sim.labels) > 0.9

    def test_refit_from_is_fixed_point(self, severity_fit):
        ds, model = severity_fit
        again = refit_from(ds, model, StopRule(tol=1e-9))
        assert again.loglik >= model.loglik - 1e-8
        assert again.loglik == pytest.approx(model.loglik, rel=1e-6)

    def test_parameter_count(self, severity_fit):
        _, model = severity_fit
        # 1 mixing + 2 x (2 coefficients + variance + 2 gaussian + 2 lognormal + 2 discrete)
        assert model.n_params == 1 + 2 * 9

    def test_bad_response_kind(self, severity_fit):
        ds, _ = severity_fit
        with pytest.raises(InputError):
            fit_gcwm(ds, 2, "gamma-severity")


class TestAitken:
    def test_geometric_sequence_converges(self):
        # l_j = 10 - 0.5^j has asymptote 10
        l = [10 - 0.5 ** j for j in range(30)]
        first = next(j for j in range(2, 30) if aitken_converged(l[j - 2], l[j - 1], l[j], 1e-5))
        assert 10 - l[first - 1] < 1e-4

    def test_flat_sequence_stops(self):
        assert aitken_converged(1.0, 1.0, 1.0, 1e-5)

    def test_accelerating_sequence_continues(self):
        assert not aitken_converged(0.0, 1.0, 3.0, 1e-5)


@settings(max_examples=30)
@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=20))
def test_hard_labels_lowest_index_on_ties(rows):
    P = np.array(rows)
    lab = hard_labels(P)
    for i, row in enumerate(P):
        assert lab[i] == int(np.flatnonzero(row == row.max())[0])
