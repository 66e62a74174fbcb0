import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from gcwm.data import DesignSpec
from gcwm.em import InitStrategy, fit_gcwm
from gcwm.errors import ConvergenceError, InputError, NestingError, SizingError
from gcwm.selection import (InfoCriteria, boundary_mixture_quantile, chi2_quantile,
                            format_selection_table, select_k, selection_table_csv,
                            zero_inflation_lr_test)
from gcwm.simulate import toy_dataset

DESIGN = DesignSpec(("T",))


class TestInfoCriteria:
    def test_worked_values(self):
        c = InfoCriteria(-100.0, 5, 100)
        assert c.aic == 210.0
        assert c.bic == pytest.approx(223.026, abs=5e-4)

    def test_one_extra_parameter_costs_log_n(self):
        a, b = InfoCriteria(-50.0, 4, 250), InfoCriteria(-50.0, 5, 250)
        assert b.bic - a.bic == pytest.approx(math.log(250), rel=1e-14)

    @given(st.floats(-1e5, 0), st.floats(-1e5, 0), st.floats(-1e3, 1e3))
    def test_bic_order_invariant_to_shift(self, l1, l2, c):
        a, b = InfoCriteria(l1, 3, 100), InfoCriteria(l2, 3, 100)
        a2, b2 = InfoCriteria(l1 + c, 3, 100), InfoCriteria(l2 + c, 3, 100)
        if abs(l1 - l2) > 1e-6:
            assert (a.bic < b.bic) == (a2.bic < b2.bic)

    def test_nested_fits(self):
        ds = toy_dataset("poisson-frequency", 2, 300, seed=3).dataset
        small = fit_gcwm(ds, 1, "poisson-frequency", DesignSpec())
        large = fit_gcwm(ds, 1, "poisson-frequency", DESIGN)
        assert large.loglik >= small.loglik


class TestQuantiles:
    @pytest.mark.parametrize("p,df", [(0.9, 1), (0.9, 2), (0.95, 6), (0.5, 10), (0.999, 3)])
    def test_matches_scipy(self, p, df):
        assert chi2_quantile(p, df) == pytest.approx(stats.chi2.ppf(p, df), rel=1e-9)

    def test_critical_values(self):
        assert boundary_mixture_quantile(0.95, 2) == pytest.approx(4.605, abs=1e-3)
        assert boundary_mixture_quantile(0.95, 6) == pytest.approx(10.645, abs=1e-3)

    def test_critical_increasing_in_m(self):
        crit = [boundary_mixture_quantile(0.95, m) for m in range(1, 15)]
        assert np.all(np.diff(crit) > 0)

    def test_invalid(self):
        with pytest.raises(InputError):
            chi2_quantile(1.0, 2)
        with pytest.raises(InputError):
            chi2_quantile(0.5, 0)


class TestLrTest:
    def test_equal_logliks(self):
        r = zero_inflation_lr_test(-10.0, -10.0, 2)
        assert r.phi == 0.0 and not r.reject and r.p_value == 1.0

    def test_small_negative_clamped(self):
        assert zero_inflation_lr_test(-10.0, -10.0 - 1e-9, 2).phi == 0.0

    def test_broken_nesting(self):
        with pytest.raises(NestingError):
            zero_inflation_lr_test(-10.0, -10.1, 2)

    def test_rejects_above_critical(self):
        r = zero_inflation_lr_test(-100.0, -90.0, 2)
        assert r.phi == pytest.approx(20.0)
        assert r.reject
        assert r.p_value == pytest.approx(0.5 * stats.chi2.sf(20.0, 2), rel=1e-9)

    def test_m_must_be_positive(self):
        with pytest.raises(InputError):
            zero_inflation_lr_test(0.0, 0.0, 0)


class TestSelectK:
    def test_single_k(self):
        ds = toy_dataset("gaussian-severity", 2, 200, seed=1).dataset
        best, rows = select_k(ds, [2], "gaussian-severity", DESIGN, InitStrategy(n_random=2))
        assert best.K == 2 and len(rows) == 1 and rows[0].status == "ok"

    def test_failed_k_is_annotated(self):
        ds = toy_dataset("gaussian-severity", 2, 60, seed=1).dataset
        best, rows = select_k(ds, [1, 2, 8], "gaussian-severity", DESIGN,
                              InitStrategy(n_random=2))
        assert rows[2].status == "SizingError" and rows[2].criteria is None
        assert best.K in (1, 2)
        text = format_selection_table(rows, "GCWM", best.K)
        assert "SizingError" in text and f"{best.K}*" in text
        csv_text = selection_table_csv(rows, "GCWM")
        assert csv_text.splitlines()[0] == "model,K,status,loglik,n_params,aic,bic,message"

    def test_all_failing_raises_common_error(self):
        ds = toy_dataset("gaussian-severity", 2, 30, seed=1).dataset
        with pytest.raises(SizingError):
            select_k(ds, [6, 7], "gaussian-severity", DESIGN)

    def test_mixed_failures_raise_convergence_error(self):
        def fit(K):
            raise SizingError("x") if K == 1 else ConvergenceError("y")

        with pytest.raises(ConvergenceError, match="K=1"):
            select_k(None, [1, 2], "gaussian-severity", fit=fit)

    def test_empty_range(self):
        with pytest.raises(InputError):
            select_k(None, [], "gaussian-severity", fit=lambda K: None)

    @pytest.mark.slow
    def test_recovers_three_components(self):
        hits = 0
        for seed in range(10):
            ds = toy_dataset("gaussian-severity", 3, 450, seed=100 + seed).dataset
            best, _ = select_k(ds, range(1, 6), "gaussian-severity", DESIGN,
                               InitStrategy(n_random=2, seed=seed))
            hits += best.K == 3
        assert hits >= 9
