"""Information criteria, the zero-inflation likelihood-ratio test, K selection."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from scipy.special import gammainc

from .errors import ConvergenceError, GcwmError, InputError, NestingError

CLAMP_SLACK = 1e-8
NESTING_SLACK = 1e-6


@dataclass(frozen=True)
class InfoCriteria:
    loglik: float
    n_params: int
    n: int

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_params * math.log(self.n)

    def to_dict(self) -> dict:
        return {"loglik": self.loglik, "n_params": self.n_params, "n": self.n,
                "aic": self.aic, "bic": self.bic}


def info_criteria(model) -> InfoCriteria:
    """AIC/BIC of a fitted model; lower is better."""
    return InfoCriteria(float(model.loglik), int(model.n_params), int(model.n))


def chi2_cdf(x: float, df: float) -> float:
    if x <= 0:
        return 0.0
    return float(gammainc(0.5 * df, 0.5 * x))


def chi2_quantile(p: float, df: float, tol: float = 1e-10) -> float:
    """Inverse chi-square CDF by bisection on the regularized lower incomplete gamma."""
    if not 0 < p < 1:
        raise InputError("quantile level must lie in (0, 1)")
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    lo, hi = 0.0, max(1.0, 2.0 * df)
    while chi2_cdf(hi, df) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def boundary_mixture_quantile(level: float, m: int) -> float:
    """Quantile of ``0.5 chi2_0 + 0.5 chi2_m`` (valid for ``level > 0.5``)."""
    if level <= 0.5:
        return 0.0
    return chi2_quantile(2.0 * level - 1.0, m)


@dataclass(frozen=True)
class LrTestResult:
    phi: float
    m: int
    critical_95: float
    reject: bool
    p_value: float

    def to_dict(self) -> dict:
        return {"phi": self.phi, "m": self.m, "critical_95": self.critical_95,
                "reject": self.reject, "p_value": self.p_value}


def zero_inflation_lr_test(poisson_loglik: float, zip_loglik: float, m: int,
                           alpha: float = 0.05) -> LrTestResult:
    """Test H0: psi = 0 against psi > 0.

    ``phi = -2 (l_poisson - l_zip)`` is referred to ``0.5 chi2_0 + 0.5 chi2_m``
    where ``m`` is the width of the zero-inflation design (intercept
    included).  At ``alpha = 0.05`` the critical value is the 90th percentile
    of ``chi2_m``.
    """
    if m < 1:
        raise InputError("m must be >= 1")
    phi = -2.0 * (float(poisson_loglik) - float(zip_loglik))
    if phi < -NESTING_SLACK:
        raise NestingError(f"zero-inflated fit is worse than the Poisson fit (phi={phi:.3g})")
    if phi <= 0:
        phi = 0.0
    crit = boundary_mixture_quantile(1.0 - alpha, m)
    p = 1.0 if phi <= CLAMP_SLACK else 0.5 * (1.0 - chi2_cdf(phi, m))
    return LrTestResult(phi, int(m), crit, bool(phi > crit), p)


@dataclass
class SelectionRow:
    K: int
    status: str
    criteria: Optional[InfoCriteria] = None
    message: str = ""
    model: object = None
    error: object = None

    def as_record(self, label: str = "") -> dict:
        c = self.criteria
        return {"model": label, "K": self.K, "status": self.status,
                "loglik": "" if c is None else repr(c.loglik),
                "n_params": "" if c is None else c.n_params,
                "aic": "" if c is None else repr(c.aic),
                "bic": "" if c is None else repr(c.bic),
                "message": self.message}


def select_k(dataset, K_range: Iterable[int], response_kind: str, design=None, init=None,
             stop=None, fit: Optional[Callable[[int], object]] = None):
    """Fit every K and return ``(best model, rows)`` with the best chosen by BIC.

    ``response_kind`` may be any GCWM response kind; ``"zip-frequency"``
    uses the two-stage zero-inflated fit.  ``fit`` overrides the fitting
    routine with a callable of K.  A K that fails is kept in the table with
    its status and message instead of aborting the search.
    """
    from .data import DesignSpec
    from .em import InitStrategy, StopRule, fit_gcwm

    design = DesignSpec() if design is None else design
    init = InitStrategy() if init is None else init
    stop = StopRule() if stop is None else stop
    if fit is None:
        if response_kind == "zip-frequency":
            from .zigcwm import fit_zigcwm

            def fit(K):
                return fit_zigcwm(dataset, K, design, init, stop)
        else:
            def fit(K):
                return fit_gcwm(dataset, K, response_kind, design, init, stop)
    K_range = list(K_range)
    if not K_range:
        raise InputError("K range is empty")
    rows = []
    for K in K_range:
        try:
            model = fit(K)
        except GcwmError as exc:
            rows.append(SelectionRow(K, type(exc).__name__, message=str(exc), error=exc))
            continue
        status = "ok" if model.converged else "not-converged"
        rows.append(SelectionRow(K, status, info_criteria(model), model=model))
    scored = [r for r in rows if r.criteria is not None]
    if not scored:
        msgs = "; ".join(f"K={r.K}: {r.message}" for r in rows)
        kinds = {type(r.error) for r in rows}
        cls = kinds.pop() if len(kinds) == 1 else ConvergenceError
        if not issubclass(cls, GcwmError):
            cls = ConvergenceError
        raise cls(f"no K in the range produced a fit ({msgs})")
    best = min(scored, key=lambda r: (r.criteria.bic, r.K))
    return best.model, rows


def selection_table_csv(rows, label: str = "") -> str:
    buf = io.StringIO()
    fields = ["model", "K", "status", "loglik", "n_params", "aic", "bic", "message"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_record(label))
    return buf.getvalue()


def format_selection_table(rows, label: str, best_K: Optional[int] = None) -> str:
    """Plain-text AIC/BIC table; the selected K is starred."""
    lines = [f"{'Model':<8}{'K':>4}{'AIC':>16}{'BIC':>16}  status"]
    for i, r in enumerate(rows):
        name = label if i == 0 else ""
        star = "*" if r.K == best_K else " "
        if r.criteria is None:
            lines.append(f"{name:<8}{r.K:>3}{star}{'-':>16}{'-':>16}  {r.status}")
        else:
            lines.append(f"{name:<8}{r.K:>3}{star}{r.criteria.aic:>16,.1f}"
                         f"{r.criteria.bic:>16,.1f}  {r.status}")
    return "\n".join(lines)
