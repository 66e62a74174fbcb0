"""Weighted maximum-likelihood GLM solvers used inside the M-steps.

Three families are supported:

* Poisson with log link, prior weights and a per-row log offset;
* Bernoulli with logit link and fractional targets in [0, 1];
* Gaussian response with identity link (closed-form weighted least squares)
  or log link (Gauss-Newton).

Iterative fits use Newton/IRLS steps with step halving, so the weighted
log-likelihood never decreases from the starting point.  That property is
what keeps the surrounding EM algorithms monotone when the solvers are
warm-started from the previous iterate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln

from .densities import normal_logpdf, softplus
from .errors import InputError

TOL_LOGLIK = 1e-10
TOL_SCORE = 1e-8
MAX_ITER = 100
SEPARATION_CAP = 30.0
_ETA_MAX = 700.0


@dataclass
class GlmFit:
    """Result of a weighted GLM fit.

    ``dropped`` lists design columns removed for collinearity; their
    coefficients are reported as 0 and their standard errors as NaN.
    """

    coefficients: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    family: str
    link: str
    dispersion: Optional[float] = None
    cov: Optional[np.ndarray] = None
    flags: tuple = ()
    dropped: tuple = ()
    trace: list = field(default_factory=list, repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        if self.cov is None:
            return np.full(self.coefficients.size, np.nan)
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.cov))


def _as_X(X):
    return np.asarray(getattr(X, "values", X), dtype=float)


def independent_columns(X: np.ndarray, weights: np.ndarray, rtol: float = 1e-6) -> list:
    """Indices of a maximal set of linearly independent columns, earliest first.

    Only rows with positive weight count.  Column ``j`` is kept when its
    unit-normalized residual after projection on the kept columns exceeds
    ``rtol``; the test runs on the normalized Gram matrix.
    """
    rows = X[weights > 0]
    if rows.shape[0] == 0:
        return []
    G = rows.T @ rows
    d = np.sqrt(np.diag(G))
    nz = d > 0
    G = G / np.outer(np.where(nz, d, 1.0), np.where(nz, d, 1.0))
    keep = []
    for j in range(G.shape[0]):
        if not nz[j]:
            continue
        if keep:
            A = G[np.ix_(keep, keep)]
            g = G[keep, j]
            resid2 = G[j, j] - g @ np.linalg.solve(A, g)
        else:
            resid2 = G[j, j]
        if resid2 > rtol * rtol:
            keep.append(j)
    return keep


def _check_inputs(X, y, weights):
    if X.ndim != 2 or X.shape[0] != y.size or weights.size != y.size:
        raise InputError("design, response and weights must have matching rows")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InputError("weights must be finite and nonnegative")
    if weights.sum() <= 0:
        raise InputError("weights must have a positive sum")


def _reduce(X, weights, name):
    keep = independent_columns(X, weights)
    dropped = tuple(j for j in range(X.shape[1]) if j not in keep)
    if dropped:
        warnings.warn(f"{name}: design is rank deficient; dropping columns {list(dropped)}",
                      RuntimeWarning, stacklevel=3)
    return keep, dropped


def _expand(beta_red, keep, p):
    beta = np.zeros(p)
    beta[keep] = beta_red
    return beta


def _expand_cov(cov_red, keep, p):
    cov = np.full((p, p), np.nan)
    if cov_red is not None:
        cov[np.ix_(keep, keep)] = cov_red
    return cov


def _safe_inv(A):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A)


def _newton_canonical(X, t, w, offset, start, cumulant, mean, variance,
                      const, bound, max_iter):
    """Maximize sum w * (t * eta - b(eta)) + const over beta, eta = X beta + offset."""

    def objective(beta):
        eta = X @ beta + offset
        return float(np.sum(w * (t * eta - cumulant(eta)))) + const

    beta = start.copy()
    if bound is not None:
        beta = np.clip(beta, -bound, bound)
    f = objective(beta)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta + offset
        mu = mean(eta)
        score = X.T @ (w * (t - mu))
        if np.max(np.abs(score)) < TOL_SCORE:
            converged = True
            it -= 1
            break
        H = X.T @ (X * (w * variance(eta))[:, None])
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        scale = 1.0
        improved = False
        for _ in range(40):
            cand = beta + scale * step
            if bound is not None:
                cand = np.clip(cand, -bound, bound)
            fc = objective(cand)
            if np.isfinite(fc) and fc >= f:
                improved = True
                break
            scale *= 0.5
        if not improved:
            converged = True  # no ascent direction at machine precision
            break
        change = abs(fc - f) / max(1.0, abs(f))
        beta, f = cand, fc
        trace.append(f)
        if change < TOL_LOGLIK:
            converged = True
            break
    eta = X @ beta + offset
    info = X.T @ (X * (w * variance(eta))[:, None])
    return beta, f, it, converged, _safe_inv(info), trace


def _pois_mean(eta):
    return np.exp(np.minimum(eta, _ETA_MAX))


def fit_poisson_weighted(X, y, weights=None, offset=None, start=None,
                         max_iter: int = MAX_ITER, bound: Optional[float] = None) -> GlmFit:
    """Weighted log-linear Poisson regression.

    Maximizes ``sum_i w_i [y_i eta_i - exp(eta_i) - log y_i!]`` with
    ``eta = X beta + offset``.
    """
    X = _as_X(X)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float)
    _check_inputs(X, y, w)
    if np.any(y < 0):
        raise InputError("Poisson response must be nonnegative")
    o = np.zeros(y.size) if offset is None else np.broadcast_to(np.asarray(offset, float), y.shape)
    p = X.shape[1]
    keep, dropped = _reduce(X, w, "fit_poisson_weighted")
    Xr = X[:, keep]
    if start is None:
        b0 = np.zeros(len(keep))
        rate = np.sum(w * y) / np.sum(w * np.exp(o))
        if keep and keep[0] == 0:
            b0[0] = np.log(max(rate, 1e-8))
    else:
        b0 = np.asarray(start, dtype=float)[keep]
    const = -float(np.sum(w * gammaln(y + 1.0)))
    beta, ll, it, conv, cov, trace = _newton_canonical(
        Xr, y, w, o, b0, _pois_mean, _pois_mean, _pois_mean, const, bound, max_iter)
    return GlmFit(_expand(beta, keep, p), ll, it, conv, "poisson", "log",
                  cov=_expand_cov(cov, keep, p), dropped=dropped, trace=trace)


def fit_bernoulli_weighted(X, target, weights=None, start=None,
                           max_iter: int = MAX_ITER, cap: float = SEPARATION_CAP) -> GlmFit:
    """Weighted logistic regression allowing fractional targets.

    Coefficients are confined to ``[-cap, cap]``; reaching the cap signals
    (quasi-)separation and sets the ``"separation"`` flag instead of failing.
    """
    X = _as_X(X)
    t = np.asarray(target, dtype=float)
    w = np.ones(t.size) if weights is None else np.asarray(weights, dtype=float)
    _check_inputs(X, t, w)
    if np.any(t < 0) or np.any(t > 1):
        raise InputError("Bernoulli targets must lie in [0, 1]")
    p = X.shape[1]
    keep, dropped = _reduce(X, w, "fit_bernoulli_weighted")
    Xr = X[:, keep]
    if start is None:
        b0 = np.zeros(len(keep))
        m = np.clip(np.sum(w * t) / np.sum(w), 1e-6, 1 - 1e-6)
        if keep and keep[0] == 0:
            b0[0] = np.log(m / (1 - m))
    else:
        b0 = np.asarray(start, dtype=float)[keep]
    beta, ll, it, conv, cov, trace = _newton_canonical(
        Xr, t, w, 0.0, b0, softplus, expit, lambda e: expit(e) * expit(-e), 0.0, cap, max_iter)
    flags = ("separation",) if np.any(np.abs(beta) >= cap * (1 - 1e-12)) else ()
    return GlmFit(_expand(beta, keep, p), ll, it, conv, "bernoulli", "logit",
                  cov=_expand_cov(cov, keep, p), flags=flags, dropped=dropped, trace=trace)


def _gaussian_result(beta, mu, y, w, cov_unscaled, it, conv, link, keep, dropped, p, trace):
    wsum = w.sum()
    nu = float(np.sum(w * (y - mu) ** 2) / wsum)
    flags = ()
    if nu <= 1e-14 * max(1.0, float(np.sum(w * y * y) / wsum)):
        flags = ("degenerate",)
    var = max(nu, np.finfo(float).tiny)
    ll = float(np.sum(w * normal_logpdf(y, mu, var)))
    cov = _expand_cov(None if cov_unscaled is None else nu * cov_unscaled, keep, p)
    return GlmFit(_expand(beta, keep, p), ll, it, conv, "gaussian", link, dispersion=nu,
                  cov=cov, flags=flags, dropped=dropped, trace=trace)


def fit_gaussian_weighted(X, y, weights=None, link: str = "identity", start=None,
                          max_iter: int = MAX_ITER) -> GlmFit:
    """Weighted Gaussian regression; dispersion is ``sum w r^2 / sum w``.

    Rows with zero weight do not influence the fit.
    """
    X = _as_X(X)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float)
    _check_inputs(X, y, w)
    p = X.shape[1]
    keep, dropped = _reduce(X, w, "fit_gaussian_weighted")
    Xr = X[:, keep]
    if link == "identity":
        sw = np.sqrt(w)
        beta = np.linalg.lstsq(Xr * sw[:, None], y * sw, rcond=None)[0]
        cov = _safe_inv(Xr.T @ (Xr * w[:, None]))
        return _gaussian_result(beta, Xr @ beta, y, w, cov, 1, True, link, keep,
                                dropped, p, [])
    if link != "log":
        raise InputError(f"unknown Gaussian link {link!r}")
    return _fit_gaussian_log(Xr, y, w, start, max_iter, keep, dropped, p)


def _fit_gaussian_log(X, y, w, start, max_iter, keep, dropped, p):
    def sse(beta):
        return float(np.sum(w * (y - np.exp(np.minimum(X @ beta, _ETA_MAX))) ** 2))

    if start is not None:
        beta = np.asarray(start, dtype=float)[keep]
    else:
        pos = (y > 0) & (w > 0)
        beta = np.zeros(X.shape[1])
        if pos.sum() > X.shape[1]:
            sw = np.sqrt(w[pos])
            beta = np.linalg.lstsq(X[pos] * sw[:, None], np.log(y[pos]) * sw, rcond=None)[0]
        elif X.shape[1]:
            beta[0] = np.log(max(np.sum(w * y) / w.sum(), 1e-8))
    f = sse(beta)
    trace = [-f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.exp(np.minimum(X @ beta, _ETA_MAX))
        J = X * mu[:, None]
        grad = J.T @ (w * (y - mu))
        if np.max(np.abs(grad)) < TOL_SCORE * max(1.0, np.sqrt(f)):
            converged = True
            it -= 1
            break
        A = J.T @ (J * w[:, None])
        step = np.linalg.lstsq(A, grad, rcond=None)[0]
        scale, improved = 1.0, False
        for _ in range(40):
            cand = beta + scale * step
            fc = sse(cand)
            if np.isfinite(fc) and fc <= f:
                improved = True
                break
            scale *= 0.5
        if not improved:
            converged = True
            break
        change = abs(f - fc) / max(1.0, f)
        beta, f = cand, fc
        trace.append(-f)
        if change < TOL_LOGLIK:
            converged = True
            break
    mu = np.exp(np.minimum(X @ beta, _ETA_MAX))
    J = X * mu[:, None]
    cov = _safe_inv(J.T @ (J * w[:, None]))
    return _gaussian_result(beta, mu, y, w, cov, it, converged, "log", keep, dropped, p, trace)


def conditional_logpdf(family: str, link: str, X, y, beta, dispersion=None, offset=0.0):
    """Per-row log-density of the response under a fitted GLM (no prior weights)."""
    eta = _as_X(X) @ np.asarray(beta, float) + offset
    y = np.asarray(y, dtype=float)
    if family == "poisson":
        return y * eta - _pois_mean(eta) - gammaln(y + 1.0)
    if family == "bernoulli":
        return y * eta - softplus(eta)
    if family == "gaussian":
        mu = eta if link == "identity" else np.exp(np.minimum(eta, _ETA_MAX))
        return normal_logpdf(y, mu, max(float(dispersion), np.finfo(float).tiny))
    raise InputError(f"unknown GLM family {family!r}")
