"""Zero-inflated Poisson cluster-weighted models.

Fitting runs in two stages.  A partition of the rows is first obtained from
a Poisson GCWM, from a Bernoulli GCWM on the zero indicator ``1{y = 0}``,
or from both ("BP" partitioning: the two aligned posterior matrices and
their average are each carried through the second stage and the most
likely result is kept).  Each cluster's zero-inflated Poisson regression is then fit
by its own EM algorithm under that partition, and the covariate marginals
and mixing weights follow in closed form.  Clusters whose zero inflation is
not supported by a likelihood-ratio test fall back to a Poisson
conditional.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln

from . import glm as glmmod
from .data import Dataset, DesignSpec
from .densities import ZipConditional, softplus
from .em import (ComponentParams, GcwmModel, InitStrategy, StopRule, _Context, _estep,
                 _Run, _check_sizing, build_model, fit_gcwm, hard_labels, marginal_update,
                 run_em, COLLAPSE_FRACTION)
from .errors import CollapseError, InputError
from .metrics import align_posteriors
from .selection import zero_inflation_lr_test

PARTITIONS = ("bp", "poisson", "bernoulli")
ZIP_TOL = 1e-9
ZIP_MAX_ITER = 500
BOUNDARY_LOGIT = -30.0


@dataclass
class ZipFit:
    """Weighted zero-inflated Poisson regression fit.

    ``beta_bar`` is ``None`` when the fit reduced to a plain Poisson model
    (no zeros carry weight, or every weighted row is zero).  ``zstar`` holds
    the posterior probability that a zero is structural; it is exactly 0 on
    rows with a positive count.
    """

    beta: np.ndarray
    beta_bar: Optional[np.ndarray]
    zstar: np.ndarray
    loglik: float
    converged: bool
    iterations: int = 0
    loglik_trace: list = field(default_factory=list, repr=False)
    flags: tuple = ()
    cov: Optional[np.ndarray] = field(default=None, repr=False)
    poisson_fit: Optional[glmmod.GlmFit] = field(default=None, repr=False)

    @property
    def inflated(self) -> bool:
        return self.beta_bar is not None

    @property
    def std_errors(self) -> np.ndarray:
        if self.cov is None:
            return np.full(self.beta.size + (0 if self.beta_bar is None else self.beta_bar.size),
                           np.nan)
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.cov))


def zip_posterior_zero(y, eta, a):
    """Posterior mean of the structural-zero indicator.

    ``expit(a + lambda)`` on zero counts, where ``lambda = exp(eta)``, and 0
    on positive counts.
    """
    y = np.asarray(y, dtype=float)
    lam = np.exp(np.minimum(eta, 700.0))
    return np.where(y == 0, expit(a + lam), 0.0)


def _zip_rowloglik(y, eta, a):
    lam = np.exp(np.minimum(eta, 700.0))
    pois = y * eta - lam - gammaln(y + 1.0)
    log_psi = -softplus(-a)
    log_1mpsi = -softplus(a)
    return np.where(y == 0, np.logaddexp(log_psi, log_1mpsi + pois), log_1mpsi + pois)


def zip_information(X, Xbar, y, weights, eta, a) -> np.ndarray:
    """Observed information of the weighted ZIP log-likelihood in ``(beta, beta_bar)``."""
    lam = np.exp(np.minimum(eta, 700.0))
    r = expit(a + lam)
    s = expit(a)
    zero = y == 0
    h_aa = np.where(zero, r * (1 - r) - s * (1 - s), -s * (1 - s))
    h_ee = np.where(zero, -lam * (1 - r) + lam * lam * r * (1 - r), -lam)
    h_ae = np.where(zero, lam * r * (1 - r), 0.0)
    H_bb = X.T @ (X * (weights * h_ee)[:, None])
    H_cc = Xbar.T @ (Xbar * (weights * h_aa)[:, None])
    H_bc = X.T @ (Xbar * (weights * h_ae)[:, None])
    H = np.block([[H_bb, H_bc], [H_bc.T, H_cc]])
    return -H


def _poisson_only(X, y, w, offset, start, flags, bound=None):
    fit = glmmod.fit_poisson_weighted(X, y, w, offset, start=start, bound=bound)
    return ZipFit(fit.coefficients, None, np.zeros(y.size), fit.loglik, fit.converged,
                  fit.iterations, list(fit.trace), flags, fit.cov, fit)


def _default_init(X, Xbar, y, w, offset):
    pois = glmmod.fit_poisson_weighted(X, y, w, offset)
    lam = np.exp(X @ pois.coefficients + offset)
    excess = np.sum(w * (y == 0)) / w.sum() - np.sum(w * np.exp(-lam)) / w.sum()
    excess = float(np.clip(excess, 0.01, 0.99))
    beta_bar = np.zeros(Xbar.shape[1])
    beta_bar[0] = np.log(excess / (1 - excess))
    return pois.coefficients, beta_bar


def _newton_polish(X, Xbar, y, w, o, beta, beta_bar, dropped, dropped_bar,
                   max_steps: int = 20):
    """Line-searched Newton steps on the weighted ZIP log-likelihood.

    EM approaches the optimum linearly; a few Newton steps from its end
    point give the maximizer to near machine precision.  Dropped design
    columns stay at zero.  Returns the new coefficients and the
    log-likelihood after each accepted step.
    """
    p = X.shape[1]
    keep = np.array([j for j in range(p) if j not in dropped]
                    + [p + j for j in range(Xbar.shape[1]) if j not in dropped_bar])
    theta = np.r_[beta, beta_bar]

    def loglik(th):
        return float(np.sum(w * _zip_rowloglik(y, X @ th[:p] + o, Xbar @ th[p:])))

    ll = loglik(theta)
    accepted = []
    for _ in range(max_steps):
        eta, a = X @ theta[:p] + o, Xbar @ theta[p:]
        lam = np.exp(np.minimum(eta, 700.0))
        z = zip_posterior_zero(y, eta, a)
        score = np.r_[X.T @ (w * (y - (1 - z) * lam)), Xbar.T @ (w * (z - expit(a)))]
        info = zip_information(X, Xbar, y, w, eta, a)[np.ix_(keep, keep)]
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            break
        step = np.zeros_like(theta)
        step[keep] = np.linalg.solve(L.T, np.linalg.solve(L, score[keep]))
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            new = loglik(cand)
            if np.isfinite(new) and new >= ll:
                break
            scale *= 0.5
        else:
            break
        gain = new - ll
        theta, ll = cand, new
        accepted.append(ll)
        if np.max(np.abs(scale * step)) < 1e-10 or gain <= 1e-14 * max(1.0, abs(ll)):
            break
    return theta[:p], theta[p:], accepted


def zip_em(X, Xbar, y, weights=None, offset=None, init=None, tol: float = ZIP_TOL,
           max_iter: int = ZIP_MAX_ITER, polish: bool = True) -> ZipFit:
    """EM for a weighted zero-inflated Poisson regression.

    The E-step computes ``z* = expit(xbar beta_bar + lambda)`` on zero
    counts.  The M-step fits a Poisson regression with weights
    ``(1 - z*) w`` and a logistic regression with targets ``z*`` and weights
    ``w``, each warm-started, so the weighted log-likelihood never
    decreases.  Iteration stops once the relative change drops below
    ``tol``; line-searched Newton steps on the full likelihood then finish
    the climb, unless the logistic coefficients hit the separation cap.

    Parameters
    ----------
    X, Xbar : ndarray
        Poisson and zero-inflation designs, both with a leading intercept.
    y : ndarray
        Nonnegative counts.
    weights : ndarray, optional
        Nonnegative row weights (cluster posteriors times claim weights).
    offset : ndarray, optional
        Log-exposure offset on the Poisson linear predictor.
    init : tuple, optional
        Starting ``(beta, beta_bar)``.  Either entry may be ``None``, in
        which case a default start replaces it.
    polish : bool
        Run the Newton finish after convergence.
    """
    X = np.asarray(getattr(X, "values", X), dtype=float)
    Xbar = np.asarray(getattr(Xbar, "values", Xbar), dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=float)
    o = np.zeros(y.size) if offset is None else np.broadcast_to(np.asarray(offset, float), y.shape)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise InputError("zero-inflated Poisson needs nonnegative integer counts")
    if w.sum() <= 0:
        raise InputError("weights must have a positive sum")
    active = w > 0
    zeros_w = np.sum(w[active & (y == 0)])
    if zeros_w <= 0:
        start = None if init is None else init[0]
        return _poisson_only(X, y, w, o, start, ("no-zeros",))
    if np.all(y[active] == 0):
        return _poisson_only(X, y, w, o, None, ("all-zeros",), bound=-BOUNDARY_LOGIT + 20)

    beta, beta_bar = (None, None) if init is None else init
    if beta is None or beta_bar is None:
        b0, bb0 = _default_init(X, Xbar, y, w, o)
        beta = b0 if beta is None else beta
        beta_bar = bb0 if beta_bar is None else beta_bar
    beta = np.asarray(beta, float).copy()
    beta_bar = np.asarray(beta_bar, float).copy()

    eta = X @ beta + o
    a = Xbar @ beta_bar
    ll = float(np.sum(w * _zip_rowloglik(y, eta, a)))
    trace = [ll]
    converged = False
    flags = set()
    it = 0
    pfit = bfit_dropped = None
    for it in range(1, max_iter + 1):
        z = zip_posterior_zero(y, eta, a)
        pfit = glmmod.fit_poisson_weighted(X, y, (1 - z) * w, o, start=beta)
        bfit = glmmod.fit_bernoulli_weighted(Xbar, z, w, start=beta_bar)
        flags.update(bfit.flags)
        bfit_dropped = bfit.dropped
        beta, beta_bar = pfit.coefficients, bfit.coefficients
        eta = X @ beta + o
        a = Xbar @ beta_bar
        new = float(np.sum(w * _zip_rowloglik(y, eta, a)))
        trace.append(new)
        change = abs(new - ll) / max(1.0, abs(ll))
        ll = new
        if change < tol:
            converged = True
            break
    dropped_bar = () if bfit_dropped is None else bfit_dropped
    if polish and converged and "separation" not in flags:
        beta, beta_bar, polished = _newton_polish(
            X, Xbar, y, w, o, beta, beta_bar,
            () if pfit is None else pfit.dropped, dropped_bar)
        trace.extend(polished)
        ll = trace[-1]
        eta = X @ beta + o
        a = Xbar @ beta_bar
    z = zip_posterior_zero(y, eta, a)
    info = zip_information(X, Xbar, y, w, eta, a)
    p = X.shape[1]
    cov = glmmod._safe_inv(info)
    if pfit is None:
        pfit = glmmod.fit_poisson_weighted(X, y, (1 - z) * w, o, start=beta, max_iter=0)
    poisson_fit = glmmod.GlmFit(beta, ll, it, converged, "poisson", "log", cov=cov[:p, :p],
                                flags=tuple(sorted(flags)), dropped=pfit.dropped)
    return ZipFit(beta, beta_bar, z, ll, converged, it, trace, tuple(sorted(flags)), cov,
                  poisson_fit)


def _design_arrays(dataset: Dataset, design: DesignSpec):
    ctx = _Context(dataset, "zip-frequency", design)
    return ctx


def fit_zip_cluster(dataset: Dataset, weights, design: DesignSpec = DesignSpec(),
                    init=None, **kwargs) -> ZipFit:
    """ZIP regression for one cluster, rows weighted by ``weights`` times claim weights."""
    ctx = _design_arrays(dataset, design)
    w = np.asarray(weights, dtype=float)
    if w.shape != (ctx.n,):
        raise InputError("cluster weights must have one entry per row")
    return zip_em(ctx.X, ctx.Xbar, ctx.y, w * ctx.omega, ctx.offset, init=init, **kwargs)


def _best_zip(ctx, rows_w, inits):
    """Highest-likelihood ZIP fit over several starts."""
    fits = [zip_em(ctx.X, ctx.Xbar, ctx.y, rows_w, ctx.offset, init=i) for i in inits]
    return max(fits, key=lambda f: f.loglik)


def cluster_lr_test(ctx: _Context, rows_w, soft_fit: Optional[ZipFit], alpha: float = 0.05):
    """Poisson vs ZIP likelihood-ratio test on the rows selected by ``rows_w``.

    Returns ``(result or None, poisson_loglik, zip_loglik, note)``.  No test is
    possible when the rows contain no zeros, or only zeros.
    """
    if rows_w.sum() <= 0:
        return None, None, None, "empty"
    active = rows_w > 0
    y = ctx.y[active]
    if not np.any(y == 0):
        return None, None, None, "no-zeros"
    if np.all(y == 0):
        return None, None, None, "all-zeros"
    pois = glmmod.fit_poisson_weighted(ctx.X, ctx.y, rows_w, ctx.offset)
    boundary = np.zeros(ctx.Xbar.shape[1])
    boundary[0] = BOUNDARY_LOGIT
    inits = [(pois.coefficients, boundary)]
    if soft_fit is not None and soft_fit.inflated:
        inits.append((soft_fit.beta, soft_fit.beta_bar))
    zfit = _best_zip(ctx, rows_w, inits)
    res = zero_inflation_lr_test(pois.loglik, zfit.loglik, ctx.Xbar.shape[1], alpha)
    return res, pois.loglik, zfit.loglik, ""


def _initial_pair(fits, k):
    beta = beta_bar = None
    if "poisson" in fits:
        beta = fits["poisson"].components[k].glm.coefficients
    if "bernoulli" in fits:
        beta_bar = fits["bernoulli"].components[k].glm.coefficients
    return beta, beta_bar


def _as_zip_model(ctx, model: GcwmModel, **metadata) -> GcwmModel:
    comps = [ComponentParams(c.tau, c.glm, c.gaussian, c.lognormal, c.discrete,
                             zip=ZipConditional(c.glm.coefficients, None,
                                                ctx.design.offset_exposure))
             for c in model.components]
    post, ll = _estep(ctx, comps)
    run = _Run(comps, post, list(model.loglik_trace[:-1]) + [ll], model.converged,
               model.iterations)
    return build_model(ctx, run, seed=model.seed, **metadata)


def fit_zigcwm(dataset: Dataset, K: int, design: DesignSpec = DesignSpec(),
               init: InitStrategy = InitStrategy(), stop: StopRule = StopRule(),
               partition: str = "bp", zero_inflation: bool = True, refine: bool = False,
               alpha: float = 0.05) -> GcwmModel:
    """Fit a zero-inflated Poisson GCWM by partitioning, then per-cluster ZIP EM.

    Parameters
    ----------
    partition : {"bp", "poisson", "bernoulli"}
        Source of the row partition.  ``"bp"`` combines a Poisson GCWM and
        a Bernoulli GCWM on the zero indicator; see :func:`bp_from_fits`.
    zero_inflation : bool
        If False every cluster keeps a Poisson conditional.
    refine : bool
        Continue with joint EM iterations over all parameters after the
        two-stage fit.  The default keeps the partition frozen.
    alpha : float
        Level of the per-cluster zero-inflation test; clusters where the
        test does not reject are demoted to a Poisson conditional.

    Returns
    -------
    GcwmModel
        ``response_kind == "zip-frequency"``; posteriors and log-likelihood
        are evaluated under the zero-inflated joint density.  Per-cluster
        test results live in ``metadata["lr_tests"]``.
    """
    ctx = _Context(dataset, "zip-frequency", design)
    _check_sizing(ctx, K)
    if not np.any(ctx.y == 0):
        pois = fit_gcwm(dataset, K, "poisson-frequency", design, init, stop)
        return _as_zip_model(ctx, pois, partition=partition, lr_tests=[None] * K,
                             note="no zeros in the response; every cluster is Poisson")

    if partition not in PARTITIONS:
        raise InputError(f"unknown partition method {partition!r}; choose from {PARTITIONS}")
    fits = {}
    if partition in ("bp", "poisson"):
        fits["poisson"] = fit_gcwm(dataset, K, "poisson-frequency", design, init, stop)
    if partition in ("bp", "bernoulli"):
        fits["bernoulli"] = fit_gcwm(dataset, K, "bernoulli-zero", design, init, stop)
    kw = dict(zero_inflation=zero_inflation, refine=refine, alpha=alpha, seed=init.seed)
    if partition == "bp":
        return bp_from_fits(dataset, fits, design, stop, **kw)
    return zigcwm_from_partition(dataset, fits[partition].posteriors, fits, design, stop,
                                 partition=partition, **kw)


def bp_candidates(fits: dict) -> dict:
    """Candidate partitions built from a Poisson and a Bernoulli GCWM.

    The Bernoulli posteriors are first aligned to the Poisson columns; the
    candidates are the two aligned posterior matrices and their average.
    """
    P = fits["poisson"].posteriors
    B = fits["bernoulli"].permuted(align_posteriors(P, fits["bernoulli"].posteriors)).posteriors
    return {"poisson": P, "bernoulli": B, "average": 0.5 * (P + B)}


def bp_from_fits(dataset: Dataset, fits: dict, design: DesignSpec = DesignSpec(),
                 stop: StopRule = StopRule(), computed: Optional[dict] = None,
                 **kwargs) -> GcwmModel:
    """Bernoulli-Poisson partitioning.

    Every candidate of :func:`bp_candidates` is carried through the
    zero-inflated stage and the model with the highest observed
    log-likelihood is returned.  ``computed`` may supply finished
    zero-inflated models for some candidates (keyed like the candidates).
    Candidates whose clusters collapse are skipped.
    """
    computed = computed or {}
    best, scores, last_exc, choice = None, {}, None, None
    for name, post in bp_candidates(fits).items():
        try:
            m = computed.get(name)
            if m is None:
                m = zigcwm_from_partition(dataset, post, fits, design, stop, partition="bp",
                                          **kwargs)
        except CollapseError as exc:
            last_exc = exc
            continue
        scores[name] = m.loglik
        if best is None or m.loglik > best.loglik:
            best, choice = m, name
    if best is None:
        raise last_exc
    best = replace(best, metadata=dict(best.metadata, partition="bp"))
    best.metadata["bp_choice"] = choice
    best.metadata["bp_candidate_logliks"] = scores
    return best


def zigcwm_from_partition(dataset: Dataset, post: np.ndarray, fits: dict,
                          design: DesignSpec = DesignSpec(), stop: StopRule = StopRule(),
                          partition: str = "given", zero_inflation: bool = True,
                          refine: bool = False, alpha: float = 0.05, seed=None) -> GcwmModel:
    """Second stage of :func:`fit_zigcwm` for a given n x K partition matrix.

    ``fits`` may hold Poisson (``"poisson"``) and Bernoulli (``"bernoulli"``)
    GCWMs; their components are matched to the partition's columns and seed
    the ZIP coefficients.
    """
    ctx = _Context(dataset, "zip-frequency", design)
    post = np.asarray(post, dtype=float)
    n, K = post.shape
    fits = {name: f.permuted(align_posteriors(post, f.posteriors)) for name, f in fits.items()}
    mass = post.sum(axis=0)
    threshold = COLLAPSE_FRACTION * n / K
    for k in range(K):
        if mass[k] < threshold:
            raise CollapseError(k, float(mass[k]), threshold)
    hard = hard_labels(post)
    comps, tests = [], []
    for k in range(K):
        wk = post[:, k]
        margs = marginal_update(ctx, wk)
        beta0, bbar0 = _initial_pair(fits, k)
        soft = None
        result = None
        if zero_inflation:
            soft = zip_em(ctx.X, ctx.Xbar, ctx.y, wk * ctx.omega, ctx.offset,
                          init=None if beta0 is None and bbar0 is None else (beta0, bbar0))
            rows_w = (hard == k).astype(float) * ctx.omega
            result, ll_p, ll_z, note = cluster_lr_test(ctx, rows_w, soft, alpha)
            tests.append({"cluster": k, "n_rows": int((hard == k).sum()),
                          "poisson_loglik": ll_p, "zip_loglik": ll_z, "note": note,
                          **({} if result is None else result.to_dict())})
        else:
            tests.append(None)
        if soft is not None and soft.inflated and result is not None and result.reject:
            comps.append(ComponentParams(
                mass[k] / n, soft.poisson_fit,
                zip=ZipConditional(soft.beta, soft.beta_bar, design.offset_exposure),
                zip_fit=soft, **margs))
        else:
            g = glmmod.fit_poisson_weighted(ctx.X, ctx.y, wk * ctx.omega, ctx.offset,
                                            start=beta0)
            comps.append(ComponentParams(
                mass[k] / n, g, zip=ZipConditional(g.coefficients, None,
                                                   design.offset_exposure), **margs))
    meta = {"partition": partition, "lr_tests": tests,
            "partition_logliks": {name: f.loglik for name, f in fits.items()}}
    pooled = [t for t in tests if t is not None and "phi" in t]
    if pooled:
        meta["lr_all"] = zero_inflation_lr_test(
            0.0, 0.5 * sum(t["phi"] for t in pooled), sum(t["m"] for t in pooled),
            alpha).to_dict()
    if refine:
        run = run_em(ctx, comps, stop)
        return build_model(ctx, run, seed=seed, refined=True, **meta)
    post_zi, ll = _estep(ctx, comps)
    run = _Run(comps, post_zi, [ll], True, 0)
    return build_model(ctx, run, seed=seed, **meta)
