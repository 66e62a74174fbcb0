"""EM estimation of generalized cluster-weighted models.

A component's joint log-density for observation ``i`` is::

    log tau_k + omega_i * log q_k(y_i | x_i) + log p_k(t_i) + log p_k(w_i) + log p_k(u_i)

with a GLM conditional ``q_k``, a Gaussian marginal for ``t``, independent
multinomials for the discrete covariates ``w`` and a multivariate log-normal
for the positive covariates ``u``.  The claim weights ``omega_i`` default to
1; with other values the conditional term becomes a weighted
pseudo-likelihood, and the M-step maximizes ``sum_i pi_ik omega_i log q_k``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from . import glm as glmmod
from .data import Dataset, DesignSpec, build_design
from .densities import (GaussianMarginal, LogNormalMarginal, MultinomialMarginal,
                        ZipConditional, gaussian_logpdf, multinomial_logpmf,
                        regularize_covariance, zip_logpmf)
from .errors import CollapseError, ConvergenceError, DegenerateError, InputError, SizingError

RESPONSE_KINDS = ("gaussian-severity", "poisson-frequency", "bernoulli-zero", "zip-frequency")
COLLAPSE_FRACTION = 1e-3
MONOTONE_SLACK = 1e-8
# inner ZIP EM iterations per joint M-step; any number keeps the ascent property
ZIP_INNER_ITER = 5


@dataclass(frozen=True)
class StopRule:
    """Aitken-accelerated stopping: ``tol`` on the asymptotic gain, ``max_iter`` cap."""

    tol: float = 1e-5
    max_iter: int = 500


@dataclass(frozen=True)
class InitStrategy:
    """Random hard partitions, one k-means partition, or user labels.

    With ``labels`` set, that single partition is used and the other options
    are ignored.  Restart ``r`` draws from ``seed`` deterministically.
    """

    n_random: int = 10
    kmeans: bool = True
    labels: Optional[Sequence[int]] = None
    seed: int = 0


@dataclass
class ComponentParams:
    tau: float
    glm: Optional[glmmod.GlmFit] = None
    gaussian: Optional[GaussianMarginal] = None
    lognormal: Optional[LogNormalMarginal] = None
    discrete: Optional[MultinomialMarginal] = None
    zip: Optional[ZipConditional] = None
    zip_fit: Optional[object] = field(default=None, repr=False)


@dataclass
class GcwmModel:
    K: int
    components: list
    posteriors: Optional[np.ndarray]
    loglik_trace: list
    loglik: float
    n_params: int
    converged: bool
    response_kind: str
    design: DesignSpec
    specs: tuple
    n: int
    seed: Optional[int] = None
    iterations: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        """Hard assignment; ties go to the lowest component index."""
        return hard_labels(self.posteriors)

    @property
    def taus(self) -> np.ndarray:
        return np.array([c.tau for c in self.components])

    def permuted(self, order: Sequence[int]) -> "GcwmModel":
        """Same model with components reordered as ``order``."""
        order = list(order)
        post = None if self.posteriors is None else self.posteriors[:, order]
        return replace(self, components=[self.components[j] for j in order], posteriors=post)


def hard_labels(posteriors: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(posteriors), axis=1)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GCWM_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Map honoring the ``GCWM_THREADS`` environment variable; order preserved."""
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


class _Context:
    """Arrays derived once per (dataset, kind, design)."""

    def __init__(self, dataset: Dataset, kind: str, design: DesignSpec):
        if kind not in RESPONSE_KINDS:
            raise InputError(f"unknown response kind {kind!r}")
        self.ds = dataset
        self.kind = kind
        self.design = design
        y = dataset.response
        if kind != "gaussian-severity":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise InputError(f"{kind} needs nonnegative integer responses")
        elif np.any(dataset.claim_weights <= 0):
            raise InputError("severity fitting needs claim weights > 0 on every row")
        self.y = y
        self.omega = dataset.claim_weights
        self.X = build_design(dataset, design.response).values
        self.Xbar = build_design(dataset, design.bernoulli_selection).values
        self.offset = np.log(dataset.exposure) if design.offset_exposure else np.zeros(dataset.n)
        self.zero = (y == 0).astype(float)
        self.t = dataset.gaussian
        self.logu = np.log(dataset.lognormal)
        self.jac = self.logu.sum(axis=1)
        self.w = dataset.discrete

    @property
    def glm_X(self):
        return self.Xbar if self.kind == "bernoulli-zero" else self.X

    @property
    def n(self):
        return self.ds.n


# ---------------------------------------------------------------------------
# E-step


def conditional_logpdf(ctx: _Context, comp: ComponentParams) -> np.ndarray:
    """Per-row ``log q_k(y | x)`` (without the claim-weight factor)."""
    kind = ctx.kind
    if kind == "zip-frequency":
        return zip_logpmf(ctx.y, ctx.X, comp.zip, ctx.ds.exposure
                          if comp.zip.offset_log_exposure else 1.0, ctx.Xbar)
    g = comp.glm
    if kind == "poisson-frequency":
        return glmmod.conditional_logpdf("poisson", "log", ctx.X, ctx.y, g.coefficients,
                                         offset=ctx.offset)
    if kind == "bernoulli-zero":
        return glmmod.conditional_logpdf("bernoulli", "logit", ctx.Xbar, ctx.zero,
                                         g.coefficients)
    return glmmod.conditional_logpdf("gaussian", g.link, ctx.X, ctx.y, g.coefficients,
                                     g.dispersion)


def marginal_logpdf(ctx: _Context, comp: ComponentParams) -> np.ndarray:
    out = np.zeros(ctx.n)
    if comp.gaussian is not None:
        out += gaussian_logpdf(ctx.t, comp.gaussian)
    if comp.lognormal is not None:
        out += gaussian_logpdf(ctx.logu, comp.lognormal) - ctx.jac
    if comp.discrete is not None:
        out += multinomial_logpmf(ctx.w, comp.discrete)
    return out


def log_joint(ctx: _Context, components: Sequence[ComponentParams]) -> np.ndarray:
    """n x K matrix of ``log tau_k + log f_k(x_i, y_i)``."""
    cols = []
    for comp in components:
        with np.errstate(divide="ignore"):
            lt = np.log(comp.tau)
        cols.append(lt + ctx.omega * conditional_logpdf(ctx, comp) + marginal_logpdf(ctx, comp))
    return np.column_stack(cols)


def _estep(ctx, components):
    L = log_joint(ctx, components)
    lse = logsumexp(L, axis=1)
    bad = ~np.isfinite(lse)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ConvergenceError(f"all component densities vanish at row {row + 1}")
    return np.exp(L - lse[:, None]), float(lse.sum())


def _check_compatible(dataset: Dataset, model: GcwmModel):
    got = [(s.name, s.role, s.levels) for s in dataset.specs]
    want = [(s.name, s.role, s.levels) for s in model.specs]
    if got != want:
        raise InputError("dataset covariates do not match the model's covariate schema")


def estep(dataset: Dataset, model: GcwmModel) -> np.ndarray:
    """Posterior membership probabilities under ``model``."""
    _check_compatible(dataset, model)
    ctx = _Context(dataset, model.response_kind, model.design)
    return _estep(ctx, model.components)[0]


def observed_loglik(dataset: Dataset, model: GcwmModel) -> float:
    _check_compatible(dataset, model)
    ctx = _Context(dataset, model.response_kind, model.design)
    return _estep(ctx, model.components)[1]


# ---------------------------------------------------------------------------
# M-step


def _weighted_moments(Z, w):
    s = w.sum()
    mu = (w @ Z) / s
    D = Z - mu
    return mu, (D * w[:, None]).T @ D / s


def marginal_update(ctx: _Context, weights: np.ndarray) -> dict:
    """Closed-form covariate-marginal updates for one component."""
    out = {"gaussian": None, "lognormal": None, "discrete": None}
    if ctx.t.shape[1]:
        mu, S = _weighted_moments(ctx.t, weights)
        out["gaussian"] = GaussianMarginal(mu, regularize_covariance(S))
    if ctx.logu.shape[1]:
        mu, S = _weighted_moments(ctx.logu, weights)
        out["lognormal"] = LogNormalMarginal(mu, regularize_covariance(S))
    if ctx.w.shape[1]:
        s = weights.sum()
        props = [np.bincount(ctx.w[:, r], weights=weights, minlength=spec.n_levels) / s
                 for r, spec in enumerate(ctx.ds.discrete_specs)]
        out["discrete"] = MultinomialMarginal.from_proportions(props)
    return out


def _glm_update(ctx: _Context, weights, previous: Optional[ComponentParams]):
    w = weights * ctx.omega
    kind = ctx.kind
    start = None if previous is None or previous.glm is None else previous.glm.coefficients
    if kind == "gaussian-severity":
        return glmmod.fit_gaussian_weighted(ctx.X, ctx.y, w, link=ctx.design.link, start=start)
    if kind == "poisson-frequency":
        return glmmod.fit_poisson_weighted(ctx.X, ctx.y, w, ctx.offset, start=start)
    if kind == "bernoulli-zero":
        return glmmod.fit_bernoulli_weighted(ctx.Xbar, ctx.zero, w, start=start)
    raise AssertionError(kind)


def _zip_update(ctx: _Context, weights, previous: Optional[ComponentParams], inner_iter):
    from .zigcwm import zip_em  # local import: zigcwm depends on this module

    w = weights * ctx.omega
    prev = None if previous is None else previous.zip
    if prev is not None and not prev.inflated:
        fit = glmmod.fit_poisson_weighted(ctx.X, ctx.y, w, ctx.offset, start=prev.beta)
        return fit, ZipConditional(fit.coefficients, None, ctx.design.offset_exposure), None
    init = None if prev is None else (prev.beta, prev.beta_bar)
    zf = zip_em(ctx.X, ctx.Xbar, ctx.y, w, ctx.offset, init=init, max_iter=inner_iter,
                polish=False)
    zc = ZipConditional(zf.beta, zf.beta_bar, ctx.design.offset_exposure)
    return zf.poisson_fit, zc, zf


def _mstep(ctx: _Context, posteriors, previous=None, zip_inner_iter=ZIP_INNER_ITER):
    n, K = posteriors.shape
    mass = posteriors.sum(axis=0)
    threshold = COLLAPSE_FRACTION * n / K
    for k in range(K):
        if mass[k] < threshold:
            raise CollapseError(k, float(mass[k]), threshold)
    width = ctx.Xbar.shape[1] if ctx.kind == "bernoulli-zero" else ctx.X.shape[1]
    comps = []
    for k in range(K):
        wk = posteriors[:, k]
        if K > 1 and mass[k] < width + (ctx.kind == "gaussian-severity"):
            raise DegenerateError(f"component {k} holds {mass[k]:.3g} rows, fewer than its "
                                  f"regression parameters")
        prev = None if previous is None else previous[k]
        margs = marginal_update(ctx, wk)
        if ctx.kind == "zip-frequency":
            g, zc, zf = _zip_update(ctx, wk, prev, zip_inner_iter)
            comps.append(ComponentParams(mass[k] / n, g, zip=zc, zip_fit=zf, **margs))
        else:
            g = _glm_update(ctx, wk, prev)
            if K > 1 and "degenerate" in g.flags:
                raise DegenerateError(f"component {k} fits its response exactly "
                                      f"(zero residual variance)")
            comps.append(ComponentParams(mass[k] / n, g, **margs))
    return comps


def mstep(dataset: Dataset, posteriors, response_kind: str, design: DesignSpec,
          previous: Optional[Sequence[ComponentParams]] = None) -> list:
    """Maximize the expected complete-data log-likelihood given posteriors.

    ``previous`` warm-starts the iterative GLM solvers.
    """
    post = np.asarray(posteriors, dtype=float)
    if post.ndim != 2 or post.shape[0] != dataset.n:
        raise InputError("posterior matrix must be n x K")
    if not np.allclose(post.sum(axis=1), 1.0, atol=1e-8):
        raise InputError("posterior rows must sum to 1")
    ctx = _Context(dataset, response_kind, design)
    return _mstep(ctx, post, previous)


# ---------------------------------------------------------------------------
# parameter counting


def marginal_parameter_count(dataset: Dataset) -> int:
    """Free parameters of one component's covariate marginals."""
    pT = len(dataset.gaussian_specs)
    pU = len(dataset.lognormal_specs)
    disc = sum(s.n_levels - 1 for s in dataset.discrete_specs)
    return pT + pT * (pT + 1) // 2 + pU + pU * (pU + 1) // 2 + disc


def count_parameters(ctx_or_dataset, components, kind: str, design: DesignSpec) -> int:
    """Free parameters of the full joint model (mixing + conditional + marginals)."""
    ds = ctx_or_dataset.ds if isinstance(ctx_or_dataset, _Context) else ctx_or_dataset
    K = len(components)
    marg = marginal_parameter_count(ds)
    wx = len(build_design(ds, design.response).columns)
    wb = len(build_design(ds, design.bernoulli_selection).columns)
    total = K - 1
    for c in components:
        if kind == "gaussian-severity":
            total += wx + 1
        elif kind == "bernoulli-zero":
            total += wb
        elif kind == "poisson-frequency":
            total += wx
        else:
            total += wx + (wb if c.zip is not None and c.zip.inflated else 0)
        total += marg
    return total


# ---------------------------------------------------------------------------
# EM loop


def aitken_converged(l_prev: float, l_cur: float, l_next: float, tol: float) -> bool:
    """Stop when the Aitken asymptote is within ``tol`` of the current value."""
    d1 = l_cur - l_prev
    d2 = l_next - l_cur
    if abs(d2) <= 1e-13 * max(1.0, abs(l_next)):
        return True
    if d1 == 0:
        return False
    a = d2 / d1
    if a >= 1:
        return False
    l_inf = l_cur + d2 / (1 - a)
    return 0 <= l_inf - l_cur < tol


@dataclass
class _Run:
    components: list
    posteriors: np.ndarray
    trace: list
    converged: bool
    iterations: int


def run_em(ctx: _Context, components, stop: StopRule,
           zip_inner_iter: int = ZIP_INNER_ITER) -> _Run:
    """Alternate E- and M-steps from given parameters until the Aitken rule fires."""
    post, ll = _estep(ctx, components)
    trace = [ll]
    converged = ctx.ds.n > 0 and len(components) == 1 and ctx.kind != "zip-frequency"
    it = 0
    while not converged and it < stop.max_iter:
        it += 1
        new = _mstep(ctx, post, components, zip_inner_iter)
        new_post, new_ll = _estep(ctx, new)
        components, post = new, new_post
        trace.append(new_ll)
        if len(trace) >= 3 and aitken_converged(trace[-3], trace[-2], trace[-1], stop.tol):
            converged = True
    return _Run(components, post, trace, converged, it)


def _initial_partitions(ctx: _Context, K: int, init: InitStrategy) -> list:
    n = ctx.n
    if init.labels is not None:
        labels = np.asarray(init.labels, dtype=int)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= K:
            raise InputError("initial labels must be n integers in [0, K)")
        return [np.eye(K)[labels]]
    if K == 1:
        return [np.ones((n, 1))]
    rng = np.random.default_rng(init.seed)
    seeds = rng.integers(0, 2**63 - 1, size=init.n_random + 1)
    parts = []
    if init.kmeans:
        feats = [ctx.t, ctx.logu]
        for r, s in enumerate(ctx.ds.discrete_specs):
            feats.append(np.eye(s.n_levels)[ctx.w[:, r]])
        Z = np.column_stack(feats) if sum(f.shape[1] for f in feats) else ctx.y[:, None]
        sd = Z.std(axis=0)
        Z = (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        _, labels = kmeans2(Z, K, minit="++", seed=np.random.default_rng(seeds[-1]),
                            missing="warn")
        parts.append(np.eye(K)[labels])
    for r in range(init.n_random):
        labels = np.random.default_rng(seeds[r]).integers(0, K, size=n)
        parts.append(np.eye(K)[labels])
    return parts


def _single_restart(ctx, post0, stop):
    try:
        comps = _mstep(ctx, post0)
        return run_em(ctx, comps, stop)
    except CollapseError as exc:
        return exc
    except (np.linalg.LinAlgError, FloatingPointError, ConvergenceError) as exc:
        return exc


def _check_sizing(ctx, K):
    width = max(ctx.X.shape[1], ctx.Xbar.shape[1] if ctx.kind in
                ("bernoulli-zero", "zip-frequency") else 0)
    if K < 1:
        raise InputError("number of components must be >= 1")
    if ctx.n < 5 * K * width:
        raise SizingError(f"n={ctx.n} is too small for K={K} components with design width "
                          f"{width}: need at least {5 * K * width} rows")


def build_model(ctx: _Context, run: _Run, seed=None, **metadata) -> GcwmModel:
    K = len(run.components)
    return GcwmModel(
        K=K, components=run.components, posteriors=run.posteriors,
        loglik_trace=list(run.trace), loglik=run.trace[-1],
        n_params=count_parameters(ctx, run.components, ctx.kind, ctx.design),
        converged=run.converged, response_kind=ctx.kind, design=ctx.design,
        specs=ctx.ds.specs, n=ctx.n, seed=seed, iterations=run.iterations,
        metadata=dict(metadata))


def fit_gcwm(dataset: Dataset, K: int, response_kind: str, design: DesignSpec = DesignSpec(),
             init: InitStrategy = InitStrategy(), stop: StopRule = StopRule()) -> GcwmModel:
    """Fit a K-component GCWM by EM, keeping the best restart by log-likelihood.

    Restarts whose components collapse, or degenerate into an exact fit of
    fewer rows than regression parameters, are discarded; if every restart
    fails a :class:`ConvergenceError` is raised.
    """
    ctx = _Context(dataset, response_kind, design)
    _check_sizing(ctx, K)
    parts = _initial_partitions(ctx, K, init)
    results = parallel_map(lambda p: _single_restart(ctx, p, stop), parts)
    good = [r for r in results if isinstance(r, _Run)]
    if not good:
        reasons = "; ".join(sorted({str(r) for r in results}))[:500]
        raise ConvergenceError(f"all {len(results)} restarts failed ({reasons})")
    best = max(good, key=lambda r: r.trace[-1])
    return build_model(ctx, best, seed=init.seed, restarts=len(parts),
                       failed_restarts=len(results) - len(good))


def refit_from(dataset: Dataset, model: GcwmModel, stop: StopRule = StopRule()) -> GcwmModel:
    """Continue EM from an existing model's parameters."""
    ctx = _Context(dataset, model.response_kind, model.design)
    run = run_em(ctx, model.components, stop)
    return build_model(ctx, run, seed=model.seed, **model.metadata)
