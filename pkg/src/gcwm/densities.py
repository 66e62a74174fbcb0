"""Marginal and conditional densities used by the mixture components.

Every kernel works on the log scale and is vectorized over rows: pass a
single observation to get a float, or a stack of observations to get an
array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

LOG_2PI = np.log(2.0 * np.pi)
GAMMA_FLOOR = 1e-10


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def regularize_covariance(sigma: np.ndarray) -> np.ndarray:
    """Symmetrize and add a small ridge when the matrix is near singular.

    The ridge ``1e-8 * tr/p`` is added only if the smallest eigenvalue falls
    below ``1e-10 * tr/p``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    sigma = 0.5 * (sigma + sigma.T)
    p = sigma.shape[0]
    if p == 0:
        return sigma
    scale = np.trace(sigma) / p
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    if np.linalg.eigvalsh(sigma)[0] < 1e-10 * scale:
        sigma = sigma + 1e-8 * scale * np.eye(p)
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            # eigenvalues negative beyond the ridge; clip the spectrum instead
            vals, vecs = np.linalg.eigh(sigma)
            sigma = (vecs * np.maximum(vals, 1e-8 * scale)) @ vecs.T
            sigma = 0.5 * (sigma + sigma.T)
    return sigma


@dataclass(frozen=True, eq=False)
class GaussianMarginal:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float)).reshape(mu.size, mu.size)
        if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(sigma).max(initial=0))):
            raise ValueError("covariance matrix must be symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


class LogNormalMarginal(GaussianMarginal):
    """Location ``mu`` and scale ``sigma`` of ``log u``."""


@dataclass(frozen=True, eq=False)
class MultinomialMarginal:
    """One probability vector per discrete covariate."""

    gamma: tuple

    def __post_init__(self):
        gamma = tuple(np.asarray(g, dtype=float) for g in self.gamma)
        for g in gamma:
            if g.ndim != 1 or g.size < 2 or np.any(g <= 0) or abs(g.sum() - 1.0) > 1e-12:
                raise ValueError("each multinomial probability vector must be positive "
                                 "and sum to 1")
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def from_proportions(cls, props: Sequence[np.ndarray]) -> "MultinomialMarginal":
        """Floor at ``GAMMA_FLOOR`` then renormalize, so absent levels stay finite."""
        out = []
        for p in props:
            p = np.maximum(np.asarray(p, dtype=float), GAMMA_FLOOR)
            out.append(p / p.sum())
        return cls(tuple(out))


@dataclass(frozen=True, eq=False)
class ZipConditional:
    """Poisson (log link) and structural-zero (logit link) coefficients.

    ``beta_bar=None`` means no zero inflation, i.e. a plain Poisson conditional.
    """

    beta: np.ndarray
    beta_bar: Optional[np.ndarray] = None
    offset_log_exposure: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, float)))
        if self.beta_bar is not None:
            object.__setattr__(self, "beta_bar",
                               np.atleast_1d(np.asarray(self.beta_bar, float)))

    @property
    def inflated(self) -> bool:
        return self.beta_bar is not None


def _chol(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix is not positive definite") from None


def gaussian_logpdf(t, m: GaussianMarginal):
    """Multivariate normal log-density of ``t`` (shape ``(p,)`` or ``(n, p)``)."""
    t = np.asarray(t, dtype=float)
    single = t.ndim <= 1
    t2 = t.reshape(1, -1) if single else t
    if t2.shape[1] != m.dim:
        raise ValueError(f"dimension mismatch: got {t2.shape[1]}, marginal has {m.dim}")
    L = _chol(m.sigma)
    z = solve_triangular(L, (t2 - m.mu).T, lower=True)
    out = (-0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum()
           - 0.5 * m.dim * LOG_2PI)
    return float(out[0]) if single else out


def lognormal_logpdf(u, m: LogNormalMarginal):
    """Multivariate log-normal log-density: normal density of ``log u`` times the Jacobian."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("log-normal support is strictly positive")
    logu = np.log(u)
    jac = logu.sum(axis=-1)
    return gaussian_logpdf(logu, m) - jac


def multinomial_logpmf(w, m: MultinomialMarginal):
    """Sum of log level probabilities; ``w`` holds 0-based level codes."""
    w = np.asarray(w)
    single = w.ndim <= 1
    w2 = w.reshape(1, -1) if single else w
    if w2.shape[1] != len(m.gamma):
        raise ValueError("number of discrete covariates does not match the marginal")
    out = np.zeros(w2.shape[0])
    for r, g in enumerate(m.gamma):
        codes = w2[:, r]
        if codes.size and (codes.min() < 0 or codes.max() >= g.size):
            raise ValueError(f"level code out of range for discrete covariate {r}")
        out += np.log(g)[codes]
    return float(out[0]) if single else out


def _offset(exposure, z: ZipConditional):
    if not z.offset_log_exposure:
        return 0.0
    return np.log(np.asarray(exposure, dtype=float))


def zip_log_links(x, z: ZipConditional, exposure=1.0, xbar=None):
    """Return ``(log lambda, logit psi)``; logit is ``-inf`` without inflation."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != z.beta.size:
        raise ValueError("design width does not match Poisson coefficients")
    log_lam = x @ z.beta + _offset(exposure, z)
    if z.beta_bar is None:
        logit = np.full(np.shape(log_lam), -np.inf)
    else:
        xb = x if xbar is None else np.asarray(xbar, dtype=float)
        if xb.shape[-1] != z.beta_bar.size:
            raise ValueError("design width does not match zero-inflation coefficients")
        logit = xb @ z.beta_bar
    return log_lam, logit


def zip_links(x, z: ZipConditional, exposure=1.0, xbar=None):
    """Poisson mean ``lambda = exposure * exp(x beta)`` and ``psi = logistic(x beta_bar)``."""
    log_lam, logit = zip_log_links(x, z, exposure, xbar)
    lam = np.exp(log_lam)
    psi = np.where(np.isneginf(logit), 0.0, 1.0 / (1.0 + np.exp(-np.clip(logit, -700, 700))))
    if np.ndim(lam) == 0:
        return float(lam), float(psi)
    return lam, psi


def poisson_logpmf(y, log_lam):
    y = np.asarray(y, dtype=float)
    return y * log_lam - np.exp(log_lam) - gammaln(y + 1.0)


def zip_logpmf(y, x, z: ZipConditional, exposure=1.0, xbar=None):
    """Zero-inflated Poisson log-mass.

    ``q(0) = psi + (1 - psi) exp(-lambda)`` and
    ``q(y) = (1 - psi) exp(-lambda) lambda**y / y!`` for ``y > 0``.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")
    log_lam, logit = zip_log_links(x, z, exposure, xbar)
    pois = poisson_logpmf(y, log_lam)
    if z.beta_bar is None:
        out = pois
    else:
        log_psi = -softplus(-logit)
        log_1mpsi = -softplus(logit)
        out = np.where(y == 0, np.logaddexp(log_psi, log_1mpsi + pois), log_1mpsi + pois)
    return float(out) if np.ndim(out) == 0 else out


def bernoulli_logpmf(target, eta):
    """Log-likelihood of (possibly fractional) targets under a logit model."""
    target = np.asarray(target, dtype=float)
    return target * eta - softplus(eta)


def normal_logpdf(y, mean, var):
    """Univariate normal log-density with per-row mean and common variance."""
    return -0.5 * (LOG_2PI + np.log(var) + (np.asarray(y, float) - mean) ** 2 / var)
