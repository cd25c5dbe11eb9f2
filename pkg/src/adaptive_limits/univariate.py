"""Conjugate Normal-Gamma model for one athlete and one marker.

Log values are iid N(mu, 1/tau) with mu | tau ~ N(mu0, 1/(kappa0 tau)) and
tau ~ Gamma(alpha0, rate=beta0). Posterior updates are closed form; limits
are the HPD interval of posterior-predictive replicates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidParameter, TooFewObservations, TooFewSamples
from .profiles import Sex
from .stochastic import hpd_interval, hpd_intervals_multi, sample_gamma


@dataclass(frozen=True)
class NormalGammaParams:
    mu: float
    kappa: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.alpha > 0 and self.beta > 0):
            raise InvalidParameter(f"kappa, alpha, beta must be > 0: {self}")
        if not np.isfinite(self.mu):
            raise InvalidParameter(f"mu must be finite: {self.mu}")

    def predictive_t(self):
        """Analytic posterior predictive, a Student t (scipy frozen dist)."""
        scale = np.sqrt(self.beta * (self.kappa + 1.0) / (self.alpha * self.kappa))
        return stats.t(df=2.0 * self.alpha, loc=self.mu, scale=scale)


@dataclass(frozen=True)
class UnivariateConfig:
    kappa0: float = 1.0
    alpha0: float = 10.0
    beta0: float = 1.0
    mu0_by_sex: Mapping[Sex, float] = field(default_factory=dict)
    n_draws: int = 5000
    burn_in: int = 1000
    alpha_level: float = 0.05

    def __post_init__(self):
        if not (self.kappa0 > 0 and self.alpha0 > 0 and self.beta0 > 0):
            raise InvalidParameter("kappa0, alpha0 and beta0 must be positive")
        if self.n_draws < 1 or not 0 <= self.burn_in < self.n_draws:
            raise InvalidParameter("need n_draws >= 1 and 0 <= burn_in < n_draws")
        if not 0 < self.alpha_level < 1:
            raise InvalidParameter("alpha_level must lie in (0, 1)")

    def prior(self, sex: Sex | str | None = None, mu0: float | None = None) -> NormalGammaParams:
        """Prior for one athlete; ``mu0`` must come from the baseline or be given."""
        if mu0 is None:
            key = Sex(sex) if sex is not None else None
            if key not in self.mu0_by_sex:
                raise InvalidParameter(f"no prior mean configured for sex={sex!r}")
            mu0 = self.mu0_by_sex[key]
        return NormalGammaParams(float(mu0), self.kappa0, self.alpha0, self.beta0)


def posterior_update(prior: NormalGammaParams, data: Sequence[float]) -> NormalGammaParams:
    y = np.asarray(data, dtype=float).ravel()
    n = y.size
    if n == 0:
        return prior
    if not np.all(np.isfinite(y)):
        raise InvalidParameter("data must be finite")
    ybar = float(y.mean())
    kappa_n = prior.kappa + n
    mu_n = (prior.kappa * prior.mu + n * ybar) / kappa_n
    alpha_n = prior.alpha + n / 2.0
    beta_n = (prior.beta + 0.5 * float(np.sum((y - ybar) ** 2))
              + prior.kappa * n / (2.0 * kappa_n) * (ybar - prior.mu) ** 2)
    return NormalGammaParams(mu_n, kappa_n, alpha_n, beta_n)


def sample_posterior(params: NormalGammaParams, n_draws: int, rng: np.random.Generator,
                     burn_in: int = 0) -> np.ndarray:
    """``(n_draws, 2)`` array of (mu, tau) draws.

    The draws are iid, so ``burn_in`` extra pairs are generated and
    discarded only to keep the interface aligned with the Gibbs sampler.
    """
    total = int(n_draws) + int(burn_in)
    tau = sample_gamma(params.alpha, params.beta, rng, size=total)
    mu = params.mu + rng.standard_normal(total) / np.sqrt(params.kappa * tau)
    return np.column_stack([mu, tau])[burn_in:]


def predictive_density(draws: np.ndarray, y_new) -> np.ndarray | float:
    """Monte Carlo average of N(y | mu_t, 1/tau_t) over the draws."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    mu, tau = draws[:, 0], draws[:, 1]
    y = np.asarray(y_new, dtype=float)
    dy = y[..., None] - mu
    dens = np.sqrt(tau / (2 * np.pi)) * np.exp(-0.5 * tau * dy * dy)
    out = dens.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def predictive_replicates(draws: np.ndarray, rng: np.random.Generator,
                          n_rep: int | None = None) -> np.ndarray:
    """One predictive draw per posterior draw, cycling if ``n_rep`` is larger."""
    draws = np.asarray(draws, dtype=float)
    n_rep = len(draws) if n_rep is None else int(n_rep)
    idx = np.arange(n_rep) % len(draws)
    mu, tau = draws[idx, 0], draws[idx, 1]
    return mu + rng.standard_normal(n_rep) / np.sqrt(tau)


def predictive_hpd(draws: np.ndarray, alpha_level: float, rng: np.random.Generator,
                   n_rep: int | None = None) -> tuple[float, float]:
    """HPD interval (log scale) of posterior-predictive replicates."""
    if len(draws) < 1000:
        raise TooFewSamples(f"{len(draws)} posterior draws, need at least 1000")
    reps = predictive_replicates(draws, rng, n_rep)
    return hpd_interval(reps, alpha_level)


def predictive_hpd_grid(draws: np.ndarray, alphas: Sequence[float], rng: np.random.Generator,
                        n_rep: int | None = None) -> np.ndarray:
    """HPD intervals at several levels from one replicate set; shape ``(len(alphas), 2)``."""
    if len(draws) < 1000:
        raise TooFewSamples(f"{len(draws)} posterior draws, need at least 1000")
    return hpd_intervals_multi(predictive_replicates(draws, rng, n_rep), alphas)


def adaptive_limits(history: Sequence[float], prior: NormalGammaParams,
                    config: UnivariateConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Posterior update, sampling and predictive HPD in one call."""
    post = posterior_update(prior, history)
    draws = sample_posterior(post, config.n_draws, rng, burn_in=config.burn_in)
    return predictive_hpd(draws, config.alpha_level, rng)


def zscore_limits(data: Sequence[float], z: float = 1.96) -> tuple[float, float]:
    """Mean +/- z * SD (ddof=1) of log values; a simple comparator."""
    y = np.asarray(data, dtype=float).ravel()
    if y.size < 2:
        raise TooFewObservations(f"{y.size} observations, need at least 2")
    m = float(y.mean())
    s = float(y.std(ddof=1))
    return m - z * s, m + z * s

