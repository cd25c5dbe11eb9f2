"""Seeded sampling and the dense linear algebra the samplers need.

All draws go through a :class:`numpy.random.Generator` backed by PCG64 and
seeded from ``SeedSequence(seed, spawn_key=(stream_id,))``, so every
(seed, stream) pair yields the same sequence on every platform and
independent streams can be handed to parallel chains.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import linalg

from .errors import (
    DegreesOfFreedomTooSmall,
    DimensionMismatch,
    InvalidParameter,
    NotPositiveDefinite,
    TooFewSamples,
)


def make_rng(seed: int, stream_id: int | tuple[int, ...] = 0) -> np.random.Generator:
    """Generator for one (seed, stream) pair."""
    key = stream_id if isinstance(stream_id, tuple) else (int(stream_id),)
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` child generators, deterministic given the parent's seed sequence."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in rng.bit_generator.seed_seq.spawn(n)]


# ---------------------------------------------------------------------------
# linear algebra

def _first_bad_minor(m: np.ndarray) -> int:
    for k in range(1, m.shape[0] + 1):
        try:
            np.linalg.cholesky(m[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return m.shape[0]


def cholesky(m: np.ndarray, where: str = "") -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises :class:`NotPositiveDefinite` carrying the order of the first
    failing leading minor.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"square matrix required, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite(1, where or "non-finite entries")
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(_first_bad_minor(m), where) from None
    if np.any(np.diag(L) <= 0) or not np.all(np.isfinite(L)):
        raise NotPositiveDefinite(int(np.argmin(np.diag(L) > 0)) + 1, where)
    return L


def batched_cholesky(m: np.ndarray, where: str = "") -> np.ndarray:
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        for mat in m.reshape(-1, *m.shape[-2:]):
            cholesky(mat, where)
        raise NotPositiveDefinite(1, where) from None
    return L


def spd_inverse(m: np.ndarray, where: str = "") -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    L = cholesky(m, where)
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return Linv.T @ Linv


def logdet_from_cholesky(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1))


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


# ---------------------------------------------------------------------------
# random draws

def sample_gamma(shape, rate, rng: np.random.Generator, size=None):
    """Gamma(shape, rate) with mean ``shape / rate``."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise InvalidParameter(f"gamma needs shape > 0 and rate > 0 (got {shape}, {rate})")
    out = rng.gamma(shape, 1.0 / rate, size=size)
    return float(out) if np.ndim(out) == 0 else out


def sample_mvn(mean, precision, rng: np.random.Generator, size: int | None = None,
               where: str = "") -> np.ndarray:
    """Draw from N(mean, precision^-1) without forming the covariance.

    With ``precision = L L^T`` the draw is ``mean + L^-T z``.
    """
    mean = np.asarray(mean, dtype=float)
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    K = mean.shape[-1] if mean.ndim else 1
    if precision.shape != (K, K):
        raise DimensionMismatch(f"mean has {K} components, precision is {precision.shape}")
    L = cholesky(precision, where)
    n = 1 if size is None else int(size)
    z = rng.standard_normal((K, n))
    x = linalg.solve_triangular(L, z, lower=True, trans="T")
    draws = mean.reshape(1, K) + x.T
    return draws[0] if size is None else draws


def _bartlett_factor(df: float, K: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` lower-triangular Bartlett factors ``A`` with ``A A^T ~ W(df, I)``."""
    A = np.zeros((n, K, K))
    # chi2(df - i) on the diagonal as 2 * Gamma((df - i)/2, 1)
    dof = df - np.arange(K)
    A[:, np.arange(K), np.arange(K)] = np.sqrt(2.0 * rng.standard_gamma(dof / 2.0, size=(n, K)))
    rows, cols = np.tril_indices(K, -1)
    if rows.size:
        A[:, rows, cols] = rng.standard_normal((n, rows.size))
    return A


def sample_wishart(df: float, scale, rng: np.random.Generator, size: int | None = None,
                   where: str = "") -> np.ndarray:
    """Wishart(df, scale) by the Bartlett decomposition; mean ``df * scale``.

    ``W = (L A)(L A)^T`` where ``scale = L L^T`` and ``A`` is lower
    triangular with chi variates on the diagonal and N(0, 1) below it.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    K = scale.shape[0]
    if scale.shape != (K, K):
        raise DimensionMismatch(f"scale must be square, got {scale.shape}")
    if not df > K - 1:
        raise DegreesOfFreedomTooSmall(f"df={df} must exceed K-1={K - 1}")
    L = cholesky(scale, where)
    n = 1 if size is None else int(size)
    LA = L @ _bartlett_factor(float(df), K, rng, n)
    W = symmetrize(LA @ np.swapaxes(LA, -1, -2))
    return W[0] if size is None else W


def sample_wishart_from_rate(df: float, rate, rng: np.random.Generator, where: str = "") -> np.ndarray:
    """Wishart(df, rate^-1) given the inverse scale ``rate``.

    Uses ``rate = R R^T`` so that ``scale = R^-T R^-1``; the draw is
    ``(R^-T A)(R^-T A)^T`` and no explicit inverse is formed.
    """
    rate = np.atleast_2d(np.asarray(rate, dtype=float))
    K = rate.shape[0]
    if not df > K - 1:
        raise DegreesOfFreedomTooSmall(f"df={df} must exceed K-1={K - 1}")
    R = cholesky(rate, where)
    A = _bartlett_factor(float(df), K, rng, 1)[0]
    M = linalg.solve_triangular(R, A, lower=True, trans="T")
    return symmetrize(M @ M.T)


# ---------------------------------------------------------------------------
# HPD estimation from draws

def hpd_window_size(n: int, alpha: float) -> int:
    # index offset between the interval's end points; the interval covers
    # ceil((1 - alpha) n) + 1 order statistics, at most all of them
    m = math.ceil((1.0 - alpha) * n - 1e-9)
    return int(min(max(m, 1), n - 1))


def hpd_interval(samples, alpha: float = 0.05, *, min_samples: int = 100,
                 presorted: bool = False) -> tuple[float, float]:
    """Shortest interval ``[x_(i), x_(i+m)]`` with ``m = ceil((1-alpha) n)``.

    The usual sample estimator of a highest-density interval for a
    unimodal distribution.
    """
    if not 0 < alpha < 1:
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha}")
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples:
        raise TooFewSamples(f"{x.size} samples, need at least {min_samples}")
    if not presorted:
        x = np.sort(x)
    m = hpd_window_size(x.size, alpha)
    widths = x[m:] - x[:-m]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m])


def hpd_intervals_multi(samples, alphas, *, min_samples: int = 100) -> np.ndarray:
    """HPD intervals of one sample set at several levels; shape ``(len(alphas), 2)``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    return np.array([hpd_interval(x, a, min_samples=min_samples, presorted=True) for a in alphas])


def density_threshold(density_values, alpha: float, *, min_samples: int = 1) -> float:
    """Density level ``gamma`` cutting off the lowest ``alpha`` fraction.

    ``gamma`` is the ``ceil(alpha n)``-th smallest value (the smallest value
    for ``alpha = 0``), so at least ``(1 - alpha) n`` values are ``>= gamma``.
    Works equally on log densities since the map is monotone.
    """
    if not 0 <= alpha < 1:
        raise InvalidParameter(f"alpha must lie in [0, 1), got {alpha}")
    d = np.sort(np.asarray(density_values, dtype=float).ravel())
    if d.size < max(min_samples, 1):
        raise TooFewSamples(f"{d.size} density values, need at least {max(min_samples, 1)}")
    k = max(math.ceil(alpha * d.size - 1e-9), 1)
    return float(d[k - 1])


# ---------------------------------------------------------------------------
# chain diagnostics

def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    x = x - x.mean(axis=0)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft, axis=0)
    acov = np.fft.irfft(f * np.conjugate(f), nfft, axis=0)[:n] / n
    var = acov[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        return acov / np.where(var > 0, var, 1.0)


def effective_sample_size(draws) -> np.ndarray:
    """ESS per column of an ``(n_draws, n_scalars)`` array.

    Geyer's initial monotone sequence estimator on a single chain.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    rho = _autocorr(x)
    ess = np.empty(p)
    for j in range(p):
        if np.ptp(x[:, j]) == 0:
            ess[j] = float(n)
            continue
        r = rho[:, j]
        pairs = r[: n - n % 2].reshape(-1, 2).sum(axis=1)
        tau = -1.0
        prev = np.inf
        for g in pairs:
            if g <= 0:
                break
            g = min(g, prev)
            tau += 2.0 * g
            prev = g
        ess[j] = n / max(tau, 1.0 / np.log10(max(n, 10)))
    return ess


def split_rhat(draws, n_splits: int = 4) -> np.ndarray:
    """Split-R-hat per column, splitting one chain into ``n_splits`` pieces."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] // n_splits
    if n < 2:
        raise TooFewSamples(f"{x.shape[0]} draws cannot be split {n_splits} ways")
    chains = x[: n * n_splits].reshape(n_splits, n, -1)
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.sqrt(var_plus / W)
    return np.where(W > 0, rhat, 1.0)
