"""Hierarchical multivariate Gaussian model fitted by Gibbs sampling.

Model, for sample i of athlete j (log scale, K markers)::

    y_ij | mu_j ~ N_K(mu_j, Omega_e^-1),   mu_j = mu + b_j
    b_j ~ N_K(0, Omega_b^-1),               mu ~ N_K(mu0, Omega_mu^-1)
    Omega_e, Omega_mu, Omega_b ~ Wishart

Every full conditional is conjugate, so one sweep draws mu, each mu_j,
then the three precision matrices, in that order.

Wishart conditionals are written in terms of a *rate* (inverse-scale)
matrix: the posterior for Omega_e is Wishart(d_e + n, (R_e + scatter)^-1).
``MvPriorConfig.scale_convention`` says, per precision matrix, how the
configured ``S`` maps onto ``R``: ``"rate"`` uses ``R = S`` and ``"scale"``
treats ``S`` as the Wishart scale, so ``R = S^-1``.

With ``S = I/1000`` the default keeps every prior weak: Omega_e and
Omega_b use ``"rate"`` (a negligible term beside the residual scatter) and
Omega_mu uses ``"scale"`` (prior mean precision ``K/1000``, so mu is
essentially unconstrained). Reading all three as ``"scale"`` would add
``1000 I`` to the scatter; reading all three as ``"rate"`` would pin mu
to mu0.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import (
    DimensionMismatch,
    EmptyAthlete,
    InvalidParameter,
    NotPositiveDefinite,
    TooFewSamples,
    UnknownAthlete,
)
from .stochastic import (
    batched_cholesky,
    cholesky,
    density_threshold,
    effective_sample_size,
    hpd_interval,
    sample_wishart_from_rate,
    spd_inverse,
    split_rhat,
    symmetrize,
)

CHAIN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MvPriorConfig:
    mu0: np.ndarray
    S_e: np.ndarray
    S_mu: np.ndarray
    S_b: np.ndarray
    d_e: float
    d_mu: float
    d_b: float
    scale_convention: str | Mapping[str, str] = "default"

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        K = mu0.size
        object.__setattr__(self, "mu0", mu0)
        for name in ("S_e", "S_mu", "S_b"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.shape != (K, K):
                raise DimensionMismatch(f"{name} has shape {m.shape}, expected {(K, K)}")
            cholesky(m, name)
            object.__setattr__(self, name, m)
        for name in ("d_e", "d_mu", "d_b"):
            if not getattr(self, name) > K - 1:
                raise InvalidParameter(f"{name}={getattr(self, name)} must exceed K-1={K - 1}")
        object.__setattr__(self, "scale_convention", _conventions(self.scale_convention))

    @classmethod
    def default(cls, mu0, scale: float = 1e-3, df: float | None = None,
                scale_convention: str | Mapping[str, str] = "default") -> "MvPriorConfig":
        """``S = scale * I`` for all three precisions and ``df = K``."""
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        K = mu0.size
        S = scale * np.eye(K)
        d = float(K if df is None else df)
        return cls(mu0, S, S.copy(), S.copy(), d, d, d, scale_convention)

    @property
    def K(self) -> int:
        return self.mu0.size

    def rate(self, which: str) -> np.ndarray:
        S = getattr(self, f"S_{which}")
        if self.scale_convention[which] == "rate":
            return S
        return spd_inverse(S, f"S_{which}")

    def to_dict(self) -> dict:
        return {
            "mu0": self.mu0.tolist(), "S_e": self.S_e.tolist(), "S_mu": self.S_mu.tolist(),
            "S_b": self.S_b.tolist(), "d_e": self.d_e, "d_mu": self.d_mu, "d_b": self.d_b,
            "scale_convention": dict(self.scale_convention),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MvPriorConfig":
        return cls(np.array(d["mu0"]), np.array(d["S_e"]), np.array(d["S_mu"]),
                   np.array(d["S_b"]), d["d_e"], d["d_mu"], d["d_b"],
                   d.get("scale_convention", "default"))


DEFAULT_CONVENTIONS = {"e": "rate", "mu": "scale", "b": "rate"}


def _conventions(value) -> dict[str, str]:
    if isinstance(value, str):
        if value == "default":
            return dict(DEFAULT_CONVENTIONS)
        value = {w: value for w in ("e", "mu", "b")}
    out = dict(DEFAULT_CONVENTIONS)
    for w, v in dict(value).items():
        if w not in out:
            raise InvalidParameter(f"unknown precision matrix {w!r} in scale_convention")
        if v not in ("rate", "scale"):
            raise InvalidParameter(f"scale_convention must be 'rate' or 'scale', not {v!r}")
        out[w] = v
    return out


@dataclass(frozen=True)
class GibbsConfig:
    total_iterations: int = 3000
    burn_in_fraction: float = 1.0 / 3.0
    thinning: int = 1
    seed: int = 0
    init: str = "moments"

    def __post_init__(self):
        if self.total_iterations < 1 or self.thinning < 1:
            raise InvalidParameter("total_iterations and thinning must be >= 1")
        if not 0 <= self.burn_in_fraction < 1:
            raise InvalidParameter("burn_in_fraction must lie in [0, 1)")
        if self.init not in ("moments", "prior"):
            raise InvalidParameter("init must be 'moments' or 'prior'")

    @property
    def burn_in(self) -> int:
        return int(round(self.total_iterations * self.burn_in_fraction))

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.total_iterations, self.thinning))


@dataclass
class MvModelState:
    mu: np.ndarray
    mu_j: np.ndarray
    omega_e: np.ndarray
    omega_mu: np.ndarray
    omega_b: np.ndarray

    def copy(self) -> "MvModelState":
        return MvModelState(self.mu.copy(), self.mu_j.copy(), self.omega_e.copy(),
                            self.omega_mu.copy(), self.omega_b.copy())


class GroupedData:
    """Per-athlete log-value blocks with the sufficient statistics cached."""

    def __init__(self, blocks: Sequence[np.ndarray], athlete_ids: Sequence[str] | None = None):
        blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        if not blocks:
            raise EmptyAthlete("no athletes")
        K = blocks[0].shape[1]
        if K < 1:
            raise DimensionMismatch("K must be >= 1")
        for j, b in enumerate(blocks):
            if b.shape[0] < 1 or b.size == 0:
                raise EmptyAthlete(f"athlete {j} has no samples")
            if b.shape[1] != K:
                raise DimensionMismatch(f"athlete {j} has {b.shape[1]} markers, expected {K}")
            if not np.all(np.isfinite(b)):
                raise InvalidParameter(f"athlete {j} has non-finite values")
        self.blocks = blocks
        self.K = K
        self.J = len(blocks)
        self.athlete_ids = tuple(athlete_ids) if athlete_ids is not None else tuple(
            str(j) for j in range(self.J))
        if len(self.athlete_ids) != self.J:
            raise DimensionMismatch("one id per athlete block required")
        self.n_j = np.array([b.shape[0] for b in blocks])
        self.N = int(self.n_j.sum())
        self.sums = np.vstack([b.sum(axis=0) for b in blocks])
        self.means = self.sums / self.n_j[:, None]
        self.yy = sum(b.T @ b for b in blocks)
        self.groups = [(int(n), np.flatnonzero(self.n_j == n)) for n in np.unique(self.n_j)]

    def within_scatter(self, mu_j: np.ndarray) -> np.ndarray:
        """``sum_j sum_i (y_ij - mu_j)(y_ij - mu_j)^T`` from cached statistics."""
        cross = self.sums.T @ mu_j
        return symmetrize(self.yy - cross - cross.T + (mu_j.T * self.n_j) @ mu_j)

    def append(self, block: np.ndarray, athlete_id: str) -> "GroupedData":
        return GroupedData(self.blocks + [block], self.athlete_ids + (athlete_id,))


def _as_grouped(data) -> GroupedData:
    return data if isinstance(data, GroupedData) else GroupedData(data)


def gibbs_init(data, prior: MvPriorConfig, rng: np.random.Generator,
               init: str = "moments") -> MvModelState:
    """Initial state: ``mu = mu0``, ``mu_j`` = athlete sample means.

    ``init="prior"`` draws the precisions from their Wishart priors.
    ``init="moments"`` starts them at pooled within- and between-athlete
    precisions (shrunk by the prior rate) and falls back to prior draws
    where the data cannot inform them.
    """
    data = _as_grouped(data)
    K = prior.K
    if data.K != K:
        raise DimensionMismatch(f"data has K={data.K}, prior has K={K}")
    mu = prior.mu0.copy()
    mu_j = data.means.copy()
    draws = {w: sample_wishart_from_rate(getattr(prior, f"d_{w}"), prior.rate(w), rng,
                                         where=f"prior Omega_{w}")
             for w in ("e", "mu", "b")}
    if init == "prior":
        return MvModelState(mu, mu_j, draws["e"], draws["mu"], draws["b"])

    omega_e = draws["e"]
    dof_within = data.N - data.J
    if dof_within >= K:
        scatter = data.within_scatter(mu_j)
        cov = (scatter + prior.rate("e")) / (dof_within + prior.d_e)
        omega_e = spd_inverse(cov, "initial Omega_e")
    omega_b = draws["b"]
    if data.J > K:
        dev = mu_j - mu_j.mean(axis=0)
        cov = (dev.T @ dev + prior.rate("b")) / (data.J + prior.d_b)
        omega_b = spd_inverse(cov, "initial Omega_b")
    omega_mu = prior.d_mu * spd_inverse(prior.rate("mu"), "prior mean Omega_mu")
    return MvModelState(mu, mu_j, omega_e, omega_mu, omega_b)


def _draw_mu(state: MvModelState, data: GroupedData, prior: MvPriorConfig,
             rng: np.random.Generator) -> np.ndarray:
    A = data.J * state.omega_b + state.omega_mu
    b = state.omega_mu @ prior.mu0 + state.omega_b @ state.mu_j.sum(axis=0)
    L = cholesky(A, "conditional of mu")
    mean = linalg.cho_solve((L, True), b)
    z = rng.standard_normal(prior.K)
    return mean + linalg.solve_triangular(L, z, lower=True, trans="T")


def draw_athlete_means(mu: np.ndarray, omega_b: np.ndarray, omega_e: np.ndarray,
                       n_j: np.ndarray, sums: np.ndarray, groups, rng: np.random.Generator,
                       ) -> np.ndarray:
    """Draw every ``mu_j`` from N(A'^-1 b', A'^-1), ``A' = Omega_b + n_j Omega_e``.

    Athletes sharing ``n_j`` share ``A'``, so one factorisation serves the group.
    """
    J, K = sums.shape
    out = np.empty((J, K))
    z = rng.standard_normal((J, K))
    rhs = (omega_b @ mu)[None, :] + sums @ omega_e.T
    for n, idx in groups:
        L = cholesky(omega_b + n * omega_e, "conditional of mu_j")
        mean = linalg.cho_solve((L, True), rhs[idx].T)
        noise = linalg.solve_triangular(L, z[idx].T, lower=True, trans="T")
        out[idx] = (mean + noise).T
    return out


def wishart_rates(state: MvModelState, data: GroupedData, prior: MvPriorConfig):
    """Posterior (df, rate) pairs for Omega_e, Omega_mu, Omega_b given the means."""
    dmu = state.mu - prior.mu0
    dev = state.mu_j - state.mu
    return {
        "e": (prior.d_e + data.N, prior.rate("e") + data.within_scatter(state.mu_j)),
        "mu": (prior.d_mu + 1, prior.rate("mu") + np.outer(dmu, dmu)),
        "b": (prior.d_b + data.J, prior.rate("b") + symmetrize(dev.T @ dev)),
    }


def gibbs_step(state: MvModelState, data, prior: MvPriorConfig,
               rng: np.random.Generator) -> MvModelState:
    """One sweep over the full conditionals: mu, mu_j, Omega_e, Omega_mu, Omega_b."""
    data = _as_grouped(data)
    new = state.copy()
    new.mu = _draw_mu(state, data, prior, rng)
    new.mu_j = draw_athlete_means(new.mu, state.omega_b, state.omega_e, data.n_j, data.sums,
                                  data.groups, rng)
    rates = wishart_rates(new, data, prior)
    for w in ("e", "mu", "b"):
        df, rate = rates[w]
        setattr(new, f"omega_{w}", sample_wishart_from_rate(df, rate, rng, f"conditional of Omega_{w}"))
    return new


@dataclass
class MvChain:
    """Retained Gibbs states stored as stacked arrays (draw axis first)."""

    mu: np.ndarray          # (T, K)
    mu_j: np.ndarray        # (T, J, K)
    omega_e: np.ndarray     # (T, K, K)
    omega_mu: np.ndarray
    omega_b: np.ndarray
    config: GibbsConfig
    prior: MvPriorConfig
    athlete_ids: tuple[str, ...]
    markers: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)
    last_state: MvModelState | None = None
    rng_state: dict | None = None
    _chol_e: np.ndarray | None = field(default=None, repr=False)
    _noise_e: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.mu.shape[1]

    @property
    def J(self) -> int:
        return self.mu_j.shape[1]

    @property
    def states(self) -> list[MvModelState]:
        return [MvModelState(self.mu[t], self.mu_j[t], self.omega_e[t], self.omega_mu[t],
                             self.omega_b[t]) for t in range(len(self))]

    def athlete_index(self, athlete) -> int:
        if isinstance(athlete, (int, np.integer)):
            if not 0 <= athlete < self.J:
                raise UnknownAthlete(f"athlete index {athlete} outside 0..{self.J - 1}")
            return int(athlete)
        try:
            return self.athlete_ids.index(athlete)
        except ValueError:
            raise UnknownAthlete(f"athlete {athlete!r} not in the fit") from None

    @property
    def chol_e(self) -> np.ndarray:
        """Cholesky factors of every retained Omega_e (cached)."""
        if self._chol_e is None:
            self._chol_e = batched_cholesky(self.omega_e, "retained Omega_e")
        return self._chol_e

    @property
    def noise_e(self) -> np.ndarray:
        """``L^-T`` per state, so ``L^-T z`` has covariance ``Omega_e^-1`` (cached)."""
        if self._noise_e is None:
            self._noise_e = np.swapaxes(np.linalg.inv(self.chol_e), -1, -2)
        return self._noise_e

    def posterior_mean(self) -> MvModelState:
        return MvModelState(self.mu.mean(0), self.mu_j.mean(0), self.omega_e.mean(0),
                            self.omega_mu.mean(0), self.omega_b.mean(0))

    def scalar_draws(self) -> tuple[np.ndarray, list[str]]:
        """Draw matrix over all scalar parameters (upper triangles for Omegas)."""
        T, K = self.mu.shape
        iu = np.triu_indices(K)
        cols = [self.mu, self.mu_j.reshape(T, -1)]
        names = [f"mu[{k}]" for k in range(K)]
        names += [f"mu_j[{j},{k}]" for j in range(self.J) for k in range(K)]
        for nm in ("omega_e", "omega_mu", "omega_b"):
            cols.append(getattr(self, nm)[:, iu[0], iu[1]])
            names += [f"{nm}[{a},{b}]" for a, b in zip(*iu)]
        return np.hstack(cols), names

    def compute_diagnostics(self) -> dict:
        x, names = self.scalar_draws()
        if len(self) < 8:
            self.diagnostics = {"names": names, "ess": [float(len(self))] * len(names),
                                "split_rhat": [float("nan")] * len(names)}
            return self.diagnostics
        ess = effective_sample_size(x)
        rhat = split_rhat(x)
        self.diagnostics = {"names": names, "ess": ess.tolist(), "split_rhat": rhat.tolist()}
        return self.diagnostics

    def for_new_athlete(self, history, rng: np.random.Generator,
                        athlete_id: str = "new") -> "MvChain":
        """Chain for one additional athlete, population draws held fixed.

        For each retained state the new athlete's mean is drawn from its full
        conditional N(A'^-1 b', A'^-1) given that state's mu, Omega_b, Omega_e
        and the athlete's ``history`` (``n x K``, n may be 0). The returned
        chain has a single athlete (index 0) and shares the population arrays.
        """
        hist = np.asarray(history, dtype=float).reshape(-1, self.K)
        n = hist.shape[0]
        s = hist.sum(axis=0)
        T, K = self.mu.shape
        A = self.omega_b + n * self.omega_e
        b = np.einsum("tkl,tl->tk", self.omega_b, self.mu) + self.omega_e @ s
        Linv = np.linalg.inv(batched_cholesky(A, "conditional of new athlete mean"))
        LinvT = np.swapaxes(Linv, -1, -2)
        mean = np.einsum("tkl,tl->tk", LinvT, np.einsum("tkl,tl->tk", Linv, b))
        z = rng.standard_normal((T, K))
        mu_new = (mean + np.einsum("tkl,tl->tk", LinvT, z))[:, None, :]
        return MvChain(self.mu, mu_new, self.omega_e, self.omega_mu, self.omega_b,
                       self.config, self.prior, (athlete_id,), self.markers,
                       _chol_e=self.chol_e, _noise_e=self.noise_e)

    # -- serialization -----------------------------------------------------

    def save(self, path_or_file, metadata: dict | None = None) -> None:
        meta = {
            "format_version": CHAIN_FORMAT_VERSION,
            "config": asdict(self.config),
            "prior": self.prior.to_dict(),
            "athlete_ids": list(self.athlete_ids),
            "markers": list(self.markers),
            "rng_state": self.rng_state,
            "diagnostics": self.diagnostics,
            "extra": metadata or {},
        }
        arrays = dict(mu=self.mu, mu_j=self.mu_j, omega_e=self.omega_e,
                      omega_mu=self.omega_mu, omega_b=self.omega_b)
        if self.last_state is not None:
            ls = self.last_state
            arrays.update(last_mu=ls.mu, last_mu_j=ls.mu_j, last_omega_e=ls.omega_e,
                          last_omega_mu=ls.omega_mu, last_omega_b=ls.omega_b)
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
        data = buf.getvalue()
        if hasattr(path_or_file, "write"):
            path_or_file.write(data)
        else:
            with open(path_or_file, "wb") as fh:
                fh.write(data)

    @classmethod
    def load(cls, path_or_file) -> "MvChain":
        with np.load(path_or_file) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format_version") != CHAIN_FORMAT_VERSION:
                raise InvalidParameter(f"unsupported chain format {meta.get('format_version')}")
            arrays = {k: z[k] for k in z.files if k != "meta"}
        last = None
        if "last_mu" in arrays:
            last = MvModelState(arrays["last_mu"], arrays["last_mu_j"], arrays["last_omega_e"],
                                arrays["last_omega_mu"], arrays["last_omega_b"])
        return cls(arrays["mu"], arrays["mu_j"], arrays["omega_e"], arrays["omega_mu"],
                   arrays["omega_b"], GibbsConfig(**meta["config"]),
                   MvPriorConfig.from_dict(meta["prior"]), tuple(meta["athlete_ids"]),
                   tuple(meta["markers"]), meta.get("diagnostics") or {}, last,
                   meta.get("rng_state"))


def run_gibbs(data, prior: MvPriorConfig, config: GibbsConfig | None = None,
              rng: np.random.Generator | None = None, *, init_state: MvModelState | None = None,
              markers: Sequence[str] = (), diagnostics: bool = True) -> MvChain:
    """Run ``config.total_iterations`` sweeps and keep the post-burn-in draws."""
    from .stochastic import make_rng

    config = config or GibbsConfig()
    data = _as_grouped(data)
    rng = rng if rng is not None else make_rng(config.seed)
    state = init_state.copy() if init_state is not None else gibbs_init(data, prior, rng, config.init)
    if state.mu_j.shape != (data.J, data.K):
        raise DimensionMismatch(f"initial mu_j {state.mu_j.shape} vs data {(data.J, data.K)}")
    keep = range(config.burn_in, config.total_iterations, config.thinning)
    T, K, J = len(keep), data.K, data.J
    mu = np.empty((T, K))
    mu_j = np.empty((T, J, K))
    om = {w: np.empty((T, K, K)) for w in ("e", "mu", "b")}
    slot = 0
    for it in range(config.total_iterations):
        state = gibbs_step(state, data, prior, rng)
        if it >= config.burn_in and (it - config.burn_in) % config.thinning == 0:
            mu[slot] = state.mu
            mu_j[slot] = state.mu_j
            om["e"][slot], om["mu"][slot], om["b"][slot] = state.omega_e, state.omega_mu, state.omega_b
            slot += 1
    chain = MvChain(mu, mu_j, om["e"], om["mu"], om["b"], config, prior, data.athlete_ids,
                    tuple(markers), last_state=state,
                    rng_state=rng.bit_generator.state)
    if diagnostics:
        chain.compute_diagnostics()
    return chain


def resume_gibbs(chain: MvChain, data, n_iterations: int, *,
                 diagnostics: bool = True) -> MvChain:
    """Continue a saved chain from its last state and generator state.

    All ``n_iterations`` new sweeps are retained (no further burn-in).
    """
    if chain.last_state is None or chain.rng_state is None:
        raise InvalidParameter("chain was saved without its final state")
    bg = np.random.PCG64()
    bg.state = chain.rng_state
    rng = np.random.Generator(bg)
    cfg = GibbsConfig(total_iterations=n_iterations, burn_in_fraction=0.0,
                      thinning=chain.config.thinning, seed=chain.config.seed, init=chain.config.init)
    return run_gibbs(data, chain.prior, cfg, rng, init_state=chain.last_state,
                     markers=chain.markers, diagnostics=diagnostics)


def refit_with_athlete(chain: MvChain, data, history, config: GibbsConfig,
                       rng: np.random.Generator, athlete_id: str = "new") -> MvChain:
    """Full refit with the new athlete appended, warm-started at the posterior means."""
    data = _as_grouped(data)
    hist = np.asarray(history, dtype=float).reshape(-1, data.K)
    if hist.shape[0] == 0:
        return chain.for_new_athlete(hist, rng, athlete_id)
    ext = data.append(hist, athlete_id)
    pm = chain.posterior_mean()
    init = MvModelState(pm.mu, np.vstack([pm.mu_j, hist.mean(axis=0)]), pm.omega_e,
                        pm.omega_mu, pm.omega_b)
    return run_gibbs(ext, chain.prior, config, rng, init_state=init, markers=chain.markers,
                     diagnostics=False)


# ---------------------------------------------------------------------------
# posterior predictive

def log_predictive_density_mv(chain: MvChain, athlete, y_new) -> np.ndarray | float:
    """Log of the Monte Carlo predictive density for athlete ``athlete``.

    ``log (1/T) sum_t N(y | mu_j^(t), Omega_e^(t)^-1)`` evaluated with
    Cholesky log-determinants and a log-sum-exp.
    """
    j = chain.athlete_index(athlete)
    y = np.asarray(y_new, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[1] != chain.K:
        raise DimensionMismatch(f"y has {Y.shape[1]} components, chain has K={chain.K}")
    L = chain.chol_e                                         # (T, K, K)
    half_logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)  # (T,)
    const = -0.5 * chain.K * np.log(2 * np.pi)
    mu = chain.mu_j[:, j, :]                                 # (T, K)
    T = len(chain)
    out = np.empty(Y.shape[0])
    chunk = max(1, 2_000_000 // max(T * chain.K, 1))
    for start in range(0, Y.shape[0], chunk):
        d = Y[start:start + chunk, None, :] - mu[None, :, :]     # (M, T, K)
        u = np.einsum("mtk,tkl->mtl", d, L)                      # rows of d @ L
        q = np.einsum("mtl,mtl->mt", u, u)
        out[start:start + chunk] = logsumexp(const + half_logdet[None, :] - 0.5 * q, axis=1) - np.log(T)
    return float(out[0]) if single else out


def predictive_density_mv(chain: MvChain, athlete, y_new) -> np.ndarray | float:
    lp = log_predictive_density_mv(chain, athlete, y_new)
    return np.exp(lp)


def predictive_replicates(chain: MvChain, athlete, n_rep: int, rng: np.random.Generator) -> np.ndarray:
    """``(n_rep, K)`` predictive draws, cycling through the retained states."""
    j = chain.athlete_index(athlete)
    T, K = len(chain), chain.K
    idx = np.arange(int(n_rep)) % T
    z = rng.standard_normal((int(n_rep), K))
    noise = np.einsum("nkl,nl->nk", chain.noise_e[idx], z)
    return chain.mu_j[idx, j, :] + noise


def marginal_hpds(replicates, alpha_level: float = 0.05) -> np.ndarray:
    """Per-marker shortest-window HPD intervals; shape ``(K, 2)``."""
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim == 1:
        reps = reps[:, None]
    if reps.shape[0] < 1000:
        raise TooFewSamples(f"{reps.shape[0]} replicates, need at least 1000")
    return np.array([hpd_interval(reps[:, k], alpha_level) for k in range(reps.shape[1])])


@dataclass(frozen=True)
class JointRegion:
    """Highest-predictive-density region ``{y : log p(y) >= log_gamma}``."""

    chain: MvChain
    athlete: int
    log_gamma: float
    alpha_level: float

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    def log_density(self, y) -> np.ndarray | float:
        return log_predictive_density_mv(self.chain, self.athlete, y)

    def contains(self, y) -> np.ndarray | bool:
        lp = self.log_density(y)
        res = np.asarray(lp) >= self.log_gamma
        return bool(res) if np.ndim(res) == 0 else res


def joint_hpd_region(chain: MvChain, athlete, replicates, alpha_level: float = 0.05) -> JointRegion:
    """Density threshold set from the log density at each predictive replicate."""
    j = chain.athlete_index(athlete)
    reps = np.atleast_2d(np.asarray(replicates, dtype=float))
    if reps.shape[0] < 100:
        raise TooFewSamples(f"{reps.shape[0]} replicates, need at least 100")
    lp = log_predictive_density_mv(chain, j, reps)
    return JointRegion(chain, j, density_threshold(lp, alpha_level), alpha_level)
