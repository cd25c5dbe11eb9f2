"""Synthetic cohorts drawn from the hierarchical Gaussian model.

Log concentrations follow ``y_ij = mu_sex + b_j + e_ij`` with
``b_j ~ N(0, Sigma_b)`` and ``e_ij ~ N(0, Sigma_e)``. Ratios are derived
from the simulated concentrations, so they are exact log differences.
Doping is an additive log shift on chosen samples, recorded so that
every label is known.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidSpec, NotPositiveDefinite, TooFewObservations
from .profiles import (
    CONCENTRATIONS,
    Athlete,
    Label,
    LimitFlag,
    Marker,
    ProfileCollection,
    RawSample,
    Sex,
    coerce_marker,
    compute_ratios,
    resolve_markers,
)
from .stochastic import cholesky

# Cross-sectional raw-scale (mean, SD) in ng/mL of healthy volunteers.
REFERENCE_RAW_MOMENTS: dict[Marker, tuple[float, float]] = {
    Marker.T: (39.37, 46.27),
    Marker.E: (33.71, 42.94),
    Marker.A: (2997.3, 2169.41),
    Marker.ETIO: (2719.4, 1803.23),
    Marker.A5: (61.7, 64.68),
    Marker.B5: (139.92, 164.27),
}

# Male-minus-female log difference; an implementer's choice in line with
# the sex-specific population thresholds.
SEX_LOG_GAP: dict[Marker, float] = {
    Marker.T: 1.0, Marker.E: 0.3, Marker.A: 0.2, Marker.ETIO: 0.1, Marker.A5: 0.5, Marker.B5: 0.6,
}

DILUTION_SD = 0.35      # shared urine-dilution factor, within athlete
SPECIFIC_SD = 0.15      # marker-specific within-athlete noise
BETWEEN_CORR = 0.4

DEFAULT_DOPING_SHIFT: dict[Marker, float] = {Marker.T: 0.4, Marker.A5: 0.4, Marker.ETIO: -0.4}


def lognormal_log_moments(mean: float, sd: float) -> tuple[float, float]:
    """(mu, sigma^2) of log X for a log-normal X with the given raw mean and SD."""
    s2 = math.log1p((sd / mean) ** 2)
    return math.log(mean) - s2 / 2.0, s2


def default_truth(markers: Sequence[Marker] = CONCENTRATIONS, male_share: float = 91 / 164):
    """Per-sex log means and the between/within covariances."""
    markers = tuple(markers)
    K = len(markers)
    within = DILUTION_SD ** 2 * np.ones((K, K)) + SPECIFIC_SD ** 2 * np.eye(K)
    mu_m, mu_f, sd_b = np.empty(K), np.empty(K), np.empty(K)
    for k, m in enumerate(markers):
        mu, s2 = lognormal_log_moments(*REFERENCE_RAW_MOMENTS[m])
        gap = SEX_LOG_GAP[m]
        mu_m[k] = mu + (1 - male_share) * gap
        mu_f[k] = mu - male_share * gap
        between = s2 - within[k, k] - male_share * (1 - male_share) * gap ** 2
        sd_b[k] = math.sqrt(max(between, 0.05))
    corr = BETWEEN_CORR * np.ones((K, K)) + (1 - BETWEEN_CORR) * np.eye(K)
    return {Sex.MALE: mu_m, Sex.FEMALE: mu_f}, np.outer(sd_b, sd_b) * corr, within


@dataclass(frozen=True)
class Injection:
    athlete_id: str
    sample_index: int
    shifts: Mapping[Marker, float]

    def to_dict(self) -> dict:
        return {"athlete_id": self.athlete_id, "sample_index": self.sample_index,
                "shifts": {m.value: float(v) for m, v in self.shifts.items()}}


def _default_means():
    return default_truth()[0]


def _default_between():
    return default_truth()[1]


def _default_within():
    return default_truth()[2]


@dataclass(frozen=True)
class CohortSpec:
    """Cohort layout and true parameters.

    Defaults mirror a realistic study: 100 athletes with only normal
    samples, 100 with atypical and 29 with abnormal samples, plus a
    cross-sectional baseline of 91 men and 73 women. About 11% of the
    samples of every doped athlete carry ``doping_shift``.
    """

    n_normal: int = 100
    n_atypical: int = 100
    n_abnormal: int = 29
    samples_normal: tuple[int, int] = (9, 20)
    samples_atypical: tuple[int, int] = (15, 35)
    samples_abnormal: tuple[int, int] = (10, 22)
    n_baseline_male: int = 91
    n_baseline_female: int = 73
    male_fraction: float = 0.5
    markers: tuple[Marker, ...] = CONCENTRATIONS
    mean_log: Mapping[Sex, np.ndarray] = field(default_factory=_default_means)
    sigma_b: np.ndarray = field(default_factory=_default_between)
    sigma_e: np.ndarray = field(default_factory=_default_within)
    doping_shift: Mapping[Marker, float] = field(default_factory=lambda: dict(DEFAULT_DOPING_SHIFT))
    doped_fraction: float = 0.11
    injections: tuple[Injection, ...] | None = None
    seed: int = 0

    def validate(self) -> None:
        K = len(self.markers)
        if K == 0 or len(set(self.markers)) != K:
            raise InvalidSpec("markers must be a non-empty list without repeats")
        if any(m.kind != "concentration" for m in self.markers):
            raise InvalidSpec("only concentration markers are simulated; ratios are derived")
        for name in ("n_normal", "n_atypical", "n_abnormal", "n_baseline_male", "n_baseline_female"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        for name in ("samples_normal", "samples_atypical", "samples_abnormal"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidSpec(f"{name} must satisfy 1 <= low <= high, got {(lo, hi)}")
        if not 0 <= self.male_fraction <= 1:
            raise InvalidSpec("male_fraction must lie in [0, 1]")
        if not 0 <= self.doped_fraction <= 1:
            raise InvalidSpec("doped_fraction must lie in [0, 1]")
        for sex in Sex:
            if np.shape(self.mean_log.get(sex, ())) != (K,):
                raise InvalidSpec(f"mean_log[{sex.value}] must have {K} entries")
        for name in ("sigma_b", "sigma_e"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (K, K) or not np.allclose(m, m.T):
                raise InvalidSpec(f"{name} must be a symmetric {K}x{K} matrix")
            try:
                cholesky(m, name)
            except NotPositiveDefinite as exc:
                raise InvalidSpec(f"{name} is not positive definite ({exc})") from None
        for m in self.doping_shift:
            if coerce_marker(m) not in self.markers:
                raise InvalidSpec(f"doping shift on unsimulated marker {m}")

    @property
    def omega_b(self) -> np.ndarray:
        return np.linalg.inv(self.sigma_b)

    @property
    def omega_e(self) -> np.ndarray:
        return np.linalg.inv(self.sigma_e)

    def to_dict(self) -> dict:
        return {
            "n_normal": self.n_normal, "n_atypical": self.n_atypical, "n_abnormal": self.n_abnormal,
            "samples_normal": list(self.samples_normal),
            "samples_atypical": list(self.samples_atypical),
            "samples_abnormal": list(self.samples_abnormal),
            "n_baseline_male": self.n_baseline_male, "n_baseline_female": self.n_baseline_female,
            "male_fraction": self.male_fraction,
            "markers": [m.value for m in self.markers],
            "mean_log": {s.value: [float(v) for v in self.mean_log[s]] for s in Sex},
            "sigma_b": np.asarray(self.sigma_b, dtype=float).tolist(),
            "sigma_e": np.asarray(self.sigma_e, dtype=float).tolist(),
            "doping_shift": {coerce_marker(m).value: float(v) for m, v in self.doping_shift.items()},
            "doped_fraction": self.doped_fraction,
            "injections": None if self.injections is None else [i.to_dict() for i in self.injections],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortSpec":
        """Build from a (possibly partial) mapping; missing keys keep their defaults."""
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown cohort key(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        try:
            for k in ("samples_normal", "samples_atypical", "samples_abnormal"):
                if k in kw:
                    kw[k] = tuple(int(v) for v in kw[k])
            if "markers" in kw:
                kw["markers"] = resolve_markers(kw["markers"])
            if "mean_log" in kw:
                kw["mean_log"] = {Sex(s): np.asarray(v, dtype=float) for s, v in kw["mean_log"].items()}
            elif "markers" in kw:
                kw["mean_log"] = default_truth(kw["markers"])[0]
            for k in ("sigma_b", "sigma_e"):
                if k in kw:
                    kw[k] = np.asarray(kw[k], dtype=float)
                elif "markers" in kw:
                    kw[k] = default_truth(kw["markers"])[1 if k == "sigma_b" else 2]
            if "doping_shift" in kw:
                kw["doping_shift"] = {coerce_marker(m): float(v) for m, v in kw["doping_shift"].items()}
            elif "markers" in kw:
                # the default shift restricted to the simulated markers
                kw["doping_shift"] = {m: v for m, v in DEFAULT_DOPING_SHIFT.items() if m in kw["markers"]}
            if kw.get("injections") is not None:
                kw["injections"] = tuple(
                    Injection(i["athlete_id"], int(i["sample_index"]),
                              {coerce_marker(m): float(v) for m, v in i["shifts"].items()})
                    for i in kw["injections"])
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            raise InvalidSpec(f"malformed cohort spec: {exc}") from None
        spec = cls(**kw)
        spec.validate()
        return spec


@dataclass(frozen=True)
class SimulatedCohort:
    collection: ProfileCollection
    injections: tuple[Injection, ...]
    athlete_means: Mapping[str, np.ndarray]     # true log-scale mu_sex + b_j
    spec: CohortSpec

    def truth_record(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "injections": [i.to_dict() for i in self.injections],
            "athlete_means": {a: [float(v) for v in m] for a, m in self.athlete_means.items()},
        }

    def truth_json(self) -> str:
        return json.dumps(self.truth_record(), indent=1, sort_keys=True) + "\n"


def simulate_hierarchical(mean: np.ndarray, sigma_b: np.ndarray, sigma_e: np.ndarray,
                          n_samples: Sequence[int], rng: np.random.Generator):
    """Blocks of log values for J athletes; returns (blocks, athlete means)."""
    mean = np.asarray(mean, dtype=float)
    K = mean.size
    Lb = cholesky(np.asarray(sigma_b, dtype=float), "sigma_b")
    Le = cholesky(np.asarray(sigma_e, dtype=float), "sigma_e")
    means = mean + rng.standard_normal((len(n_samples), K)) @ Lb.T
    blocks = [means[j] + rng.standard_normal((int(n), K)) @ Le.T for j, n in enumerate(n_samples)]
    return blocks, means


def _raw_sample(aid: str, t: int, sex: Sex, log_conc: np.ndarray, markers: Sequence[Marker],
                label: Label | None) -> RawSample:
    values = {m: (float(math.exp(v)), LimitFlag.MEASURED) for m, v in zip(markers, log_conc)}
    if set(CONCENTRATIONS) <= set(markers):
        for r, v in zip((Marker.T_E, Marker.A_T, Marker.A_ETIO, Marker.A5_B5, Marker.A5_E),
                        compute_ratios({m: values[m][0] for m in CONCENTRATIONS})):
            values[r] = (float(v), LimitFlag.MEASURED)
    return RawSample(aid, t, sex, values, label)


def simulate_cohort(spec: CohortSpec, rng: np.random.Generator | None = None) -> SimulatedCohort:
    """Simulate athletes, injections and the baseline population.

    Injected samples carry their group's label (atypical or abnormal);
    every other sample, including clean samples of doped athletes, is
    labeled normal.
    """
    spec.validate()
    if rng is None:
        from .stochastic import make_rng

        rng = make_rng(spec.seed)
    markers = spec.markers
    K = len(markers)
    groups = [(Label.NORMAL, spec.n_normal, spec.samples_normal),
              (Label.ATYPICAL, spec.n_atypical, spec.samples_atypical),
              (Label.ABNORMAL, spec.n_abnormal, spec.samples_abnormal)]
    athletes, means, injections = [], {}, []
    explicit: dict[str, dict[int, Mapping[Marker, float]]] = {}
    if spec.injections is not None:
        for inj in spec.injections:
            explicit.setdefault(inj.athlete_id, {})[inj.sample_index] = inj.shifts
    for group, count, (lo, hi) in groups:
        for i in range(count):
            aid = f"{group.value}-{i + 1:03d}"
            sex = Sex.MALE if rng.random() < spec.male_fraction else Sex.FEMALE
            n = int(rng.integers(lo, hi + 1))
            blocks, mj = simulate_hierarchical(spec.mean_log[sex], spec.sigma_b, spec.sigma_e, [n], rng)
            y = blocks[0]
            means[aid] = mj[0]
            if spec.injections is not None:
                plan = explicit.get(aid, {})
            elif group is Label.NORMAL:
                plan = {}
            else:
                n_doped = max(1, int(round(spec.doped_fraction * n))) if n > 1 else 0
                idx = rng.choice(np.arange(1, n), size=min(n_doped, n - 1), replace=False)
                plan = {int(t): spec.doping_shift for t in sorted(idx)}
            samples = []
            for t in range(n):
                label = Label.NORMAL
                if t in plan:
                    shift = np.array([float(plan[t].get(m, 0.0)) for m in markers])
                    y[t] = y[t] + shift
                    injections.append(Injection(aid, t, dict(plan[t])))
                    if group is not Label.NORMAL and np.any(shift != 0):
                        label = group
                    elif np.any(shift != 0):
                        label = Label.ATYPICAL
                samples.append(_raw_sample(aid, t, sex, y[t], markers, label))
            athletes.append(Athlete(aid, sex, tuple(samples)))
    baseline = []
    for sex, count in ((Sex.MALE, spec.n_baseline_male), (Sex.FEMALE, spec.n_baseline_female)):
        if count == 0:
            continue
        blocks, _ = simulate_hierarchical(spec.mean_log[sex], spec.sigma_b, spec.sigma_e,
                                          [1] * count, rng)
        for i, b in enumerate(blocks):
            baseline.append(_raw_sample(f"base-{sex.value[0]}{i + 1:03d}", 0, sex, b[0], markers, Label.NORMAL))
    return SimulatedCohort(ProfileCollection(tuple(athletes), tuple(baseline)), tuple(injections),
                           means, spec)


@dataclass(frozen=True)
class BaselineMoments:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    markers: tuple[Marker, ...]


def estimate_baseline_moments(population: ProfileCollection | Sequence[RawSample],
                              markers: str | Sequence[Marker] = "all") -> dict[Sex, BaselineMoments]:
    """Per-sex log-scale mean vectors (for prior means) and covariances."""
    markers = resolve_markers(markers)
    samples = population.baseline if isinstance(population, ProfileCollection) else tuple(population)
    out = {}
    for sex in Sex:
        rows = [s for s in samples if s.sex is sex]
        if not rows:
            continue
        if len(rows) < 2:
            raise TooFewObservations(f"{len(rows)} baseline sample(s) for {sex.value}, need at least 2")
        x = ProfileCollection((), tuple(rows)).baseline_matrix(markers)
        out[sex] = BaselineMoments(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1)),
                                   len(rows), markers)
    return out


def benchmark_spec(seed: int = 0, **overrides) -> CohortSpec:
    """Desk-sized cohort used for the policy comparison benchmark."""
    base = dict(n_normal=30, n_atypical=15, n_abnormal=5,
                samples_normal=(8, 12), samples_atypical=(8, 12), samples_abnormal=(8, 12),
                n_baseline_male=60, n_baseline_female=0, male_fraction=1.0, seed=seed)
    base.update(overrides)
    return CohortSpec(**base)
