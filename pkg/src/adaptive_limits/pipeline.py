"""Wiring between a profile collection, the two models and the classifier.

Athletes whose samples are all normal form the training population of
the multivariate model; every other athlete is classified. Prior means
come from the cross-sectional baseline, per sex.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import estimate_baseline_moments
from .errors import InvalidParameter, TooFewObservations
from .multivariate import GibbsConfig, GroupedData, MvPriorConfig
from .occ import (
    ClassifierPolicy,
    HpdDecision,
    MultivariateLimits,
    PopulationThresholds,
    UnivariateLimits,
    classify_collection,
)
from .profiles import Athlete, Label, Marker, ProfileCollection, Sex
from .stochastic import make_rng, spawn
from .univariate import UnivariateConfig


@dataclass(frozen=True)
class ModelSettings:
    univariate: UnivariateConfig = field(default_factory=UnivariateConfig)
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    prior_scale: float = 1e-3
    prior_df: float | None = None
    scale_convention: str | dict = "default"
    n_rep: int | None = None
    update: str = "athlete"


def split_athletes(collection: ProfileCollection) -> tuple[tuple[Athlete, ...], tuple[Athlete, ...]]:
    """(training, test): all-normal athletes train, the rest are classified.

    Without any non-normal athlete every athlete is classified.
    """
    train = tuple(a for a in collection.athletes if a.label is Label.NORMAL)
    test = tuple(a for a in collection.athletes if a.label is not Label.NORMAL)
    if not test:
        test = collection.athletes
    return train, test


def prior_means(collection: ProfileCollection, markers: Sequence[Marker]) -> dict[Sex, np.ndarray]:
    moments = estimate_baseline_moments(collection, markers)
    if not moments:
        raise TooFewObservations("the collection has no baseline samples to set prior means")
    if len(moments) < len(Sex):
        # one sex missing from the baseline: use the other sex's means
        only = next(iter(moments.values()))
        return {s: (moments[s].mean if s in moments else only.mean) for s in Sex}
    return {s: m.mean for s, m in moments.items()}


def build_model(policy: ClassifierPolicy, collection: ProfileCollection, settings: ModelSettings,
                rng: np.random.Generator, sexes: Sequence[Sex] | None = None,
                training: Sequence[Athlete] | None = None):
    """Limit provider for ``policy`` fitted on ``collection``."""
    markers = policy.marker_tuple
    mu0 = prior_means(collection, markers)
    if policy.model == "univariate":
        return UnivariateLimits(settings.univariate,
                                {s: dict(zip(markers, v)) for s, v in mu0.items()},
                                n_rep=settings.n_rep)
    if training is None:
        training = split_athletes(collection)[0]
    sexes = tuple(Sex) if sexes is None else tuple(sexes)
    blocks: dict[Sex, GroupedData] = {}
    priors: dict[Sex, MvPriorConfig] = {}
    for sex in sexes:
        group = [a for a in training if a.sex is sex]
        if not group:
            continue
        blocks[sex] = GroupedData([a.matrix(markers) for a in group], [a.athlete_id for a in group])
        priors[sex] = MvPriorConfig.default(mu0[sex], settings.prior_scale, settings.prior_df,
                                            settings.scale_convention)
    if not blocks:
        raise InvalidParameter("no training athletes for the multivariate model")
    return MultivariateLimits.fit(blocks, priors, markers, settings.gibbs, rng,
                                  n_rep=settings.n_rep, update=settings.update)


def run_policy(policy: ClassifierPolicy, collection: ProfileCollection, settings: ModelSettings,
               seed: int, thresholds: PopulationThresholds | None = None,
               threads: int = 1, athletes: Sequence[Athlete] | None = None,
               training: Sequence[Athlete] | None = None) -> list[HpdDecision]:
    """Fit and classify with one policy; deterministic in ``seed``.

    ``athletes`` and ``training`` override the default split.
    """
    train, test = split_athletes(collection)
    if athletes is not None:
        test = tuple(athletes)
    if training is not None:
        train = tuple(training)
    fit_rng, run_rng = policy_rngs(policy, seed)
    sexes = sorted({a.sex for a in test}, key=lambda s: s.value)
    model = build_model(policy, collection, settings, fit_rng, sexes, train)
    return classify_collection(test, policy, model, run_rng, thresholds, threads)


def policy_rngs(policy: ClassifierPolicy, seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(fitting, classification) generators for one policy under one seed."""
    # crc32 is stable across processes, unlike hash()
    stream = zlib.crc32(policy.name.encode())
    fit_rng, run_rng = spawn(make_rng(seed, stream), 2)
    return fit_rng, run_rng
