"""
Personal limits that tighten as a history grows
===============================================

One simulated athlete's log T/E series is screened sample by sample with
the conjugate Normal-Gamma model. The first sample is judged against the
population threshold; later samples against the 95% predictive HPD built
from the accepted history. A spike at sample 12 is flagged and kept out of
the history, so the limits for later samples stay where they were.
"""
import numpy as np

from adaptive_limits.stochastic import make_rng
from adaptive_limits.occ import ClassifierPolicy, UnivariateLimits, classify_sequence
from adaptive_limits.profiles import Athlete, Label, LimitFlag, Marker, RawSample, Sex
from adaptive_limits.univariate import UnivariateConfig

rng = make_rng(7)

# a stable ratio around exp(0.1) with a three-fold jump at sample 12
log_te = rng.normal(0.1, 0.2, 20)
log_te[12] += np.log(3.0)

samples = tuple(
    RawSample("demo", t, Sex.MALE, {Marker.T_E: (float(np.exp(v)), LimitFlag.MEASURED)},
              Label.ATYPICAL if t == 12 else Label.NORMAL)
    for t, v in enumerate(log_te))
athlete = Athlete("demo", Sex.MALE, samples)

# prior mean at the population log T/E; weakly informative defaults otherwise
model = UnivariateLimits(UnivariateConfig(), {Sex.MALE: {Marker.T_E: 0.0}})
policy = ClassifierPolicy("univariate", ("T_E",))

print(f"{'t':>3} {'T/E':>7} {'lower':>7} {'upper':>7} {'n':>3}  decision")
for d, v in zip(classify_sequence(athlete, policy, model, make_rng(8)), log_te):
    lo = np.exp(d.lower[0]) if np.isfinite(d.lower[0]) else float("nan")
    print(f"{d.timestamp:3d} {np.exp(v):7.3f} {lo:7.3f} {np.exp(d.upper[0]):7.3f} {d.n_train:3d}  "
          f"{d.flag} ({d.rule_fired})")
