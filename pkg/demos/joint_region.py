"""
Per-marker intervals versus one joint predictive region
=======================================================

For two strongly correlated markers the per-marker HPD box and the joint
highest-density region disagree: a sample that moves one marker against
the other can sit inside both intervals yet far outside the joint region.
"""
import numpy as np

from adaptive_limits.stochastic import make_rng
from adaptive_limits.cohort import simulate_hierarchical
from adaptive_limits.multivariate import (
    GibbsConfig,
    GroupedData,
    MvPriorConfig,
    joint_hpd_region,
    marginal_hpds,
    predictive_replicates,
    run_gibbs,
)

rng = make_rng(11)
mean = np.zeros(2)
within = 0.04 * np.array([[1.0, 0.9], [0.9, 1.0]])
blocks, _ = simulate_hierarchical(mean, 0.05 * np.eye(2), within, [10] * 40, rng)
chain = run_gibbs(GroupedData(blocks), MvPriorConfig.default(mean), GibbsConfig(), rng)

history = rng.multivariate_normal(mean, within, 8)
athlete = chain.for_new_athlete(history, rng)
reps = predictive_replicates(athlete, 0, 10_000, rng)
box = marginal_hpds(reps, 0.05)
region = joint_hpd_region(athlete, 0, reps, 0.05)

centre = reps.mean(axis=0)
for label, y in [("centre", centre),
                 ("both high", centre + 0.3),
                 ("one up, one down", centre + np.array([0.25, -0.25]))]:
    in_box = bool(np.all((box[:, 0] <= y) & (y <= box[:, 1])))
    print(f"{label:17s} inside box: {in_box!s:5}  inside joint region: {bool(region.contains(y))}")
