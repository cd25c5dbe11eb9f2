import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_limits.cohort import REFERENCE_RAW_MOMENTS, benchmark_spec, simulate_cohort
from adaptive_limits.errors import InvalidParameter, MissingLabel, MissingThreshold, SingleClassInput
from adaptive_limits.multivariate import GibbsConfig, GroupedData, MvPriorConfig
from adaptive_limits.occ import (
    DEFAULT_ALPHA_GRID,
    NON_NORMAL,
    NORMAL,
    SUSPICIOUS,
    ClassifierPolicy,
    HpdDecision,
    MultivariateLimits,
    PopulationThresholds,
    UnivariateLimits,
    binarize_labels,
    classify_collection,
    classify_sequence,
    decisions_from_jsonl,
    decisions_to_jsonl,
    random_oversample,
    threshold_check,
)
from adaptive_limits.pipeline import ModelSettings, build_model, run_policy
from adaptive_limits.profiles import (
    CONCENTRATIONS,
    RATIOS,
    Athlete,
    Label,
    LimitFlag,
    Marker,
    RawSample,
    Sex,
)
from adaptive_limits.stochastic import make_rng
from adaptive_limits.univariate import UnivariateConfig


def nominal(sex=Sex.MALE, **override):
    values = {m: REFERENCE_RAW_MOMENTS[m][0] for m in CONCENTRATIONS}
    values.update({Marker(k): v for k, v in override.items()})
    return RawSample("x", 0, sex, {m: (v, LimitFlag.MEASURED) for m, v in values.items()})


def t_series(values, aid="s1", sex=Sex.MALE):
    samples = tuple(RawSample(aid, t, sex, {Marker.T: (v, LimitFlag.MEASURED)}, Label.NORMAL)
                    for t, v in enumerate(values))
    return Athlete(aid, sex, samples)


T_ONLY = ClassifierPolicy("univariate", (Marker.T,), alpha_grid=(0.05,))
UNI_T = UnivariateLimits(UnivariateConfig(), {Sex.MALE: {Marker.T: math.log(30.0)}}, n_rep=4000)


@pytest.fixture(scope="module")
def cohort():
    return simulate_cohort(benchmark_spec(3))


@pytest.fixture(scope="module")
def ratios_model(cohort):
    pol = ClassifierPolicy("multivariate", "ratios_only", alpha_grid=(0.05, 0.10))
    settings_ = ModelSettings(gibbs=GibbsConfig(total_iterations=900), n_rep=4000)
    return pol, build_model(pol, cohort.collection, settings_, make_rng(1))


class TestThresholds:
    def test_defaults(self):
        th = PopulationThresholds.default()
        assert th.get(Marker.T_E, Sex.FEMALE).upper == 4
        assert th.get(Marker.T, Sex.MALE).upper == 200 and th.get(Marker.T, Sex.FEMALE).upper == 50
        assert th.get(Marker.E, Sex.FEMALE).upper == 50
        assert th.get(Marker.A5, Sex.MALE).upper == 250 and th.get(Marker.A5, Sex.FEMALE).upper == 150
        assert th.get(Marker.B5, Sex.MALE).upper == 1260 and th.get(Marker.B5, Sex.FEMALE).upper == 471
        assert th.get(Marker.B5, Sex.MALE).source == "population_max"
        for m, v in ((Marker.A_ETIO, 4), (Marker.A, 10_000), (Marker.ETIO, 10_000),
                     (Marker.A5_B5, 4), (Marker.A5_E, 10), (Marker.A_T, 10_000)):
            assert th.get(m, Sex.MALE).upper == v
        assert th.get(Marker.A_T, Sex.MALE).source == "Q3_fallback"

    def test_round_trip(self):
        th = PopulationThresholds.default()
        assert PopulationThresholds.from_dict(th.to_dict()) == th

    def test_missing(self):
        with pytest.raises(MissingThreshold):
            PopulationThresholds({}).get(Marker.T, Sex.MALE)

    def test_male_te_above_four(self):
        d = threshold_check(nominal(T=84.0, E=20.0), Sex.MALE)
        assert d.flag == SUSPICIOUS and d.rule_fired == "population_threshold"
        assert [m for m, ok in zip(d.markers, d.inside) if not ok] == [Marker.T_E]

    def test_nominal_is_normal(self):
        for sex in Sex:
            assert threshold_check(nominal(sex), sex).flag == NORMAL

    def test_female_t_limit(self):
        assert threshold_check({"T": 60.0}, "female").suspicious
        assert not threshold_check({"T": 60.0}, "male").suspicious

    def test_limit_is_closed(self):
        assert not threshold_check({"T_E": 4.0}, Sex.MALE).suspicious

    def test_lower_limit(self):
        from adaptive_limits.occ import Threshold
        th = PopulationThresholds({Marker.T: {Sex.MALE: Threshold(100.0, 2.0)}})
        assert threshold_check({"T": 1.0}, Sex.MALE, th).suspicious
        assert not threshold_check({"T": 3.0}, Sex.MALE, th).suspicious

    @given(st.floats(0.5, 500.0))
    def test_raw_and_log_comparisons_agree(self, v):
        d = threshold_check({"T": v}, Sex.FEMALE)
        assert d.inside[0] == (v <= math.exp(d.upper[0]) * (1 + 1e-12)) or abs(v - 50) < 1e-9


class TestPolicy:
    def test_defaults(self):
        p = ClassifierPolicy()
        assert p.alpha_level == 0.05 and p.exclude_flagged and p.rule == "marginal"
        assert p.alpha_grid == DEFAULT_ALPHA_GRID

    def test_names(self):
        assert ClassifierPolicy("multivariate", "ratios_only").name == "multivariate:ratios_only:marginal"
        assert ClassifierPolicy(markers=(Marker.T, Marker.E)).name == "univariate:T+E:marginal"

    @pytest.mark.parametrize("kw", [dict(model="svm"), dict(rule="both"), dict(alpha_level=0.0),
                                    dict(model="univariate", rule="joint")])
    def test_validation(self, kw):
        with pytest.raises(InvalidParameter):
            ClassifierPolicy(**kw)


class TestClassifySequence:
    def test_first_sample_uses_thresholds(self):
        d = classify_sequence(t_series([30, 31, 29]), T_ONLY, UNI_T, make_rng(0))
        assert d[0].rule_fired == "population_threshold" and d[0].n_train == 0
        assert all(x.rule_fired == "marginal_hpd" for x in d[1:])

    def test_flagged_sample_excluded(self):
        ath = t_series([30, 31, 29, 30, 3000, 30])
        d = classify_sequence(ath, T_ONLY, UNI_T, make_rng(0))
        assert d[4].suspicious
        assert d[5].n_train == 4
        keep = classify_sequence(ath, ClassifierPolicy("univariate", (Marker.T,), alpha_grid=(0.05,),
                                                       exclude_flagged=False), UNI_T, make_rng(0))
        assert keep[5].n_train == 5

    def test_deterministic(self, cohort, ratios_model):
        pol, model = ratios_model
        a = cohort.collection.athletes[-1]
        assert classify_sequence(a, pol, model, make_rng(9)) == classify_sequence(a, pol, model, make_rng(9))

    def test_sorted_by_timestamp(self):
        ath = Athlete("s", Sex.MALE, tuple(reversed(t_series([30, 31, 29]).samples)))
        assert [d.timestamp for d in classify_sequence(ath, T_ONLY, UNI_T, make_rng(0))] == [0, 1, 2]

    def test_scores_consistent_with_flags(self, cohort, ratios_model):
        pol, model = ratios_model
        pol = ClassifierPolicy("multivariate", "ratios_only")
        ds = classify_collection(cohort.collection.athletes[30:40], pol, model, make_rng(4))
        for d in ds:
            assert 0.0 <= d.score <= 1.0
            if d.rule_fired == "marginal_hpd":
                assert d.suspicious == (d.score > 0.95 + 1e-9)

    def test_raw_scale_comparison(self, cohort, ratios_model):
        pol, model = ratios_model
        a = cohort.collection.athletes[35]
        for d, s in zip(classify_sequence(a, pol, model, make_rng(2)), a.samples):
            if d.rule_fired != "marginal_hpd":
                continue
            raw = [s.value(m) for m in d.markers]
            by_raw = [math.exp(lo) <= v <= math.exp(hi) for v, lo, hi in zip(raw, d.lower, d.upper)]
            assert tuple(by_raw) == d.inside

    def test_larger_alpha_flags_more(self, cohort, ratios_model):
        _, model = ratios_model
        res = {}
        for a in (0.05, 0.10):
            pol = ClassifierPolicy("multivariate", "ratios_only", alpha_level=a, alpha_grid=(0.05, 0.10),
                                   exclude_flagged=False)
            res[a] = sum(d.suspicious for d in classify_collection(cohort.collection.athletes, pol, model,
                                                                   make_rng(5)))
        assert res[0.10] >= res[0.05]

    def test_joint_rule(self, cohort):
        pol = ClassifierPolicy("multivariate", "ratios_only", rule="joint", alpha_grid=(0.05,))
        settings_ = ModelSettings(gibbs=GibbsConfig(total_iterations=600), n_rep=3000)
        ds = run_policy(pol, cohort.collection, settings_, seed=1)
        model_made = [d for d in ds if d.rule_fired == "joint_region"]
        assert model_made
        for d in model_made:
            assert d.joint_member == (d.log_density >= d.log_gamma)
            assert d.suspicious == (not d.joint_member)

    def test_threads_do_not_change_results(self, cohort, ratios_model):
        pol, model = ratios_model
        ath = cohort.collection.athletes[40:44]
        assert classify_collection(ath, pol, model, make_rng(3), threads=1) == \
            classify_collection(ath, pol, model, make_rng(3), threads=3)

    def test_full_refit_update(self, cohort):
        pol = ClassifierPolicy("multivariate", "ratios_only", alpha_grid=(0.05,))
        settings_ = ModelSettings(gibbs=GibbsConfig(total_iterations=150), n_rep=2000, update="full")
        ds = run_policy(pol, cohort.collection, settings_, seed=2, athletes=cohort.collection.athletes[-1:])
        assert len(ds) == len(cohort.collection.athletes[-1].samples)

    def test_marker_mismatch(self, ratios_model):
        _, model = ratios_model
        with pytest.raises(InvalidParameter):
            model.limits("a", Sex.MALE, (Marker.T,), np.zeros((2, 1)), [0.05], make_rng(0))


class TestSpikePower:
    """x3 T spike at sample 10 on histories drawn from the fitted model itself."""

    def test_spike_detected(self, ratios_model):
        pol, model = ratios_model
        pol = ClassifierPolicy("multivariate", "ratios_only", alpha_grid=(0.05,))
        chain = model.chains[Sex.MALE]
        mu = chain.mu.mean(0)
        cov_b = np.linalg.inv(chain.omega_b.mean(0))
        cov_e = np.linalg.inv(chain.omega_e.mean(0))
        spike = np.log(3.0) * np.array([1.0, -1.0, 0.0, 0.0, 0.0])      # T/E up, A/T down
        hits = 0
        for seed in range(100):
            r = make_rng(seed, 77)
            mu_j = r.multivariate_normal(mu, cov_b)
            y = r.multivariate_normal(mu_j, cov_e, size=10)
            y[9] += spike
            samples = tuple(RawSample("p", t, Sex.MALE, {m: (math.exp(v), LimitFlag.MEASURED)
                                                         for m, v in zip(RATIOS, row)})
                            for t, row in enumerate(y))
            d = classify_sequence(Athlete("p", Sex.MALE, samples), pol, model, r)
            hits += d[9].suspicious
        assert hits / 100 >= 0.9


class TestLabels:
    @pytest.mark.parametrize("lab,expected", [("atypical", NON_NORMAL), (Label.ABNORMAL, NON_NORMAL),
                                              ("normal", NORMAL)])
    def test_binarize(self, lab, expected):
        assert binarize_labels(lab) == expected

    def test_missing(self):
        with pytest.raises(MissingLabel):
            binarize_labels(None)


class TestOversample:
    def test_counts(self, rng):
        labels = ["n"] * 90 + ["a"] * 10
        out = random_oversample(list(range(100)), labels, rng)
        assert out.labels.count("n") == 90 and out.labels.count("a") == 90
        assert out.replicated.sum() == 80
        assert all(labels[i] == "a" for i in out.provenance[out.replicated])
        assert out.items[:100] == list(range(100))

    def test_balanced_unchanged(self, rng):
        out = random_oversample(["x", "y"], ["n", "a"], rng)
        assert out.items == ["x", "y"] and not out.replicated.any()

    def test_single_class(self, rng):
        with pytest.raises(SingleClassInput):
            random_oversample([1, 2], ["n", "n"], rng)

    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_balanced_property(self, n_major, n_minor, seed):
        labels = [0] * n_major + [1] * n_minor
        out = random_oversample(labels, labels, make_rng(seed))
        assert out.labels.count(0) == out.labels.count(1) == max(n_major, n_minor)
        assert [labels[i] for i in out.provenance] == out.labels


class TestRecords:
    def test_jsonl_round_trip(self):
        d = threshold_check(nominal(T=84.0, E=20.0), Sex.MALE)
        back = decisions_from_jsonl(decisions_to_jsonl([d]))[0]
        assert back.flag == d.flag and back.markers == d.markers
        assert math.isnan(back.lower[0]) and back.upper == d.upper
