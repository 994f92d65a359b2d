import numpy as np
import pytest

from cast.cohort import standardize
from cast.errors import CorrelationUnachievable
from cast.pipeline import RunConfig
from cast.refutation import (
    _confounder_column,
    dummy_outcome_test,
    negative_control_test,
    noise_feature_test,
    synthetic_confounder_test,
)
from cast.synth import EffectSpec, ScenarioConfig, generate

FAST = RunConfig(
    horizons=(12.0, 36.0, 60.0, 120.0),
    estimands=("sp",),
    trees=20,
    nuisance_trees=30,
    min_node=10,
    nuisance_min_node=10,
    propensity_alpha_grid=(0.5,),
    propensity_n_lambda=12,
    propensity_folds=3,
)


def effect_cohort(n=700, seed=21, het=None):
    """Confounded cohort with a real effect and paper-like censoring."""
    res = generate(ScenarioConfig(
        n=n, seed=seed,
        effect=EffectSpec(kind="peaked", peak_time=50.0, peak_value=0.12,
                          het_features=het or {"pack_years": 0.3}),
        treatment_intercept=-0.1,
        treatment_coefs={"z_stage": 1.0, "hpv=positive": -0.4},
        risk_coefs={"z_stage": 0.3, "z_age": 0.2},
        baseline_median_months=50.0, censor_median_months=40.0,
        risk_cap=0.5))
    return standardize(res.cohort)


def cohort_checksum(cohort):
    return (cohort.X.tobytes(), cohort.treatment.tobytes(),
            cohort.time_months.tobytes(), cohort.event.tobytes())


class TestDummyOutcome:
    def test_centered_and_variance_grows(self):
        cohort = effect_cohort()
        before = cohort_checksum(cohort)
        report = dummy_outcome_test(cohort, FAST, reps=6, seed=2)
        assert cohort_checksum(cohort) == before  # copy-on-modify contract
        ests = report.estimates["sp"]
        assert ests.shape == (6, 4)
        sds = ests.std(axis=0, ddof=1)
        assert sds[-1] >= sds[0]  # h=120 vs h=12
        assert report.passed
        # shuffled-away effect: repetition means small next to the real effect
        assert np.abs(ests.mean(axis=0)).max() < 0.1

    def test_same_seed_identical(self):
        cohort = effect_cohort(n=500, seed=4)
        a = dummy_outcome_test(cohort, FAST, reps=3, seed=9)
        b = dummy_outcome_test(cohort, FAST, reps=3, seed=9)
        np.testing.assert_array_equal(a.estimates["sp"], b.estimates["sp"])
        assert a.to_dict() == b.to_dict()

    def test_report_serializes(self):
        import json
        cohort = effect_cohort(n=500, seed=5)
        report = dummy_outcome_test(cohort, FAST, reps=3, seed=1)
        blob = json.dumps(report.to_dict(), sort_keys=True)
        assert "dummy_outcome" in blob


class TestNegativeControl:
    def test_null_assignment_passes(self):
        cohort = effect_cohort()
        report = negative_control_test(cohort, FAST, seed=0)
        assert report.passed
        assert abs(report.extras["fake_treatment_rate"]
                   - report.extras["original_treatment_rate"]) <= 0.02

    def test_untouched_treatment_fails_on_effectful_cohort(self):
        # sanity inversion: keep the real W and the effect must show
        cohort = effect_cohort(n=2000, seed=31)
        from cast.pipeline import horizon_sweep
        from dataclasses import replace
        cfg = replace(FAST, horizons=(36.0, 48.0, 60.0), nuisance_trees=60)
        sweep = horizon_sweep(cohort, cfg, need_cate=False)
        a, s = sweep.ates("sp"), sweep.ses("sp")
        assert np.any(np.abs(a) >= 2.0 * s)

    def test_calibration_over_seeds(self):
        cohort = effect_cohort(n=900, seed=8)
        passes = sum(negative_control_test(cohort, FAST, seed=s).passed
                     for s in range(20))
        assert passes >= 18


class TestSyntheticConfounder:
    def test_construction_hits_target_exactly(self):
        rng = np.random.default_rng(0)
        w = (rng.random(400) < 0.45).astype(int)
        for r in (0.1, 0.3, 0.5):
            z = _confounder_column(w, r, np.random.default_rng(1))
            assert abs(np.corrcoef(z, w)[0, 1] - r) < 1e-10

    def test_constant_treatment_raises(self):
        with pytest.raises(CorrelationUnachievable):
            _confounder_column(np.ones(50, dtype=int), 0.3, np.random.default_rng(0))

    def test_deltas_monotone_in_strength(self):
        cohort = effect_cohort(n=800, seed=6)
        report = synthetic_confounder_test(cohort, FAST, strengths=(0.1, 0.5), seed=4)
        assert report.summary["realized_correlation"] == pytest.approx([0.1, 0.5], abs=0.02)
        assert report.passed
        d = report.estimates["sp"]
        assert d[1].max() >= d[0].max()


class TestNoiseFeatures:
    def test_noise_is_ignored(self):
        # randomized, censoring-free cohort with five genuinely continuous
        # heterogeneity drivers; wide leaves keep splits where signal lives
        from dataclasses import replace
        res = generate(ScenarioConfig(
            n=2400, seed=7,
            effect=EffectSpec(kind="peaked", peak_time=50.0, peak_value=0.30,
                              het_features={"pack_years": 0.22, "age": 0.22,
                                            "z_bed_di": 0.5, "z_rt_year": 0.22}),
            treatment_intercept=0.0, treatment_coefs={}, risk_coefs={},
            baseline_median_months=15.0, censor_median_months=None,
            admin_censor_months=150.0, include_rt=True, risk_cap=0.5))
        cohort = standardize(res.cohort)
        cfg = replace(FAST, horizons=(24.0, 36.0, 48.0, 60.0), trees=300,
                      min_node=90, nuisance_trees=40)
        report = noise_feature_test(cohort, cfg, k=5, seed=11)
        assert not report.summary["noise_in_top"]
        assert report.passed
        # noise split shares sit below every true heterogeneity driver
        imp = np.array(report.summary["importance"])
        for name in ("pack_years", "age", "bed_di", "rt_year"):
            j = cohort.schema.names.index(name)
            assert imp[j] > imp[cohort.p:].max()

    def test_k_zero_equals_baseline_exactly(self):
        cohort = effect_cohort(n=500, seed=9)
        report = noise_feature_test(cohort, FAST, k=0, seed=13)
        np.testing.assert_array_equal(report.estimates["sp"], report.baseline["sp"])
        assert report.passed
