import numpy as np
import pytest

from cast.errors import NonFiniteModelOutput
from cast.heterogeneity import effect_correlations, shap_monte_carlo
from cast.synth import EffectSpec, ScenarioConfig, generate

EPS = 0.01


class TestShapMonteCarlo:
    def test_additive_model_is_exact(self):
        X = np.array([[1.0, 0.3, -0.7]])
        background = np.zeros((1, 3))
        shap = shap_monte_carlo(lambda m: m[:, 0], X, background,
                                iterations=200, seed=0)
        assert shap.baseline == 0.0
        assert shap.values[0, 0] == pytest.approx(1.0, abs=EPS)
        assert abs(shap.values[0, 1]) <= EPS and abs(shap.values[0, 2]) <= EPS

    def test_constant_model(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(6, 4))
        shap = shap_monte_carlo(lambda m: np.full(len(m), 3.25), X,
                                rng.normal(size=(10, 4)), iterations=200, seed=1)
        assert shap.baseline == pytest.approx(3.25)
        np.testing.assert_allclose(shap.values, 0.0, atol=1e-12)

    def test_two_feature_product_splits_evenly(self):
        # exact Shapley on f = x1*x2 at (1,1) with zero background: (0.5, 0.5);
        # antithetic pairing makes every pair average exactly that
        X = np.array([[1.0, 1.0]])
        shap = shap_monte_carlo(lambda m: m[:, 0] * m[:, 1], X, np.zeros((1, 2)),
                                iterations=10, seed=2)
        np.testing.assert_allclose(shap.values[0], [0.5, 0.5], atol=EPS)

    def test_sum_identity_exact_after_normalization(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 5))
        background = rng.normal(size=(30, 5))

        def model(m):
            return np.sin(m[:, 0]) + m[:, 1] * m[:, 2] - 0.5 * m[:, 4] ** 2

        shap = shap_monte_carlo(model, X, background, iterations=300, seed=3)
        gap = shap.values.sum(axis=1) - (model(X) - shap.baseline)
        assert np.max(np.abs(gap)) < 1e-12
        assert shap.raw_residual_max < EPS

    def test_symmetric_features_agree(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=40)
        X = np.column_stack([x, x, rng.normal(size=40)])
        background = np.column_stack([b := rng.normal(size=25), b, rng.normal(size=25)])
        shap = shap_monte_carlo(lambda m: m[:, 0] + m[:, 1], X, background,
                                iterations=600, seed=4)
        assert np.max(np.abs(shap.values[:, 0] - shap.values[:, 1])) < 2 * EPS

    def test_null_feature_gets_nothing(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(25, 3))
        background = rng.normal(size=(40, 3))
        shap = shap_monte_carlo(lambda m: 2.0 * m[:, 0], X, background,
                                iterations=400, seed=5)
        assert np.max(np.abs(shap.values[:, 2])) < EPS

    def test_seeded_determinism(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(10, 4))
        background = rng.normal(size=(15, 4))
        model = lambda m: m[:, 0] * m[:, 2]  # noqa: E731
        a = shap_monte_carlo(model, X, background, iterations=150, seed=9)
        b = shap_monte_carlo(model, X, background, iterations=150, seed=9)
        assert a.values.tobytes() == b.values.tobytes()
        c = shap_monte_carlo(model, X, background, iterations=150, seed=10)
        assert a.values.tobytes() != c.values.tobytes()

    def test_convergence_stops_early(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(5, 3))
        shap = shap_monte_carlo(lambda m: m[:, 0], X, rng.normal(size=(8, 3)),
                                iterations=1000, epsilon=0.05, seed=7)
        assert shap.converged
        assert shap.iterations_used < 1000
        assert shap.iterations_used % 100 == 0

    def test_non_finite_output_raises(self):
        X = np.ones((3, 2))
        with pytest.raises(NonFiniteModelOutput):
            shap_monte_carlo(lambda m: np.full(len(m), np.nan), X,
                             np.zeros((2, 2)), iterations=10, seed=0)


class TestEffectCorrelations:
    def test_duplicated_feature_correlates_perfectly(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=60)
        covariates = np.column_stack([x, x.copy(), rng.normal(size=60)])
        shap = shap_monte_carlo(lambda m: m[:, 0], covariates,
                                covariates[:20], iterations=100, seed=1)
        pearson, spearman = effect_correlations(
            covariates, ["a", "a_copy", "b"], shap, cate=x + 0.1)
        i, j = pearson.labels.index("a"), pearson.labels.index("a_copy")
        assert pearson.matrix[i, j] == pytest.approx(1.0)
        assert spearman.matrix[i, j] == pytest.approx(1.0)
        # the effect column is column "cate" and equals feature a shifted
        k = pearson.labels.index("cate")
        assert pearson.matrix[i, k] == pytest.approx(1.0)

    def test_benefit_declines_in_pack_years(self):
        res = generate(ScenarioConfig(
            n=800, seed=11,
            effect=EffectSpec(kind="peaked", peak_time=50.0, peak_value=0.12,
                              het_feature="pack_years", het_strength=0.3),
            risk_cap=0.5))
        cohort = res.cohort
        names = cohort.schema.names
        pack_col = names.index("pack_years")
        cate = res.truth.tau_sp[:, list(res.truth.horizons).index(60.0)]
        shap = shap_monte_carlo(lambda m: -m[:, pack_col], cohort.X,
                                cohort.X[:50], iterations=60, seed=2)
        pearson, spearman = effect_correlations(cohort.X, names, shap, cate)
        i, k = pearson.labels.index("pack_years"), pearson.labels.index("cate")
        assert pearson.matrix[i, k] < 0
        assert spearman.matrix[i, k] < 0
