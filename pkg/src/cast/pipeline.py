"""End-to-end orchestration: standardize, model propensity, trim, sweep horizons.

This is the shared engine behind the command-line pipeline and the
refutation harness. A sweep standardizes the cohort (when needed), fits the
cross-validated propensity model, trims to the overlap region, fits the
arm-conditional censoring curves once, and runs the per-horizon
doubly-robust estimator for every requested estimand and horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cohort import SurvivalCohort, standardize
from .forest import ESTIMANDS, ForestConfig, HorizonEstimate, PseudoConfig, estimate_horizon
from .propensity import (
    DEFAULT_ALPHA_GRID,
    PropensityModel,
    TrimResult,
    fit_elastic_net,
    predict_scores,
    trim,
)
from .survival import censoring_survival
from .trajectory import EffectSeries

DEFAULT_HORIZONS = tuple(float(h) for h in range(12, 121, 12))


@dataclass
class RunConfig:
    """Resolved configuration for one pipeline run; serialized to the manifest."""

    seed: int = 0
    horizons: tuple = DEFAULT_HORIZONS
    estimands: tuple = ("sp", "rmst")
    trees: int = 5000
    nuisance_trees: int = 500
    min_node: int = 15
    subsample: float = 0.5
    honesty: float = 0.5
    tune: bool = False
    group_size: int = 10
    trim_lower: float = 0.10
    trim_upper: float = 0.90
    censor_floor: float = 0.05
    nuisance_folds: int = 2
    nuisance_min_node: int = 15
    propensity_alpha_grid: tuple = DEFAULT_ALPHA_GRID
    propensity_n_lambda: int = 100
    propensity_folds: int = 10
    threads: int = 1

    def __post_init__(self):
        self.horizons = tuple(float(h) for h in self.horizons)
        self.estimands = tuple(self.estimands)
        for e in self.estimands:
            if e not in ESTIMANDS:
                raise ValueError(f"unknown estimand {e!r}")

    def forest_config(self) -> ForestConfig:
        return ForestConfig(n_trees=self.trees, honesty_fraction=self.honesty,
                            subsample_fraction=self.subsample, min_node=self.min_node,
                            seed=self.seed, group_size=self.group_size,
                            tune=self.tune, threads=self.threads)

    def pseudo_config(self) -> PseudoConfig:
        return PseudoConfig(nuisance_trees=self.nuisance_trees,
                            nuisance_min_node=self.nuisance_min_node,
                            folds=self.nuisance_folds,
                            censor_floor=self.censor_floor,
                            score_bounds=(self.trim_lower, self.trim_upper),
                            seed=self.seed, threads=self.threads)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["horizons"] = list(self.horizons)
        d["estimands"] = list(self.estimands)
        d["propensity_alpha_grid"] = list(self.propensity_alpha_grid)
        d["version"] = __version__
        return d


@dataclass
class PropensityStage:
    model: PropensityModel
    scores: np.ndarray          # aligned with the standardized input cohort
    trim_result: TrimResult
    kept: SurvivalCohort
    kept_scores: np.ndarray


def propensity_stage(cohort: SurvivalCohort, config: RunConfig) -> PropensityStage:
    """Fit the propensity model, score everyone, trim to the overlap region."""
    model = fit_elastic_net(cohort,
                            alpha_grid=config.propensity_alpha_grid,
                            n_lambda=config.propensity_n_lambda,
                            folds=config.propensity_folds,
                            seed=config.seed)
    scores = predict_scores(model, cohort)
    clipped = np.clip(scores, config.trim_lower, config.trim_upper)
    trim_result = trim(cohort, scores, config.trim_lower, config.trim_upper)
    kept = cohort.subset(trim_result.kept_index)
    return PropensityStage(model=model, scores=scores, trim_result=trim_result,
                           kept=kept, kept_scores=clipped[trim_result.kept_index])


@dataclass
class SweepResult:
    estimates: dict               # (estimand, horizon) -> HorizonEstimate
    config: RunConfig
    n_trimmed: int
    kept_ids: list
    propensity: dict = field(default_factory=dict)

    def ates(self, estimand: str) -> np.ndarray:
        return np.array([self.estimates[(estimand, h)].ate for h in self.config.horizons])

    def ses(self, estimand: str) -> np.ndarray:
        return np.array([self.estimates[(estimand, h)].ate_se for h in self.config.horizons])

    def series(self, estimand: str) -> EffectSeries:
        return EffectSeries(np.array(self.config.horizons), self.ates(estimand),
                            self.ses(estimand), estimand=estimand)


def horizon_sweep(cohort: SurvivalCohort, config: RunConfig,
                  need_cate: bool = True,
                  stage: PropensityStage | None = None,
                  keep_models: bool = False) -> SweepResult:
    """Run the full per-horizon pipeline on one cohort.

    The input cohort is never mutated; standardization (when needed) and
    trimming produce copies. Passing a precomputed ``stage`` skips the
    propensity fit (the refutation harness reuses it only where the test
    semantics allow).
    """
    work = cohort if cohort.standardized else standardize(cohort)
    if stage is None:
        stage = propensity_stage(work, config)
    curves = censoring_survival(stage.kept, conditioning="by-treatment")
    forest_cfg = config.forest_config()
    pseudo_cfg = config.pseudo_config()
    estimates = {}
    for estimand in config.estimands:
        for horizon in config.horizons:
            estimates[(estimand, horizon)] = estimate_horizon(
                stage.kept, stage.kept_scores, horizon, estimand,
                forest_cfg, pseudo_cfg, censor_curves=curves,
                need_cate=need_cate, keep_model=keep_models)
    return SweepResult(
        estimates=estimates, config=config,
        n_trimmed=len(stage.trim_result.trimmed_ids),
        kept_ids=list(stage.trim_result.kept_ids),
        propensity={
            "alpha": stage.model.alpha,
            "lambda": stage.model.lambda_,
            "cv_loss": stage.model.cv_loss,
            "cv_folds": stage.model.cv_folds,
        },
    )
