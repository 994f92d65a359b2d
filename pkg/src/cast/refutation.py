"""Refutation tests: dummy outcomes, negative controls, synthetic confounders, noise.

Each test reruns the full per-horizon pipeline on a deliberately modified
copy of the cohort and summarizes how the effect estimates respond. All
tests are pure functions of (cohort, config, seed): repetitions own
independent seeded streams, the input cohort is never mutated, and verdicts
are reproducible from the stored estimates. Verdict thresholds are artifact
policy and sit on the report, not inside the estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import ColumnSchema, SurvivalCohort, standardize
from .errors import CorrelationUnachievable
from .forest import split_frequencies
from .pipeline import RunConfig, SweepResult, horizon_sweep

DUMMY_RELIABLE_MAX_HORIZON = 60.0
NEGATIVE_CONTROL_Z = 2.0
NOISE_DELTA_SE_FACTOR = 0.5
NOISE_TOP_K = 5


@dataclass
class RefutationReport:
    kind: str
    horizons: list
    estimands: list
    estimates: dict            # estimand -> array, (reps, horizons) or (horizons,)
    baseline: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    passed: bool = True
    seeds: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(x):
            return np.asarray(x).tolist()

        return {
            "kind": self.kind,
            "horizons": list(self.horizons),
            "estimands": list(self.estimands),
            "estimates": {k: arr(v) for k, v in self.estimates.items()},
            "baseline": {k: arr(v) for k, v in self.baseline.items()},
            "summary": self.summary,
            "verdicts": self.verdicts,
            "passed": bool(self.passed),
            "seeds": list(self.seeds),
            "extras": self.extras,
        }


def _rep_seed(seed: int, kind: int, rep: int) -> int:
    return int(np.random.default_rng([seed, 0xEF, kind, rep]).integers(2 ** 31))


def _with_outcomes(cohort, treatment=None, times=None, events=None) -> SurvivalCohort:
    return SurvivalCohort(
        ids=list(cohort.ids),
        X=cohort.X.copy(),
        treatment=cohort.treatment.copy() if treatment is None else treatment,
        time_months=cohort.time_months.copy() if times is None else times,
        event=cohort.event.copy() if events is None else events,
        schema=cohort.schema,
        standardized=cohort.standardized,
    )


def _summarize(values: np.ndarray) -> dict:
    return {
        "mean": [float(v) for v in values.mean(axis=0)],
        "sd": [float(v) for v in values.std(axis=0, ddof=1)],
        "max_deviation": [float(v) for v in np.abs(values).max(axis=0)],
    }


def dummy_outcome_test(cohort: SurvivalCohort, config: RunConfig,
                       reps: int = 20, seed: int = 0) -> RefutationReport:
    """Permute treatments and outcome pairs independently; effects should die.

    Per repetition, W is shuffled and (T, delta) pairs are shuffled with an
    independent permutation, then the full pipeline reruns with a
    repetition-specific seed. Pass verdict: for horizons up to 60 months the
    repetition mean lies within 2 SD/sqrt(reps) of zero.
    """
    horizons = list(config.horizons)
    estimates = {e: np.zeros((reps, len(horizons))) for e in config.estimands}
    seeds = []
    for rep in range(reps):
        rep_seed = _rep_seed(seed, 1, rep)
        seeds.append(rep_seed)
        rng = np.random.default_rng([seed, 0xD0, rep])
        perm_w = rng.permutation(cohort.n)
        perm_ty = rng.permutation(cohort.n)
        shuffled = _with_outcomes(
            cohort,
            treatment=cohort.treatment[perm_w],
            times=cohort.time_months[perm_ty],
            events=cohort.event[perm_ty],
        )
        sweep = horizon_sweep(shuffled, replace(config, seed=rep_seed), need_cate=False)
        for e in config.estimands:
            estimates[e][rep] = sweep.ates(e)

    summary = {e: _summarize(estimates[e]) for e in config.estimands}
    verdicts = {}
    passed = True
    for e in config.estimands:
        per_horizon = []
        for j, h in enumerate(horizons):
            mean = estimates[e][:, j].mean()
            sd = estimates[e][:, j].std(ddof=1)
            ok = bool(abs(mean) <= 2.0 * sd / np.sqrt(reps))
            per_horizon.append(ok)
            if h <= DUMMY_RELIABLE_MAX_HORIZON and not ok:
                passed = False
        verdicts[e] = per_horizon
    return RefutationReport(kind="dummy_outcome", horizons=horizons,
                            estimands=list(config.estimands), estimates=estimates,
                            summary=summary, verdicts=verdicts, passed=passed,
                            seeds=seeds)


def negative_control_test(cohort: SurvivalCohort, config: RunConfig,
                          seed: int = 0) -> RefutationReport:
    """Replace treatment with Bernoulli noise at the observed rate.

    Outcomes are kept; the refit pipeline must find no effect: |ate| below
    2 SE at every horizon.
    """
    rng = np.random.default_rng([seed, 0x9C])
    rate = cohort.treatment_rate
    fake = (rng.random(cohort.n) < rate).astype(int)
    run_seed = _rep_seed(seed, 2, 0)
    sweep = horizon_sweep(_with_outcomes(cohort, treatment=fake),
                          replace(config, seed=run_seed), need_cate=False)
    horizons = list(config.horizons)
    estimates, ses, verdicts = {}, {}, {}
    passed = True
    for e in config.estimands:
        a, s = sweep.ates(e), sweep.ses(e)
        estimates[e], ses[e] = a, s
        ok = np.abs(a) < NEGATIVE_CONTROL_Z * s
        verdicts[e] = [bool(v) for v in ok]
        passed &= bool(ok.all())
    return RefutationReport(kind="negative_control", horizons=horizons,
                            estimands=list(config.estimands), estimates=estimates,
                            summary={e: {"se": [float(v) for v in ses[e]]}
                                     for e in config.estimands},
                            verdicts=verdicts, passed=passed, seeds=[run_seed],
                            extras={"fake_treatment_rate": float(fake.mean()),
                                    "original_treatment_rate": float(rate)})


def _confounder_column(treatment: np.ndarray, strength: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Unit-variance column with exact sample correlation ``strength`` to W."""
    w = treatment.astype(float)
    if w.std() < 1e-12:
        raise CorrelationUnachievable("treatment is constant; correlation undefined")
    w_std = (w - w.mean()) / w.std()
    noise = rng.normal(size=len(w))
    noise = noise - noise.mean()
    noise = noise - w_std * (noise @ w_std) / (w_std @ w_std)
    if noise.std() < 1e-12:
        raise CorrelationUnachievable("degenerate residual noise")
    noise /= noise.std()
    return strength * w_std + np.sqrt(1.0 - strength ** 2) * noise


def _append_columns(cohort: SurvivalCohort, columns: dict) -> SurvivalCohort:
    schema = cohort.schema
    new_schema = ColumnSchema(
        names=[*schema.names, *columns.keys()],
        kinds=[*schema.kinds, *["continuous"] * len(columns)],
        onehot_groups=dict(schema.onehot_groups),
        means=None, sds=None,
        constant_columns=list(schema.constant_columns),
    )
    X = np.column_stack([cohort.X, *columns.values()])
    return cohort.with_covariates(X, new_schema)


def synthetic_confounder_test(cohort: SurvivalCohort, config: RunConfig,
                              strengths=(0.1, 0.3, 0.5),
                              seed: int = 0) -> RefutationReport:
    """Append a covariate correlated with treatment, unrelated to outcome.

    Reports per-horizon |delta ate| against the unmodified baseline for each
    strength; the verdict checks deltas grow with strength (max over
    horizons at the largest strength at least that at the smallest).
    """
    work = cohort if cohort.standardized else standardize(cohort)
    base_seed = _rep_seed(seed, 3, 0)
    baseline = horizon_sweep(work, replace(config, seed=base_seed), need_cate=False)
    horizons = list(config.horizons)
    deltas = {e: np.zeros((len(strengths), len(horizons))) for e in config.estimands}
    realized = []
    for si, r in enumerate(strengths):
        rng = np.random.default_rng([seed, 0xCF, si])
        z = _confounder_column(work.treatment, float(r), rng)
        realized.append(float(np.corrcoef(z, work.treatment)[0, 1]))
        modified = _append_columns(work, {"synthetic_confounder": z})
        sweep = horizon_sweep(modified, replace(config, seed=base_seed), need_cate=False)
        for e in config.estimands:
            deltas[e][si] = np.abs(sweep.ates(e) - baseline.ates(e))

    verdicts = {}
    passed = True
    for e in config.estimands:
        monotone = bool(deltas[e][-1].max() >= deltas[e][0].max())
        verdicts[e] = monotone
        passed &= monotone
    return RefutationReport(kind="synthetic_confounder", horizons=horizons,
                            estimands=list(config.estimands), estimates=deltas,
                            baseline={e: baseline.ates(e) for e in config.estimands},
                            summary={"strengths": list(strengths),
                                     "realized_correlation": realized},
                            verdicts=verdicts, passed=passed, seeds=[base_seed])


def noise_feature_test(cohort: SurvivalCohort, config: RunConfig, k: int = 5,
                       seed: int = 0) -> RefutationReport:
    """Append k standard-normal covariates; estimates and rankings must hold.

    Pass verdict: every per-horizon |delta ate| is below 0.5 SE and no noise
    column reaches the top-5 of split-frequency importance (aggregated over
    horizon forests). With k = 0 the report equals the baseline exactly.
    """
    work = cohort if cohort.standardized else standardize(cohort)
    base_seed = _rep_seed(seed, 4, 0)
    cfg = replace(config, seed=base_seed)
    baseline = horizon_sweep(work, cfg, need_cate=False)
    if k > 0:
        rng = np.random.default_rng([seed, 0x40, 1])
        noise_cols = {f"noise_{i}": rng.normal(size=work.n) for i in range(k)}
        modified = _append_columns(work, noise_cols)
    else:
        modified = work
    sweep = horizon_sweep(modified, cfg, need_cate=True, keep_models=True)

    importance = np.zeros(modified.p)
    for est in sweep.estimates.values():
        importance += split_frequencies(est.diagnostics["forest_model"])
    noise_idx = set(range(work.p, modified.p))
    top = set(int(i) for i in np.argsort(-importance)[:NOISE_TOP_K])
    noise_in_top = bool(top & noise_idx)

    horizons = list(config.horizons)
    estimates, verdicts = {}, {}
    passed = not noise_in_top
    for e in config.estimands:
        a = sweep.ates(e)
        estimates[e] = a
        delta = np.abs(a - baseline.ates(e))
        ok = delta < NOISE_DELTA_SE_FACTOR * baseline.ses(e)
        verdicts[e] = [bool(v) for v in ok]
        passed &= bool(ok.all())
    return RefutationReport(kind="noise_features", horizons=horizons,
                            estimands=list(config.estimands), estimates=estimates,
                            baseline={e: baseline.ates(e) for e in config.estimands},
                            summary={"k": k,
                                     "importance": [float(v) for v in importance],
                                     "noise_in_top": noise_in_top},
                            verdicts=verdicts, passed=passed, seeds=[base_seed])
