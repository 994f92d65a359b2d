"""Synthetic-cohort generator with known ground-truth time-varying effects.

The generator is the oracle for estimator tests: it emits a cohort together
with the true per-subject effect trajectory, true propensities, and true
per-horizon average effects on both the survival-probability and RMST scales.

The control arm follows an exponential proportional-hazards survival model;
the treated arm's survival is defined as S1(t|x) = S0(t|x) + tau(x, t), which
makes the survival-probability effect exactly controllable. Feasibility
(S1 in [0, 1], non-increasing) is verified numerically and violations raise
:class:`InfeasibleEffect`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .cohort import BINARY, CONTINUOUS, ONEHOT, ColumnSchema, SurvivalCohort
from .errors import InfeasibleEffect, NonPositiveDose

DEFAULT_HORIZONS = tuple(float(h) for h in range(12, 121, 12))

HPV_LEVELS = ("negative", "positive", "unknown")
SITE_LEVELS = ("hypopharynx", "larynx", "nasopharynx", "oropharynx")


@dataclass
class BedParams:
    """Radiobiological parameters for biologically effective dose.

    ``repop_rate_gy_per_day`` is the dose-equivalent repopulation loss per
    day past ``repop_onset_days``. The dose-dependent variant scales that
    loss by dose-per-fraction relative to ``dd_reference_dose``.
    """

    alpha: float = 0.2
    alpha_beta: float = 10.0
    repop_onset_days: float = 28.0
    repop_rate_gy_per_day: float = 0.7
    dd_reference_dose: float = 2.0
    model: str = "di"

    def __post_init__(self):
        for name in ("alpha", "alpha_beta", "repop_onset_days", "dd_reference_dose"):
            if getattr(self, name) <= 0:
                raise NonPositiveDose(f"{name} must be positive")
        if self.repop_rate_gy_per_day < 0:
            raise NonPositiveDose("repop_rate_gy_per_day must be non-negative")
        if self.model not in ("di", "dd"):
            raise NonPositiveDose(f"unknown BED model {self.model!r}")


def bed(dose_per_fraction: float, n_fractions: int, duration_days: float,
        params: BedParams) -> float:
    """Biologically effective dose in Gy for one fractionation schedule.

    Linear-quadratic first term n*d*(1 + d/(alpha/beta)) minus a repopulation
    loss for treatment time beyond the onset day; the loss rate is constant
    (dose-independent model) or proportional to dose per fraction
    (dose-dependent model).
    """
    if dose_per_fraction <= 0 or n_fractions <= 0 or duration_days <= 0:
        raise NonPositiveDose("dose, fraction count, and duration must be positive")
    base = n_fractions * dose_per_fraction * (1.0 + dose_per_fraction / params.alpha_beta)
    days_over = max(0.0, duration_days - params.repop_onset_days)
    rate = params.repop_rate_gy_per_day
    if params.model == "dd":
        rate = rate * dose_per_fraction / params.dd_reference_dose
    return base - days_over * rate


@dataclass
class EffectSpec:
    """True effect trajectory tau(x, t) on the survival-probability scale.

    Kinds: ``null`` (zero), ``quadratic`` (exact parabola through the origin
    peaking at ``peak_time``, going negative past twice the peak), ``peaked``
    (the same parabola floored at zero outside its support). Heterogeneity:
    per-subject scale 1 - sum_f strength_f * tanh(z_f) over symmetric latent
    drivers, so the population-average scale is exactly 1. ``het_feature`` /
    ``het_strength`` is the single-driver shorthand; ``het_features`` maps
    several drivers to strengths.
    """

    kind: str = "peaked"
    peak_time: float = 50.0
    peak_value: float = 0.15
    het_feature: str | None = None
    het_strength: float = 0.0
    het_features: dict | None = None

    def driver_strengths(self) -> dict:
        if self.het_features:
            return dict(self.het_features)
        if self.het_feature is not None and self.het_strength != 0.0:
            return {self.het_feature: self.het_strength}
        return {}

    def curve(self, t):
        """Population-level trajectory q(t) with q(peak_time) = peak_value."""
        t = np.asarray(t, dtype=float)
        if self.kind == "null":
            return np.zeros_like(t)
        u = t / self.peak_time
        quad = self.peak_value * (2.0 * u - u * u)
        if self.kind == "quadratic":
            return quad
        if self.kind == "peaked":
            return np.maximum(0.0, quad)
        raise InfeasibleEffect(f"unknown effect kind {self.kind!r}")

    def curve_scalar(self, t: float) -> float:
        if self.kind == "null":
            return 0.0
        u = t / self.peak_time
        quad = self.peak_value * (2.0 * u - u * u)
        if self.kind == "peaked":
            return max(0.0, quad)
        return quad

    def curve_integral(self, h: float) -> float:
        """Exact integral of q on [0, h] (the RMST-scale population effect)."""
        if self.kind == "null":
            return 0.0
        tv, m = self.peak_time, self.peak_value

        def anti(t):
            return m * (t * t / tv - t ** 3 / (3 * tv * tv))

        if self.kind == "quadratic":
            return anti(h)
        h_eff = min(h, 2.0 * tv)
        return anti(h_eff)


@dataclass
class ScenarioConfig:
    """Generator configuration; see :func:`load_scenario` for the file format."""

    n: int = 2000
    seed: int = 0
    effect: EffectSpec = field(default_factory=EffectSpec)
    treatment_intercept: float = -0.2
    treatment_coefs: dict = field(default_factory=lambda: {"z_stage": 1.0, "hpv=positive": -0.4})
    risk_coefs: dict = field(default_factory=lambda: {"z_stage": 0.3, "z_age": 0.2})
    baseline_median_months: float = 20.0
    censor_median_months: float | None = 90.0
    admin_censor_months: float = 150.0
    include_rt: bool = False
    risk_cap: float = 1.0  # |log-hazard score| bound; keeps S0 + tau feasible
    horizons: tuple = DEFAULT_HORIZONS

    def __post_init__(self):
        if self.baseline_median_months <= 0:
            raise InfeasibleEffect("baseline_median_months must be positive")
        if self.censor_median_months is not None and self.censor_median_months <= 0:
            raise InfeasibleEffect("censor_median_months must be positive")
        if not -1.0 <= self.effect.peak_value <= 1.0:
            raise InfeasibleEffect("peak effect must lie in [-1, 1] on the SP scale")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "effect"}
        d["horizons"] = list(self.horizons)
        d["effect"] = dict(self.effect.__dict__)
        return d


@dataclass
class TruthRecord:
    """Ground truth accompanying a generated cohort."""

    horizons: np.ndarray
    ate_sp: np.ndarray           # population mean of tau(., h)
    ate_rmst: np.ndarray
    tau_sp: np.ndarray           # (n, len(horizons)) per-subject truth
    propensity: np.ndarray       # (n,) true assignment probabilities
    effect_scale: np.ndarray     # (n,) per-subject trajectory scale
    config: dict

    def to_dict(self) -> dict:
        return {
            "horizons": [float(h) for h in self.horizons],
            "ate_sp": [float(v) for v in self.ate_sp],
            "ate_rmst": [float(v) for v in self.ate_rmst],
            "config": self.config,
        }


@dataclass
class GenerationResult:
    cohort: SurvivalCohort
    truth: TruthRecord
    raw_columns: dict  # column name -> list of raw cell strings, for CSV export
    schema_config: dict  # column name -> kind, for re-ingestion


def _build_covariates(config: ScenarioConfig, rng: np.random.Generator):
    n = config.n
    age = rng.normal(60.0, 10.0, n)
    sex = (rng.random(n) < 0.8).astype(float)
    stage = rng.choice([1.0, 2.0, 3.0, 4.0], size=n, p=[0.2, 0.25, 0.3, 0.25])
    hpv = rng.choice(len(HPV_LEVELS), size=n, p=[0.3, 0.5, 0.2])
    z_pack = rng.normal(0.0, 1.0, n)
    pack_years = np.exp(2.5 + 0.8 * z_pack)  # lognormal, monotone in the latent z
    site = rng.choice(len(SITE_LEVELS), size=n, p=[0.08, 0.22, 0.1, 0.6])

    internal = {
        "z_age": (age - 60.0) / 10.0,
        "sex": sex,
        "z_stage": (stage - 2.6) / 1.06,
        "z_pack": z_pack,
    }
    for k, lvl in enumerate(HPV_LEVELS):
        internal[f"hpv={lvl}"] = (hpv == k).astype(float)
    for k, lvl in enumerate(SITE_LEVELS):
        internal[f"site={lvl}"] = (site == k).astype(float)

    columns = [
        ("age", CONTINUOUS, age, [repr(float(v)) for v in age]),
        ("sex", BINARY, sex, [str(int(v)) for v in sex]),
        ("tnm_stage", CONTINUOUS, stage, [str(int(v)) for v in stage]),
        ("hpv", "categorical", hpv, [HPV_LEVELS[k] for k in hpv]),
        ("pack_years", CONTINUOUS, pack_years, [repr(float(v)) for v in pack_years]),
        ("site", "categorical", site, [SITE_LEVELS[k] for k in site]),
    ]
    if config.include_rt:
        n_fractions = rng.choice([33, 35], size=n, p=[0.4, 0.6])
        duration = np.maximum(rng.normal(46.0, 5.0, n), n_fractions.astype(float))
        dose = rng.uniform(1.8, 2.2, n)
        di = BedParams(model="di")
        dd = BedParams(model="dd")
        bed_di = np.array([bed(d0, int(f), float(d), di)
                           for d0, f, d in zip(dose, n_fractions, duration)])
        bed_dd = np.array([bed(d0, int(f), float(d), dd)
                           for d0, f, d in zip(dose, n_fractions, duration)])
        rt_year = np.round(rng.uniform(2005.0, 2017.0, n), 2)
        columns.append(("bed_di", CONTINUOUS, bed_di, [repr(float(v)) for v in bed_di]))
        columns.append(("bed_dd", CONTINUOUS, bed_dd, [repr(float(v)) for v in bed_dd]))
        columns.append(("rt_year", CONTINUOUS, rt_year, [repr(float(v)) for v in rt_year]))
        internal["z_bed_di"] = (bed_di - bed_di.mean()) / max(bed_di.std(), 1e-9)
        internal["z_rt_year"] = (rt_year - rt_year.mean()) / max(rt_year.std(), 1e-9)
    return columns, internal


def _linear_score(coefs: dict, intercept: float, internal: dict, n: int) -> np.ndarray:
    eta = np.full(n, float(intercept))
    for name, value in coefs.items():
        if name not in internal:
            raise InfeasibleEffect(f"unknown feature {name!r} in coefficient map")
        eta += float(value) * internal[name]
    return eta


def _expand_numeric(columns, n: int):
    """One-hot expand categorical columns exactly as CSV ingestion would."""
    names, kinds, groups, mats = [], [], {}, []
    for name, kind, values, raw in columns:
        if kind == "categorical":
            levels = sorted(set(raw))
            members = [f"{name}={lvl}" for lvl in levels]
            groups[name] = members
            names.extend(members)
            kinds.extend([ONEHOT] * len(members))
            for lvl in levels:
                mats.append(np.array([1.0 if cell == lvl else 0.0 for cell in raw]))
        else:
            names.append(name)
            kinds.append(kind)
            mats.append(np.asarray(values, dtype=float))
    X = np.column_stack(mats) if mats else np.zeros((n, 0))
    return ColumnSchema(names=names, kinds=kinds, onehot_groups=groups), X


def generate(config: ScenarioConfig) -> GenerationResult:
    """Draw a cohort from the scenario and return it with its truth record."""
    rng = np.random.default_rng([config.seed, 0xD6E])
    n = config.n
    columns, internal = _build_covariates(config, rng)

    eta_w = _linear_score(config.treatment_coefs, config.treatment_intercept, internal, n)
    propensity = 1.0 / (1.0 + np.exp(-eta_w))
    W = (rng.random(n) < propensity).astype(int)

    risk = _linear_score(config.risk_coefs, 0.0, internal, n)
    risk = np.clip(risk, -config.risk_cap, config.risk_cap)
    lam = math.log(2.0) / config.baseline_median_months * np.exp(risk)

    scale = np.ones(n)
    for feat, strength in config.effect.driver_strengths().items():
        key = {"pack_years": "z_pack", "age": "z_age"}.get(feat, feat)
        if key not in internal:
            raise InfeasibleEffect(f"unknown heterogeneity feature {feat!r}")
        scale = scale - float(strength) * np.tanh(internal[key])
    # floor at zero so stacked drivers cannot push survival below S0;
    # with total strength <= 1 the floor is inactive almost surely
    scale = np.maximum(scale, 0.0)

    t_max = config.admin_censor_months
    _check_feasible(config.effect, scale, lam, t_max)

    # event times: control closed-form, treated by root finding on S1.
    # S1 only needs to be a valid survival function on the observation
    # window; events past the administrative cutoff are never observed.
    U = rng.random(n)
    t_event = np.empty(n)
    ctrl = W == 0
    t_event[ctrl] = -np.log(U[ctrl]) / lam[ctrl]
    q = config.effect.curve_scalar
    for i in np.nonzero(~ctrl)[0]:
        def s1_minus_u(t, i=i):
            return math.exp(-lam[i] * t) + scale[i] * q(t) - U[i]
        if s1_minus_u(t_max) >= 0:
            t_event[i] = np.inf
        else:
            t_event[i] = brentq(s1_minus_u, 0.0, t_max, xtol=1e-10)

    if config.censor_median_months is None:
        c = np.full(n, config.admin_censor_months)
    else:
        c = np.minimum(rng.exponential(config.censor_median_months / math.log(2.0), n),
                       config.admin_censor_months)
    t_obs = np.minimum(t_event, c)
    delta = (t_event <= c).astype(int)
    t_obs = np.maximum(t_obs, 1e-6)
    assert np.all(np.isfinite(t_obs))

    schema, X = _expand_numeric(columns, n)
    ids = [f"s{i}" for i in range(n)]
    cohort = SurvivalCohort(ids=ids, X=X, treatment=W, time_months=t_obs,
                            event=delta, schema=schema)

    horizons = np.asarray(config.horizons, dtype=float)
    tau_sp = scale[:, None] * config.effect.curve(horizons)[None, :]
    truth = TruthRecord(
        horizons=horizons,
        ate_sp=config.effect.curve(horizons),
        ate_rmst=np.array([config.effect.curve_integral(h) for h in horizons]),
        tau_sp=tau_sp,
        propensity=propensity,
        effect_scale=scale,
        config=config.to_dict(),
    )
    raw = {name: raw_cells for name, _, _, raw_cells in columns}
    schema_config = {name: (kind if kind != ONEHOT else BINARY)
                     for name, kind, _, _ in columns}
    return GenerationResult(cohort=cohort, truth=truth, raw_columns=raw,
                            schema_config=schema_config)


def _check_feasible(effect: EffectSpec, scale: np.ndarray, lam: np.ndarray,
                    t_max: float) -> None:
    """Verify S0 + tau is a valid survival function for every subject.

    Checked on a 1-month grid over the observation window, subjects in
    chunks to bound memory.
    """
    grid = np.arange(0.0, t_max + 1.0, 1.0)
    q = effect.curve(grid)
    for start in range(0, len(scale), 2000):
        s = scale[start:start + 2000, None]
        lx = lam[start:start + 2000, None]
        s1 = np.exp(-lx * grid[None, :]) + s * q[None, :]
        if s1.min() < -1e-9 or s1.max() > 1.0 + 1e-9:
            raise InfeasibleEffect(
                f"effect pushes survival outside [0,1] (range {s1.min():.4f}..{s1.max():.4f})")
        if np.any(np.diff(s1, axis=1) > 1e-9):
            raise InfeasibleEffect("effect makes treated survival non-monotone")


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario TOML file.

    Top-level keys mirror :class:`ScenarioConfig`; ``[effect]`` maps to
    :class:`EffectSpec`; ``[treatment]`` holds ``intercept`` plus coefficient
    entries; ``[risk]`` holds hazard coefficients.
    """
    try:
        import tomllib  # python >= 3.11
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    effect = EffectSpec(**data.pop("effect", {}))
    treatment = data.pop("treatment", {})
    intercept = treatment.pop("intercept", 0.0)
    risk = data.pop("risk", {})
    if "horizons" in data:
        data["horizons"] = tuple(float(h) for h in data["horizons"])
    return ScenarioConfig(effect=effect, treatment_intercept=intercept,
                          treatment_coefs=treatment, risk_coefs=risk, **data)
