"""Classical survival estimators: Kaplan-Meier, Nelson-Aalen, RMST, censoring weights.

These serve as nuisance components for the doubly-robust stage and as exact
oracles in tests. Step functions are right-continuous; beyond the last
observed time they extend as constants (flagged via ``max_time``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroup, EmptyInput, NonSurvivalCurve

SURVIVAL = "survival"
CUMHAZ = "cumhaz"


@dataclass
class StepFunction:
    """Right-continuous step function with jumps at ``times``.

    ``values[k]`` is the function value on ``[times[k], times[k+1])``;
    ``value_at_0`` holds on ``[0, times[0])``. Survival curves are
    non-increasing in [0, 1] with value 1 at 0; cumulative hazards are
    non-decreasing starting at 0.
    """

    times: np.ndarray
    values: np.ndarray
    value_at_0: float
    kind: str = SURVIVAL

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or self.values.shape != self.times.shape:
            raise EmptyInput("times and values must be equal-length vectors")
        if len(self.times) and not np.all(np.diff(self.times) > 0):
            raise EmptyInput("jump times must be strictly increasing")
        if self.kind == SURVIVAL:
            seq = np.concatenate([[self.value_at_0], self.values])
            if self.value_at_0 != 1.0 or np.any(np.diff(seq) > 1e-12) or \
                    np.any(seq < -1e-12) or np.any(seq > 1 + 1e-12):
                raise NonSurvivalCurve("survival curve must start at 1 and be non-increasing in [0,1]")
        elif self.kind == CUMHAZ:
            seq = np.concatenate([[self.value_at_0], self.values])
            if self.value_at_0 != 0.0 or np.any(np.diff(seq) < -1e-12):
                raise EmptyInput("cumulative hazard must start at 0 and be non-decreasing")

    @property
    def max_time(self) -> float:
        """Last jump; evaluation past it is a constant extrapolation."""
        return float(self.times[-1]) if len(self.times) else 0.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.where(idx == 0, self.value_at_0, self.values[np.maximum(idx - 1, 0)])
        return out if out.ndim else float(out)

    def left_limit(self, t) -> np.ndarray:
        """Value just before t: jumps at exactly t are excluded."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        out = np.where(idx == 0, self.value_at_0, self.values[np.maximum(idx - 1, 0)])
        return out if out.ndim else float(out)

    def as_table(self) -> np.ndarray:
        """(t, value) pairs including the origin, for CSV/plot export."""
        return np.column_stack([np.concatenate([[0.0], self.times]),
                                np.concatenate([[self.value_at_0], self.values])])


def _at_risk_table(times, events):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise EmptyInput("no observations")
    if times.shape != events.shape:
        raise EmptyInput("times and events must have equal length")
    uniq, inverse = np.unique(times, return_inverse=True)
    # deaths before censorings at tied times: both the death count and the
    # at-risk count at t include every subject with T >= t
    sorted_times = np.sort(times)
    at_risk = (times.size - np.searchsorted(sorted_times, uniq, side="left")).astype(float)
    deaths = np.bincount(inverse, weights=events, minlength=uniq.size)
    return uniq, at_risk, deaths


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit survival estimate S(t) = prod_{t_j <= t} (1 - d_j/n_j)."""
    uniq, at_risk, deaths = _at_risk_table(times, events)
    surv = np.cumprod(1.0 - deaths / at_risk)
    return StepFunction(times=uniq, values=surv, value_at_0=1.0, kind=SURVIVAL)


def nelson_aalen(times, events) -> StepFunction:
    """Cumulative hazard estimate H(t) = sum_{t_j <= t} d_j/n_j."""
    uniq, at_risk, deaths = _at_risk_table(times, events)
    cumhaz = np.cumsum(deaths / at_risk)
    return StepFunction(times=uniq, values=cumhaz, value_at_0=0.0, kind=CUMHAZ)


def rmst(curve: StepFunction, horizon: float) -> float:
    """Restricted mean survival time: the exact step integral of S on [0, horizon]."""
    if curve.kind != SURVIVAL:
        raise NonSurvivalCurve("rmst requires a survival curve")
    if horizon <= 0:
        raise EmptyInput("horizon must be positive")
    knots = np.concatenate([[0.0], curve.times[curve.times < horizon], [horizon]])
    heights = np.concatenate([[curve.value_at_0],
                              curve.values[: (curve.times < horizon).sum()]])
    return float(np.sum(np.diff(knots) * heights))


def censoring_survival(cohort, conditioning: str = "none") -> dict:
    """Kaplan-Meier of the censoring distribution (event := 1 - delta).

    Returns ``{None: curve}`` for unconditional fits or ``{0: ..., 1: ...}``
    when fit separately per treatment arm.
    """
    if cohort.n == 0:
        raise EmptyInput("empty cohort")
    flipped = 1 - cohort.event
    if conditioning == "none":
        return {None: kaplan_meier(cohort.time_months, flipped)}
    if conditioning == "by-treatment":
        curves = {}
        for arm in (0, 1):
            mask = cohort.treatment == arm
            if not mask.any():
                raise EmptyGroup(f"treatment arm {arm} has no subjects")
            curves[arm] = kaplan_meier(cohort.time_months[mask], flipped[mask])
        return curves
    raise EmptyInput(f"unknown conditioning {conditioning!r}")
