"""Continuous effect trajectories fused from per-horizon estimates.

Two complementary fits of the horizon-wise effect series (tau_h, se_h):

* a weighted quadratic tau(t) = b0 + b1 t + b2 t^2 (inverse-variance
  weights) with closed-form peak time -b1/(2 b2), peak magnitude, and a
  numerically solved effect half-life;
* a natural cubic smoothing spline with knots at the horizons, its penalty
  weight chosen by exact leave-one-out cross-validation (hat-matrix
  shortcut), with peak and inflection points read off its derivatives.

The quadratic solve runs on a [0, 1]-scaled time axis for conditioning and
maps coefficients and their covariance back analytically. The spline solve
uses the Reinsch form: with K = Q R^{-1} Q' the curvature penalty matrix,
fitted values are f = y - lam W^{-1} Q gamma where
(R + lam Q' W^{-1} Q) gamma = Q' y, and gamma holds the spline's second
derivatives at the interior knots. The hat matrix
H = I - lam W^{-1} Q (R + lam Q' W^{-1} Q)^{-1} Q' gives exact LOO errors
(y_i - f_i)/(1 - H_ii); in the lam -> infinity limit the fit is the weighted
least-squares line and at lam = 0 it interpolates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import CastError, SingularDesign, TooFewPoints

Z_95 = 1.96
HALF_LIFE_VALUE_TOL = 1e-9
PEAK_REFINE_TOL = 1e-3
LAMBDA_GRID_SIZE = 50
LAMBDA_GRID_DECADES = 8.0


@dataclass
class EffectSeries:
    horizons: np.ndarray
    effects: np.ndarray
    ses: np.ndarray
    estimand: str = "sp"

    def __post_init__(self):
        self.horizons = np.asarray(self.horizons, dtype=float)
        self.effects = np.asarray(self.effects, dtype=float)
        self.ses = np.asarray(self.ses, dtype=float)
        if not (self.horizons.shape == self.effects.shape == self.ses.shape):
            raise CastError("horizons, effects, and ses must have equal length")
        if self.horizons.ndim != 1 or len(self.horizons) == 0:
            raise CastError("series must be a non-empty vector")
        if self.horizons[0] <= 0 or np.any(np.diff(self.horizons) <= 0):
            raise CastError("horizons must be strictly increasing and positive")
        if np.any(self.ses <= 0):
            raise CastError("every standard error must be positive")

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.ses ** 2

    @property
    def n(self) -> int:
        return len(self.horizons)


# --- parametric component ---------------------------------------------------


@dataclass
class QuadraticFit:
    beta: np.ndarray          # (b0, b1, b2) on the raw time axis
    covariance: np.ndarray    # 3x3, from (X' W X)^{-1}
    t_peak: float             # NaN when b2 >= 0
    max_effect: float
    half_life: float
    series: EffectSeries

    def predict(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta[0] + self.beta[1] * t + self.beta[2] * t * t

    def ci_bounds(self, t, z: float = Z_95):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        design = np.column_stack([np.ones_like(t), t, t * t])
        var = np.einsum("ij,jk,ik->i", design, self.covariance, design)
        half = z * np.sqrt(np.maximum(var, 0.0))
        center = self.predict(t)
        return center - half, center + half


def fit_quadratic(series: EffectSeries) -> QuadraticFit:
    """Inverse-variance weighted quadratic fit with peak and half-life.

    The peak is reported only for a concave fit (negative curvature); a flat
    or convex fit carries NaN peak, magnitude, and half-life.
    """
    if series.n < 3:
        raise TooFewPoints(f"quadratic fit needs at least 3 horizons, got {series.n}")
    h = series.horizons
    w = series.weights
    a, span = h[0], h[-1] - h[0]
    u = (h - a) / span
    X = np.column_stack([np.ones_like(u), u, u * u])
    XtW = X.T * w
    A = XtW @ X
    try:
        beta_u = np.linalg.solve(A, XtW @ series.effects)
        cov_u = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(f"weighted quadratic design is singular: {exc}") from None
    # map u = (t - a)/span back to the raw axis
    J = np.array([
        [1.0, -a / span, (a / span) ** 2],
        [0.0, 1.0 / span, -2.0 * a / span ** 2],
        [0.0, 0.0, 1.0 / span ** 2],
    ])
    beta = J @ beta_u
    cov = J @ cov_u @ J.T

    # curvature below float-noise scale counts as the degenerate flat branch
    curvature_floor = 1e-10 * (np.abs(series.effects).max() + 1e-300) / span ** 2
    if beta[2] < -curvature_floor:
        t_peak = -beta[1] / (2.0 * beta[2])
        max_effect = float(beta[0] + beta[1] * t_peak + beta[2] * t_peak ** 2)
    else:
        t_peak = max_effect = float("nan")
    fit = QuadraticFit(beta=beta, covariance=cov, t_peak=float(t_peak),
                       max_effect=max_effect, half_life=float("nan"),
                       series=series)
    fit.half_life = half_life(fit)
    return fit


def half_life(fit: QuadraticFit) -> float:
    """Smallest time past the peak at which the fit drops to half its maximum.

    Solved by bisection to an effect-value tolerance of 1e-9; NaN when the
    peak is undefined, non-positive, or the half level is not reached before
    twice the last horizon (the extrapolation cap).
    """
    if math.isnan(fit.t_peak) or not fit.max_effect > 0.0:
        return float("nan")
    target = fit.max_effect / 2.0
    hi_cap = 2.0 * fit.series.horizons[-1]
    if fit.t_peak >= hi_cap or fit.predict(hi_cap) > target:
        return float("nan")
    lo, hi = fit.t_peak, hi_cap
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        value = float(fit.predict(mid))
        if abs(value - target) < HALF_LIFE_VALUE_TOL:
            return mid - fit.t_peak
        if value > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) - fit.t_peak


# --- non-parametric component ------------------------------------------------


def _penalty_matrices(h: np.ndarray):
    """Green-Silverman Q (n x n-2) and R (n-2 x n-2) for natural cubics."""
    n = len(h)
    gaps = np.diff(h)
    Q = np.zeros((n, n - 2))
    R = np.zeros((n - 2, n - 2))
    for j in range(1, n - 1):
        Q[j - 1, j - 1] = 1.0 / gaps[j - 1]
        Q[j, j - 1] = -1.0 / gaps[j - 1] - 1.0 / gaps[j]
        Q[j + 1, j - 1] = 1.0 / gaps[j]
        R[j - 1, j - 1] = (gaps[j - 1] + gaps[j]) / 3.0
        if j < n - 2:
            R[j - 1, j] = R[j, j - 1] = gaps[j] / 6.0
    return Q, R


def _solve_spline(h, y, w, lam):
    """Fitted knot values and hat diagonal for one penalty weight."""
    n = len(h)
    Q, R = _penalty_matrices(h)
    if lam == 0.0:
        return y.copy(), np.ones(n)
    Winv_Q = Q / w[:, None]
    B = R + lam * (Q.T @ Winv_Q)
    gamma = np.linalg.solve(B, Q.T @ y)
    fitted = y - lam * (Winv_Q @ gamma)
    hat_diag = 1.0 - lam * np.einsum("ij,ij->i", Winv_Q, np.linalg.solve(B, Q.T).T)
    return fitted, hat_diag


@dataclass
class SplineFit:
    knots: np.ndarray
    values: np.ndarray        # fitted values at the knots
    lam: float
    cv_error: float
    cv_table: list            # (lambda, weighted LOO error) over the grid
    series: EffectSeries
    spline: CubicSpline = field(repr=False, default=None)

    def __post_init__(self):
        if self.spline is None:
            # the smoothing spline is the natural cubic interpolant of its
            # own fitted values, so evaluation can delegate to that form
            self.spline = CubicSpline(self.knots, self.values, bc_type="natural")

    def __call__(self, t):
        return self.spline(t)

    def derivative(self, order: int = 1):
        return self.spline.derivative(order)


def fit_spline(series: EffectSeries, lam: float | None = None,
               n_grid: int = LAMBDA_GRID_SIZE) -> SplineFit:
    """Weighted natural cubic smoothing spline with LOO-selected penalty.

    The penalty weight minimizes the weighted leave-one-out error
    sum_h w_h ((tau_h - f_h)/(1 - H_hh))^2 over a log-spaced grid centered
    on trace(W)/trace(K); ties keep the smaller penalty. Passing ``lam``
    skips the search (0 interpolates; very large values approach the
    weighted least-squares line).
    """
    if series.n < 4:
        raise TooFewPoints(f"spline fit needs at least 4 horizons, got {series.n}")
    h, y, w = series.horizons, series.effects, series.weights

    if lam is not None:
        fitted, _ = _solve_spline(h, y, w, float(lam))
        return SplineFit(knots=h, values=fitted, lam=float(lam),
                         cv_error=float("nan"), cv_table=[], series=series)

    Q, R = _penalty_matrices(h)
    K = Q @ np.linalg.solve(R, Q.T)
    lam_ref = float(np.sum(w) / np.trace(K))
    grid = lam_ref * np.logspace(-LAMBDA_GRID_DECADES, LAMBDA_GRID_DECADES, n_grid)
    best = None
    table = []
    for lam_g in grid:
        fitted, hat_diag = _solve_spline(h, y, w, lam_g)
        loo = (y - fitted) / (1.0 - hat_diag)
        err = float(np.sum(w * loo * loo))
        table.append((float(lam_g), err))
        if best is None or err < best[0]:
            best = (err, float(lam_g), fitted)
    err, lam_star, fitted = best
    return SplineFit(knots=h, values=fitted, lam=lam_star, cv_error=err,
                     cv_table=table, series=series)


@dataclass
class SplineFeatures:
    t_star: float             # NaN when the argmax sits on the domain boundary
    inflections: list
    phases: list              # (start, end, "accelerating" | "decelerating")


def _golden_max(f, lo, hi, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _bisect_root(f, lo, hi, tol=1e-9):
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if hi - lo < tol:
            break
        if (flo <= 0.0) == (fm <= 0.0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def extract_features(fit: SplineFit) -> SplineFeatures:
    """Peak, inflection points, and curvature phases of the fitted spline.

    The peak is the argmax on a 1-month grid refined by golden-section to
    1e-3 months; an argmax on the domain boundary is reported as NaN.
    Inflections are sign changes of the second derivative, refined by
    bisection; phases label the curvature sign between them.
    """
    lo, hi = float(fit.knots[0]), float(fit.knots[-1])
    grid = np.linspace(lo, hi, int(round(hi - lo)) + 1)
    values = fit(grid)
    k = int(np.argmax(values))
    if k == 0 or k == len(grid) - 1:
        t_star = float("nan")
    else:
        t_star = _golden_max(lambda t: float(fit(t)), grid[k - 1], grid[k + 1],
                             PEAK_REFINE_TOL)

    g2 = fit.derivative(2)
    # the natural boundary pins g'' to 0 at the first and last knot, so the
    # piecewise-linear curvature cannot truly change sign in the outer
    # segments; scan only between the interior knots
    inner = np.clip(grid, fit.knots[1], fit.knots[-2])
    scan = np.unique(inner)
    curv = g2(scan)
    inflections = []
    for i in range(len(scan) - 1):
        a, b = curv[i], curv[i + 1]
        if a == 0.0 and b == 0.0:
            continue
        if (a < 0.0 < b) or (b < 0.0 < a):
            inflections.append(float(_bisect_root(lambda t: float(g2(t)),
                                                  scan[i], scan[i + 1])))
        elif a == 0.0 and i > 0 and (curv[i - 1] < 0.0 < b or b < 0.0 < curv[i - 1]):
            inflections.append(float(scan[i]))

    phases = []
    bounds = [lo, *inflections, hi]
    for start, end in zip(bounds, bounds[1:]):
        mid = 0.5 * (start + end)
        label = "accelerating" if float(g2(mid)) > 0.0 else "decelerating"
        phases.append((float(start), float(end), label))
    return SplineFeatures(t_star=t_star, inflections=inflections, phases=phases)


# --- combined report ---------------------------------------------------------


@dataclass
class TrajectoryCurves:
    grid: np.ndarray
    quadratic: np.ndarray
    quadratic_lo: np.ndarray
    quadratic_hi: np.ndarray
    spline: np.ndarray


@dataclass
class TrajectoryReport:
    curves: dict      # estimand -> TrajectoryCurves
    summary: dict     # estimand -> summary mapping


def _nan_to_none(x: float):
    return None if (x is None or (isinstance(x, float) and math.isnan(x))) else float(x)


def trajectory_report(series_list: list, z: float = Z_95) -> TrajectoryReport:
    """Fit both trajectory models per estimand and emit plot-ready curves.

    Curves are sampled on a 1-month grid spanning exactly the horizon range,
    with pointwise normal-theory confidence bounds around the quadratic.
    """
    curves = {}
    summary = {}
    for series in series_list:
        quad = fit_quadratic(series)
        spline = fit_spline(series)
        features = extract_features(spline)
        lo, hi = series.horizons[0], series.horizons[-1]
        grid = np.linspace(lo, hi, int(round(hi - lo)) + 1)
        q_lo, q_hi = quad.ci_bounds(grid, z=z)
        curves[series.estimand] = TrajectoryCurves(
            grid=grid,
            quadratic=quad.predict(grid),
            quadratic_lo=q_lo,
            quadratic_hi=q_hi,
            spline=np.asarray(spline(grid)),
        )
        summary[series.estimand] = {
            "quadratic": {
                "beta": [float(b) for b in quad.beta],
                "t_peak": _nan_to_none(quad.t_peak),
                "max_effect": _nan_to_none(quad.max_effect),
                "half_life": _nan_to_none(quad.half_life),
            },
            "spline": {
                "lambda": float(spline.lam),
                "cv_error": _nan_to_none(spline.cv_error),
                "t_star": _nan_to_none(features.t_star),
                "inflections": [float(t) for t in features.inflections],
                "phases": [[s, e, label] for s, e, label in features.phases],
            },
        }
    return TrajectoryReport(curves=curves, summary=summary)
