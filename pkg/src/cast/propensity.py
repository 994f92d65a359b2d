"""Elastic-net logistic propensity model, overlap trimming, and diagnostics.

The penalized objective is

    -(1/n) sum_i [ W_i log e_i + (1 - W_i) log(1 - e_i) ]
        + lambda * ( alpha * ||beta||_1 + (1 - alpha) * ||beta||_2^2 / 2 )

minimized by cyclic coordinate descent. Each coordinate update minimizes a
quadratic majorizer of the logistic loss (curvature bound 1/4), so the
penalized objective never increases; that descent property is asserted after
every sweep. The intercept is unpenalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import (
    CastError,
    DimensionMismatch,
    EmptyAfterTrim,
    NonConvergence,
    SingleClass,
)

DEFAULT_ALPHA_GRID = (0.01, 0.25, 0.5, 0.75, 0.99)
DEFAULT_TRIM = (0.10, 0.90)
LAMBDA_MIN_RATIO = 1e-4


@dataclass
class PropensityModel:
    intercept: float
    coefficients: np.ndarray
    alpha: float
    lambda_: float
    cv_folds: int
    cv_loss: float
    converged: bool = True
    n_sweeps: int = 0
    cv_table: list = field(default_factory=list)  # (alpha, lambda, mean deviance)


@dataclass
class TrimResult:
    kept_ids: list
    trimmed_ids: list
    lower: float
    upper: float
    kept_index: np.ndarray


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(eta, -700, 700)))


def _deviance(eta: np.ndarray, y: np.ndarray) -> float:
    """Two times the mean negative binomial log-likelihood."""
    return float(2.0 * np.mean(np.logaddexp(0.0, eta) - y * eta))


def _objective(eta, y, beta, alpha, lam) -> float:
    loss = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return loss + lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * (beta ** 2).sum())


def _soft(z: float, thresh: float) -> float:
    if z > thresh:
        return z - thresh
    if z < -thresh:
        return z + thresh
    return 0.0


def _inner_quadratic_cd(H, grad, w, alpha, lam, tol, max_passes=2000):
    """Cyclic soft-threshold coordinate descent on a local quadratic model.

    Minimizes grad@(v - w0) + (1/2)(v - w0)' H (v - w0) + penalty(v[1:])
    where w0 is the entry state; coordinate 0 is the unpenalized intercept.
    Maintains q = H @ (v - w0) so every update is O(p). Uses an active-set
    strategy: full passes alternate with passes over nonzero coordinates.
    """
    p1 = len(w)
    v = w.copy()
    q = np.zeros(p1)
    diag = np.diag(H)

    def one_pass(indices):
        d_max = 0.0
        for j in indices:
            b = diag[j]
            lin = grad[j] + q[j]
            if j == 0:
                denom = b
                thresh = 0.0
            else:
                denom = b + lam * (1.0 - alpha)
                thresh = lam * alpha
            if denom < 1e-12:
                continue
            new = _soft(b * v[j] - lin, thresh) / denom
            d = new - v[j]
            if d != 0.0:
                v[j] = new
                q[:] += d * H[:, j]
                d_max = max(d_max, abs(d))
        return d_max

    all_idx = range(p1)
    passes = 0
    while passes < max_passes:
        passes += 1
        if one_pass(all_idx) < tol:
            break
        while passes < max_passes:
            passes += 1
            if one_pass(np.nonzero(v != 0.0)[0]) < tol:
                break
    return v


def _fit_gram(Z, gram, y, alpha, lam, w, tol, max_sweeps, sweeps_used=0):
    """Penalized logistic fit by repeated quadratic approximation.

    Each sweep solves an elastic-net quadratic model at the current iterate
    by cyclic soft-threshold coordinate descent. The model uses the exact
    IRLS curvature for fast convergence; if that step would increase the
    penalized objective it is replaced by a step on the global quadratic
    upper bound (curvature 1/4), which cannot increase it. Monotone descent
    is asserted per sweep.
    """
    n = len(y)
    eta = Z @ w
    obj = _objective(eta, y, w[1:], alpha, lam)
    sweeps = sweeps_used
    delta = np.inf
    inner_tol = 0.1 * tol
    while sweeps < max_sweeps:
        pvec = _sigmoid(eta)
        grad = Z.T @ (pvec - y) / n
        wts = np.maximum(pvec * (1.0 - pvec), 1e-6)
        H = (Z * wts[:, None]).T @ Z / n
        v = _inner_quadratic_cd(H, grad, w, alpha, lam, tol=inner_tol)
        new_obj = _objective(Z @ v, y, v[1:], alpha, lam)
        if new_obj > obj + 1e-12 * (1.0 + abs(obj)):
            v = _inner_quadratic_cd(0.25 * gram, grad, w, alpha, lam, tol=inner_tol)
            new_obj = _objective(Z @ v, y, v[1:], alpha, lam)
        delta = float(np.max(np.abs(v - w)))
        w = v
        eta = Z @ w
        sweeps += 1
        assert new_obj <= obj + 1e-10 * (1.0 + abs(obj)), "coordinate sweep increased the objective"
        obj = new_obj
        if delta < tol:
            return w, sweeps
    raise NonConvergence(f"coordinate descent hit {max_sweeps} sweeps (last change {delta:.3e})",
                         gap=float(delta))


def _cd_fit(X, y, alpha, lam, beta0=0.0, beta=None, tol=1e-7, max_sweeps=100_000):
    """Penalized logistic fit; returns (intercept, coefficients, sweeps)."""
    n, p = X.shape
    Z = np.column_stack([np.ones(n), X])
    gram = Z.T @ Z / n
    w = np.zeros(p + 1)
    w[0] = beta0
    if beta is not None:
        w[1:] = beta
    w, sweeps = _fit_gram(Z, gram, y, alpha, lam, w, tol, max_sweeps)
    return float(w[0]), w[1:], sweeps


def _lambda_path(X, y, alpha, n_lambda) -> np.ndarray:
    ybar = y.mean()
    g = np.abs(((y - ybar)[:, None] * X).mean(axis=0))
    lam_max = g.max() / max(alpha, 1e-3)
    lam_max = max(lam_max, 1e-10)
    return lam_max * np.logspace(0.0, np.log10(LAMBDA_MIN_RATIO), n_lambda)


def _stratified_folds(y, folds, seed):
    rng = np.random.default_rng([seed, 0xF01D])
    assignment = np.empty(len(y), dtype=int)
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def fit_elastic_net(cohort, alpha_grid=None, lambda_grid=None, folds: int = 10,
                    seed: int = 0, n_lambda: int = 100, tol: float = 1e-7,
                    max_sweeps: int = 100_000) -> PropensityModel:
    """Cross-validated elastic-net logistic regression of treatment on covariates.

    Hyperparameters minimize the mean held-out binomial deviance over a
    stratified, seeded fold assignment; ties keep the first (alpha ascending,
    lambda descending) combination. The chosen pair is refit on all subjects.
    """
    if not cohort.standardized:
        raise CastError("propensity fits require a standardized cohort")
    X = cohort.X
    y = cohort.treatment.astype(float)
    if y.min() == y.max():
        raise SingleClass("all subjects share one treatment value")
    alphas = tuple(alpha_grid) if alpha_grid is not None else DEFAULT_ALPHA_GRID
    if any(not 0.01 <= a <= 0.99 for a in alphas):
        raise CastError("alpha grid entries must lie in [0.01, 0.99]")
    folds = min(folds, int(y.sum()), int((1 - y).sum()))
    if folds < 2:
        raise SingleClass("too few subjects per class for cross-validation")

    fold_of = _stratified_folds(y, folds, seed)
    Z = np.column_stack([np.ones(cohort.n), X])
    fold_cache = []
    for k in range(folds):
        tr = fold_of != k
        Ztr = Z[tr]
        fold_cache.append((Ztr, Ztr.T @ Ztr / tr.sum(), y[tr], Z[~tr], y[~tr]))

    cv_table = []
    best = None  # (loss, alpha, lambda)
    for alpha in alphas:
        lambdas = (np.asarray(sorted(lambda_grid, reverse=True), dtype=float)
                   if lambda_grid is not None else _lambda_path(X, y, alpha, n_lambda))
        dev = np.zeros(len(lambdas))
        for Ztr, gram, ytr, Zte, yte in fold_cache:
            w = np.zeros(X.shape[1] + 1)  # fresh start per fold, warm along the path
            for li, lam in enumerate(lambdas):
                w, _ = _fit_gram(Ztr, gram, ytr, alpha, lam, w, tol, max_sweeps)
                dev[li] += _deviance(Zte @ w, yte)
        dev /= folds
        for li, lam in enumerate(lambdas):
            cv_table.append((float(alpha), float(lam), float(dev[li])))
            if best is None or dev[li] < best[0]:
                best = (float(dev[li]), float(alpha), float(lam))

    cv_loss, alpha_star, lam_star = best
    b0, b, sweeps = _cd_fit(X, y, alpha_star, lam_star, tol=tol, max_sweeps=max_sweeps)
    return PropensityModel(intercept=float(b0), coefficients=b, alpha=alpha_star,
                           lambda_=lam_star, cv_folds=folds, cv_loss=cv_loss,
                           n_sweeps=sweeps, cv_table=cv_table)


def fit_at(cohort, alpha: float, lambda_: float, tol: float = 1e-7,
           max_sweeps: int = 100_000) -> PropensityModel:
    """Single elastic-net fit at fixed hyperparameters (no cross-validation)."""
    if not cohort.standardized:
        raise CastError("propensity fits require a standardized cohort")
    y = cohort.treatment.astype(float)
    if y.min() == y.max():
        raise SingleClass("all subjects share one treatment value")
    b0, b, sweeps = _cd_fit(cohort.X, y, alpha, lambda_, tol=tol, max_sweeps=max_sweeps)
    return PropensityModel(intercept=float(b0), coefficients=b, alpha=alpha,
                           lambda_=lambda_, cv_folds=0, cv_loss=np.nan, n_sweeps=sweeps)


def predict_scores(model: PropensityModel, cohort) -> np.ndarray:
    if cohort.p != len(model.coefficients):
        raise DimensionMismatch(
            f"model has {len(model.coefficients)} coefficients, cohort has {cohort.p} columns")
    eta = model.intercept + cohort.X @ model.coefficients
    scores = _sigmoid(eta)
    return np.clip(scores, 1e-15, 1.0 - 1e-15)


def trim(cohort, scores, lower: float = DEFAULT_TRIM[0],
         upper: float = DEFAULT_TRIM[1]) -> TrimResult:
    """Keep subjects with lower <= score <= upper (closed interval)."""
    scores = np.asarray(scores)
    if len(scores) != cohort.n:
        raise DimensionMismatch("scores are not aligned with the cohort")
    keep = (scores >= lower) & (scores <= upper)
    if not keep.any():
        raise EmptyAfterTrim(f"no subject has a score inside [{lower}, {upper}]")
    kept_index = np.nonzero(keep)[0]
    return TrimResult(
        kept_ids=[cohort.ids[i] for i in kept_index],
        trimmed_ids=[cohort.ids[i] for i in np.nonzero(~keep)[0]],
        lower=lower, upper=upper, kept_index=kept_index,
    )


@dataclass
class CorrelationReport:
    labels: list
    method: str
    matrix: np.ndarray
    pvalues: np.ndarray
    significant: np.ndarray
    alpha: float
    adjusted_alpha: float
    na_columns: list


def correlation_diagnostics(matrix, method: str = "pearson", alpha: float = 0.05,
                            labels=None) -> CorrelationReport:
    """Pairwise correlation matrix with Bonferroni-corrected significance.

    Constant columns yield NA (NaN) entries rather than an error. The
    Bonferroni correction divides by the number of distinct pairs.
    """
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.shape[0] < 3 or M.shape[1] < 2:
        raise CastError("need at least 3 rows and 2 columns")
    n, p = M.shape
    labels = list(labels) if labels is not None else [f"c{j}" for j in range(p)]
    if method not in ("pearson", "spearman"):
        raise CastError(f"unknown method {method!r}")

    sds = M.std(axis=0)
    na_cols = [labels[j] for j in range(p) if sds[j] < 1e-12]
    corr = np.eye(p)
    pval = np.zeros((p, p))
    data = M if method == "pearson" else stats.rankdata(M, axis=0)
    for i in range(p):
        for j in range(i + 1, p):
            if sds[i] < 1e-12 or sds[j] < 1e-12:
                r, pv = np.nan, np.nan
            else:
                r, pv = stats.pearsonr(data[:, i], data[:, j])
            corr[i, j] = corr[j, i] = r
            pval[i, j] = pval[j, i] = pv
    n_pairs = p * (p - 1) // 2
    adjusted = alpha / n_pairs
    with np.errstate(invalid="ignore"):
        significant = pval < adjusted
    np.fill_diagonal(significant, False)
    return CorrelationReport(labels=labels, method=method, matrix=corr,
                             pvalues=pval, significant=significant, alpha=alpha,
                             adjusted_alpha=adjusted, na_columns=na_cols)


def overlap_densities(scores, treatment, n_grid: int = 512):
    """Per-arm kernel density of propensity scores for the overlap plot export.

    Returns {arm: (grid, density)}; each density integrates to 1 within 1e-3
    on its grid (trapezoid rule).
    """
    scores = np.asarray(scores, dtype=float)
    treatment = np.asarray(treatment)
    out = {}
    for arm in (0, 1):
        s = scores[treatment == arm]
        if len(s) < 2 or s.std() < 1e-12:
            raise CastError(f"arm {arm} has too little score spread for a density")
        kde = stats.gaussian_kde(s)
        bw = kde.factor * s.std(ddof=1)
        grid = np.linspace(s.min() - 6 * bw, s.max() + 6 * bw, n_grid)
        out[arm] = (grid, kde(grid))
    return out
