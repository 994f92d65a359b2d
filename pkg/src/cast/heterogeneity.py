"""Monte-Carlo SHAP attributions for effect predictors, plus driver analysis.

SHAP values are estimated by sampling feature permutations: walking a
permutation from a background row toward the subject and recording each
feature's marginal change in the prediction. Permutations are drawn in
antithetic pairs (a permutation and its reverse share one background row),
which cancels first-order sampling noise; background rows are consumed in
shuffled whole cycles, so after any full cycle the per-iteration telescoping
sums average to the exact baseline gap. Raw averages are then renormalized
so each subject's attributions sum exactly to its prediction minus the
baseline (the mean background prediction): the residual is spread over
features proportionally to absolute raw attribution, which preserves
rankings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CastError, NonFiniteModelOutput
from .propensity import CorrelationReport, correlation_diagnostics

CHECK_EVERY = 100


@dataclass
class ShapMatrix:
    values: np.ndarray        # (n_subjects, n_features)
    baseline: float           # mean model prediction over the background set
    iterations_used: int
    converged: bool
    raw_residual_max: float   # largest |sum(raw) - (pred - baseline)| before fixing


def _evaluate(predict, X) -> np.ndarray:
    # copy: a predictor may return a view into its input, which the
    # permutation walk mutates in place
    out = np.array(predict(X), dtype=float, copy=True)
    if out.shape != (len(X),):
        raise CastError("predict must map an (n, p) matrix to n values")
    if not np.all(np.isfinite(out)):
        raise NonFiniteModelOutput("model returned a non-finite prediction")
    return out


def shap_monte_carlo(predict, X, background, iterations: int = 1000,
                     epsilon: float = 0.01, seed: int = 0) -> ShapMatrix:
    """Per-subject, per-feature attributions of ``predict`` relative to baseline.

    Convergence: every 100 iterations the running means are compared against
    the previous checkpoint; the run stops early once the largest change
    falls below ``epsilon``. After normalization each row of ``values`` sums
    to prediction minus baseline exactly (up to float rounding).
    """
    X = np.asarray(X, dtype=float)
    background = np.asarray(background, dtype=float)
    if background.ndim != 2 or len(background) == 0:
        raise CastError("background must be a non-empty matrix")
    if X.ndim != 2 or X.shape[1] != background.shape[1]:
        raise CastError("X and background must share the feature dimension")
    n, p = X.shape

    rng = np.random.default_rng([seed, 0x5A9])
    baseline = float(_evaluate(predict, background).mean())
    pred = _evaluate(predict, X)

    contrib = np.zeros((n, p))
    snapshot = np.zeros((n, p))
    converged = False
    done = 0
    perm = None
    b_row = None
    m = len(background)
    order = rng.permutation(m)
    for t in range(iterations):
        if t % 2 == 0:
            pair = t // 2
            if pair % m == 0 and pair > 0:
                order = rng.permutation(m)
            perm = rng.permutation(p)
            b_row = background[order[pair % m]]
        else:
            perm = perm[::-1]
        z = np.tile(b_row, (n, 1))
        prev = _evaluate(predict, z)
        for j in perm:
            z[:, j] = X[:, j]
            cur = _evaluate(predict, z)
            contrib[:, j] += cur - prev
            prev = cur
        done = t + 1
        if done % CHECK_EVERY == 0:
            running = contrib / done
            if np.max(np.abs(running - snapshot)) < epsilon:
                converged = True
                break
            snapshot = running

    raw = contrib / done
    residual = (pred - baseline) - raw.sum(axis=1)
    weight_mass = np.abs(raw).sum(axis=1)
    values = raw.copy()
    spread = np.empty_like(raw)
    has_mass = weight_mass > 0
    spread[has_mass] = np.abs(raw[has_mass]) / weight_mass[has_mass, None]
    spread[~has_mass] = 1.0 / p
    values += residual[:, None] * spread
    return ShapMatrix(values=values, baseline=baseline, iterations_used=done,
                      converged=converged,
                      raw_residual_max=float(np.abs(residual).max()))


def effect_correlations(covariates, feature_names, shap: ShapMatrix,
                        cate) -> tuple[CorrelationReport, CorrelationReport]:
    """Pearson and Spearman correlations over (covariates | SHAP | effect)."""
    covariates = np.asarray(covariates, dtype=float)
    cate = np.asarray(cate, dtype=float)
    if not (len(covariates) == len(shap.values) == len(cate)):
        raise CastError("covariates, SHAP values, and effects must align")
    if covariates.shape[1] != len(feature_names):
        raise CastError("feature names must match the covariate columns")
    block = np.column_stack([covariates, shap.values, cate])
    labels = [*feature_names, *(f"shap_{name}" for name in feature_names), "cate"]
    pearson = correlation_diagnostics(block, "pearson", labels=labels)
    spearman = correlation_diagnostics(block, "spearman", labels=labels)
    return pearson, spearman
