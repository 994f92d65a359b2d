"""Per-horizon doubly-robust effect estimation with honest regression forests.

The per-horizon estimator forms IPCW-AIPW pseudo-outcomes

    Gamma_i = m1(x_i) - m0(x_i)
              + (W_i - e_i) / (e_i (1 - e_i)) * (Y_i(h) - m_{W_i}(x_i))
                * O_i / Kc(min(T_i, h)- | W_i)

where Y_i(h) is the horizon outcome (survival indicator or restricted time),
O_i marks subjects observable at h (event seen, or followed past h), Kc is
the arm-conditional censoring survival, and m_w are cross-fitted outcome
regressions. The average effect is the mean pseudo-outcome over valid
subjects (subjects whose censoring weight sits below the floor are excluded
and counted); its SE is the pseudo-outcome SD over sqrt(n). Conditional
effects come from an honest regression forest trained on the pseudo-outcomes,
with bootstrap-of-little-bags variance over tree groups.

Trees are honest: each tree draws a subsample without replacement, splits it
into a structure half (chooses splits by weighted variance reduction) and an
estimation half (populates leaf means). A split is admissible only when both
children keep at least ``min_node`` subjects of each half, so every leaf's
estimation count meets the node-size bound. Everything is deterministic given
(seed, tree index); thread counts never change results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CastError, DegenerateArm, DimensionMismatch, NoValidSubjects, TooSmall
from .survival import censoring_survival

SP = "sp"
RMST = "rmst"
ESTIMANDS = (SP, RMST)


@dataclass
class HorizonSpec:
    horizons: tuple = tuple(float(h) for h in range(12, 121, 12))
    estimand: str = SP

    def __post_init__(self):
        hs = tuple(float(h) for h in self.horizons)
        if any(h <= 0 for h in hs) or any(b <= a for a, b in zip(hs, hs[1:])):
            raise TooSmall("horizons must be strictly increasing positive reals")
        if self.estimand not in ESTIMANDS:
            raise TooSmall(f"estimand must be one of {ESTIMANDS}")
        self.horizons = hs


@dataclass
class ForestConfig:
    n_trees: int = 5000
    honesty_fraction: float = 0.5
    subsample_fraction: float = 0.5
    min_node: int = 15
    seed: int = 0
    group_size: int = 10          # trees per little bag for the variance estimate
    tune: bool = False
    tune_trees: int = 100
    tune_min_node: tuple = (5, 15, 30)
    tune_subsample: tuple = (0.4, 0.5)
    threads: int = 1


@dataclass
class PseudoConfig:
    nuisance_trees: int = 500
    nuisance_min_node: int = 15
    folds: int = 2
    censor_floor: float = 0.05
    score_bounds: tuple = (0.10, 0.90)
    seed: int = 0
    threads: int = 1


@dataclass
class Tree:
    feature: np.ndarray    # split feature per node, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # estimation-half mean per node
    in_sample: np.ndarray | None = None  # subsample membership, for OOB tuning


@dataclass
class CausalForestModel:
    trees: list
    n_features: int
    config: ForestConfig

    @property
    def n_trees(self) -> int:
        return len(self.trees)


@dataclass
class PseudoOutcomeSet:
    horizon: float
    estimand: str
    gamma: np.ndarray
    valid: np.ndarray
    observable: np.ndarray
    censor_weight: np.ndarray   # Kc(min(T,h)- | W), before flooring
    scores: np.ndarray
    m0: np.ndarray
    m1: np.ndarray

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def ate(self) -> float:
        if self.n_valid == 0:
            raise NoValidSubjects("no valid pseudo-outcomes")
        return float(self.gamma[self.valid].mean())

    def ate_se(self) -> float:
        g = self.gamma[self.valid]
        if len(g) < 2:
            return float("nan")
        return float(g.std(ddof=1) / math.sqrt(len(g)))


@dataclass
class HorizonEstimate:
    horizon: float
    estimand: str
    ate: float
    ate_se: float
    cate: np.ndarray | None
    cate_var: np.ndarray | None
    n_valid: int
    diagnostics: dict = field(default_factory=dict)


# --- tree growing ----------------------------------------------------------

def _grow_tree(X, y, w, s_idx, e_idx, min_node):
    feature, threshold, left, right, value = [], [], [], [], []

    def leaf_value(e):
        ys = y[e]
        if np.ptp(ys) == 0.0:
            return float(ys[0])
        return float(np.average(ys, weights=w[e]))

    def recurse(s, e):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(e))
        ys = y[s]
        n_s = len(s)
        if n_s < 2 * min_node or len(e) < 2 * min_node or np.ptp(ys) == 0.0:
            return node
        ws = w[s]
        s_tot = float((ws * ys).sum())
        w_tot = float(ws.sum())
        base = s_tot * s_tot / w_tot
        best = None  # (gain, feature, threshold)
        for j in range(X.shape[1]):
            xs = X[s, j]
            order = np.argsort(xs, kind="stable")
            xo = xs[order]
            if xo[0] == xo[-1]:
                continue
            wy = (ws * ys)[order]
            wo = ws[order]
            cum_wy = np.cumsum(wy)[:-1]
            cum_w = np.cumsum(wo)[:-1]
            n_left = np.arange(1, n_s)
            valid = xo[1:] != xo[:-1]
            valid &= (n_left >= min_node) & (n_s - n_left >= min_node)
            if not valid.any():
                continue
            thr = 0.5 * (xo[1:] + xo[:-1])
            e_sorted = np.sort(X[e, j])
            n_e_left = np.searchsorted(e_sorted, thr, side="right")
            valid &= (n_e_left >= min_node) & (len(e) - n_e_left >= min_node)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gains = np.where(
                    valid,
                    cum_wy ** 2 / cum_w + (s_tot - cum_wy) ** 2 / (w_tot - cum_w),
                    -np.inf,
                )
            k = int(np.argmax(gains))
            gain = gains[k] - base
            if gain > 1e-12 * (1.0 + abs(base)) and (best is None or gain > best[0]):
                best = (gain, j, float(thr[k]))
        if best is None:
            return node
        _, j, thr_j = best
        feature[node] = j
        threshold[node] = thr_j
        s_go = X[s, j] <= thr_j
        e_go = X[e, j] <= thr_j
        left[node] = recurse(s[s_go], e[e_go])
        right[node] = recurse(s[~s_go], e[~e_go])
        return node

    recurse(np.asarray(s_idx), np.asarray(e_idx))
    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value),
    )


def _tree_predict(tree: Tree, X) -> np.ndarray:
    idx = np.zeros(len(X), dtype=np.int64)
    f = tree.feature[idx]
    while (f >= 0).any():
        active = np.nonzero(f >= 0)[0]
        sel = idx[active]
        go_left = X[active, f[active]] <= tree.threshold[sel]
        idx[active] = np.where(go_left, tree.left[sel], tree.right[sel])
        f = tree.feature[idx]
    return tree.value[idx]


def _build_one(args):
    X, y, w, n, config, tree_idx, record_oob = args
    rng = np.random.default_rng([config.seed, 0x7E3, tree_idx])
    m = max(2, int(math.floor(n * config.subsample_fraction)))
    sub = rng.choice(n, size=m, replace=False)
    n_struct = int(round(m * config.honesty_fraction))
    n_struct = min(max(n_struct, 1), m - 1)
    tree = _grow_tree(X, y, w, sub[:n_struct], sub[n_struct:], config.min_node)
    if record_oob:
        mask = np.zeros(n, dtype=bool)
        mask[sub] = True
        tree.in_sample = mask
    return tree


def fit_forest(gamma, X, config: ForestConfig, sample_weight=None,
               record_oob: bool = False) -> CausalForestModel:
    """Honest regression forest on pseudo-outcomes (or any target).

    Deterministic given (config.seed, tree index); tree fitting may run on a
    thread pool but trees are assembled in index order, so results do not
    depend on ``config.threads``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(gamma, dtype=float)
    n = len(y)
    if X.shape[0] != n:
        raise DimensionMismatch("gamma and X row counts differ")
    if n < 4 * config.min_node:
        raise TooSmall(f"need at least {4 * config.min_node} subjects, have {n}")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    jobs = [(X, y, w, n, config, b, record_oob) for b in range(config.n_trees)]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            trees = list(pool.map(_build_one, jobs, chunksize=16))
    else:
        trees = [_build_one(job) for job in jobs]
    return CausalForestModel(trees=trees, n_features=X.shape[1], config=config)


def predict_cate(model: CausalForestModel, X) -> tuple:
    """Forest mean prediction and bootstrap-of-little-bags variance.

    Trees are grouped into bags of ``group_size`` (consecutive tree indices);
    the variance of a prediction is the sample variance of bag means divided
    by the number of bags. Reductions run in fixed tree order.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"expected {model.n_features} features, got {X.shape[1] if X.ndim == 2 else 'non-matrix'}")
    B = model.n_trees
    n = len(X)
    if B >= 2 * model.config.group_size:
        n_bags = B // model.config.group_size
    else:
        n_bags = 2 if B >= 2 else 1
    bags = np.array_split(np.arange(B), n_bags)
    bag_means = np.zeros((len(bags), n))
    total = np.zeros(n)
    for g, members in enumerate(bags):
        acc = np.zeros(n)
        for b in members:
            acc += _tree_predict(model.trees[b], X)
        total += acc
        bag_means[g] = acc / len(members)
    cate = total / B
    if len(bags) >= 2:
        cate_var = bag_means.var(axis=0, ddof=1) / len(bags)
    else:
        cate_var = np.zeros(n)
    return cate, np.maximum(cate_var, 0.0)


def _node_depths(tree: Tree) -> np.ndarray:
    depths = np.zeros(len(tree.feature), dtype=int)
    for node in range(len(tree.feature)):
        for child in (tree.left[node], tree.right[node]):
            if child >= 0:
                depths[child] = depths[node] + 1
    return depths


def split_frequencies(model: CausalForestModel, max_depth: int | None = 4) -> np.ndarray:
    """Fraction of split nodes using each feature (split-frequency importance).

    Counting only splits above ``max_depth`` avoids the cardinality bias of
    deep splits, where high-cardinality noise columns soak up weak-signal
    partitions; pass None to count every split.
    """
    counts = np.zeros(model.n_features)
    for tree in model.trees:
        internal = tree.feature >= 0
        if max_depth is not None:
            internal &= _node_depths(tree) < max_depth
        used = tree.feature[internal]
        if len(used):
            counts += np.bincount(used, minlength=model.n_features)
    total = counts.sum()
    return counts / total if total > 0 else counts


def tune_forest(gamma, X, config: ForestConfig, sample_weight=None) -> ForestConfig:
    """Pick (min_node, subsample) by out-of-bag MSE on a reduced forest."""
    y = np.asarray(gamma, dtype=float)
    best = None
    for min_node in config.tune_min_node:
        if len(y) < 4 * min_node:
            continue
        for sub in config.tune_subsample:
            trial = replace(config, n_trees=config.tune_trees, min_node=min_node,
                            subsample_fraction=sub)
            model = fit_forest(y, X, trial, sample_weight=sample_weight, record_oob=True)
            pred_sum = np.zeros(len(y))
            pred_cnt = np.zeros(len(y))
            for tree in model.trees:
                out = ~tree.in_sample
                if out.any():
                    pred_sum[out] += _tree_predict(tree, X[out])
                    pred_cnt[out] += 1
            seen = pred_cnt > 0
            if not seen.any():
                continue
            mse = float(np.mean((pred_sum[seen] / pred_cnt[seen] - y[seen]) ** 2))
            if best is None or mse < best[0]:
                best = (mse, min_node, sub)
    if best is None:
        return config
    return replace(config, min_node=best[1], subsample_fraction=best[2])


# --- pseudo-outcomes -------------------------------------------------------

def _horizon_outcome(cohort, horizon: float, estimand: str) -> np.ndarray:
    if estimand == SP:
        return (cohort.time_months > horizon).astype(float)
    return np.minimum(cohort.time_months, horizon)


def _seed_key(horizon: float, estimand: str) -> list:
    return [int(round(horizon * 1024)), ESTIMANDS.index(estimand)]


def pseudo_outcomes(cohort, scores, horizon: float, estimand: str,
                    censor_curves: dict, config: PseudoConfig,
                    nuisances: tuple | None = None) -> PseudoOutcomeSet:
    """IPCW-AIPW pseudo-outcomes for one horizon and estimand.

    Outcome regressions are per-arm honest forests fit on observable subjects
    with inverse-censoring weights, cross-fitted over ``config.folds`` folds
    so no subject's pseudo-outcome uses nuisances fit on itself. Subjects
    that are observable but carry a censoring weight below the floor are
    excluded from the valid set and reported in the diagnostics.

    ``nuisances`` injects precomputed (m0, m1) vectors in place of the
    cross-fitted regressions (robustness experiments, oracle tests).
    """
    scores = np.asarray(scores, dtype=float)
    n = cohort.n
    if len(scores) != n:
        raise DimensionMismatch("scores not aligned with cohort")
    lo, hi = config.score_bounds
    if scores.min() < lo - 1e-9 or scores.max() > hi + 1e-9:
        raise CastError(
            f"scores must be trimmed to [{lo}, {hi}] before pseudo-outcome construction")
    if horizon <= 0:
        raise NoValidSubjects("horizon must be positive")

    T = cohort.time_months
    W = cohort.treatment
    delta = cohort.event
    y_h = _horizon_outcome(cohort, horizon, estimand)
    observable = (delta == 1) | (T >= horizon)

    kc = np.ones(n)
    for arm, curve in censor_curves.items():
        mask = np.ones(n, dtype=bool) if arm is None else (W == arm)
        u = np.minimum(T[mask], horizon)
        kc[mask] = np.asarray(curve.left_limit(u))

    below_floor = observable & (kc < config.censor_floor)
    valid = ~below_floor
    if not valid.any():
        raise NoValidSubjects(f"every subject fell below the censoring-weight floor at h={horizon}")
    kc_used = np.maximum(kc, config.censor_floor)

    if nuisances is not None:
        m0 = np.asarray(nuisances[0], dtype=float)
        m1 = np.asarray(nuisances[1], dtype=float)
        if m0.shape != (n,) or m1.shape != (n,):
            raise DimensionMismatch("injected nuisances not aligned with cohort")
    else:
        m0, m1 = _cross_fit_outcome_regressions(
            cohort, y_h, observable, kc_used, horizon, estimand, config)

    ipw = (W - scores) / (scores * (1.0 - scores))
    m_own = np.where(W == 1, m1, m0)
    gamma = m1 - m0 + ipw * (y_h - m_own) * observable / kc_used

    if nuisances is None:
        # with forest regressions m_w stays inside the outcome range, giving
        # |Gamma| <= scale * (2 + wmax/floor) after trimming and flooring
        scale = 1.0 if estimand == SP else horizon
        bound = scale * (2.0 + np.abs(ipw).max() / config.censor_floor) + 1e-9
        assert np.all(np.abs(gamma[valid]) <= bound), "pseudo-outcome outside its provable bound"

    return PseudoOutcomeSet(horizon=horizon, estimand=estimand, gamma=gamma,
                            valid=valid, observable=observable, censor_weight=kc,
                            scores=scores, m0=m0, m1=m1)


def _cross_fit_outcome_regressions(cohort, y_h, observable, kc_used,
                                   horizon, estimand, config: PseudoConfig):
    n = cohort.n
    W = cohort.treatment
    X = cohort.X
    rng = np.random.default_rng([config.seed, 0xCF17, *_seed_key(horizon, estimand)])
    fold_of = np.empty(n, dtype=int)
    for arm in (0, 1):
        idx = np.nonzero(W == arm)[0]
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % config.folds

    m0 = np.zeros(n)
    m1 = np.zeros(n)
    for k in range(config.folds):
        predict_mask = fold_of == k
        for arm, target in ((0, m0), (1, m1)):
            train = (fold_of != k) & (W == arm) & observable
            n_train = int(train.sum())
            if n_train < 4 * config.nuisance_min_node:
                raise DegenerateArm(
                    f"arm {arm} has {n_train} observable training subjects at h={horizon}; "
                    f"need {4 * config.nuisance_min_node}")
            fc = ForestConfig(
                n_trees=config.nuisance_trees, min_node=config.nuisance_min_node,
                seed=int(np.random.default_rng(
                    [config.seed, 0xA12, *_seed_key(horizon, estimand), k, arm]
                ).integers(2 ** 31)),
                threads=config.threads,
            )
            model = fit_forest(y_h[train], X[train], fc,
                               sample_weight=1.0 / kc_used[train])
            target[predict_mask] = predict_cate(model, X[predict_mask])[0]
    return m0, m1


def estimate_horizon(cohort, scores, horizon: float, estimand: str,
                     forest_config: ForestConfig, pseudo_config: PseudoConfig,
                     censor_curves: dict | None = None,
                     need_cate: bool = True,
                     keep_model: bool = False) -> HorizonEstimate:
    """Average and conditional effects at one horizon.

    The average effect and its SE come from the pseudo-outcomes alone (the
    AIPW mean identity); the forest only serves the per-subject effects.
    """
    if censor_curves is None:
        censor_curves = censoring_survival(cohort, conditioning="by-treatment")
    pseudo = pseudo_outcomes(cohort, scores, horizon, estimand, censor_curves,
                             pseudo_config)
    ate = pseudo.ate()
    se = pseudo.ate_se()
    diagnostics = {
        "n_below_floor": int((~pseudo.valid).sum()),
        "mean_censor_weight": float(pseudo.censor_weight[pseudo.valid].mean()),
        "n_observable": int(pseudo.observable.sum()),
    }
    cate = cate_var = None
    if need_cate:
        fc = forest_config
        if fc.tune:
            fc = tune_forest(pseudo.gamma[pseudo.valid], cohort.X[pseudo.valid], fc)
        fc = replace(fc, seed=int(np.random.default_rng(
            [forest_config.seed, 0xF05, *_seed_key(horizon, estimand)]).integers(2 ** 31)))
        model = fit_forest(pseudo.gamma[pseudo.valid], cohort.X[pseudo.valid], fc)
        cate, cate_var = predict_cate(model, cohort.X)
        diagnostics["forest_min_node"] = fc.min_node
        diagnostics["forest_subsample"] = fc.subsample_fraction
        diagnostics["forest_trees"] = fc.n_trees
        diagnostics["cate_se_mean"] = float(np.sqrt(cate_var).mean())
        if keep_model:
            diagnostics["forest_model"] = model
    estimate = HorizonEstimate(horizon=horizon, estimand=estimand, ate=ate,
                               ate_se=se, cate=cate, cate_var=cate_var,
                               n_valid=pseudo.n_valid, diagnostics=diagnostics)
    assert estimate.ate == pseudo.gamma[pseudo.valid].mean()
    return estimate
