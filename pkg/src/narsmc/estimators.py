"""Average-causal-effect estimators and pooling rules.

Point estimation is g-computation (or plain outcome regression for the
identity-link, no-interaction case). Variances come from bootstrap (per
imputed dataset), or for stacked imputations from a within-stack bootstrap
plus a leave-one-imputation-out jackknife, pooled by Rubin's or the stacked
(Beesley) rule.

Bootstrap and jackknife refits are expressed as count-weighted fits on a
fixed design matrix, so B replicates cost a handful of batched BLAS calls
instead of B separate fits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from scipy.stats import t as t_dist

from . import glm
from .data import DataError, Dataset, Family, ModelFormula, build_design
from .smcstack import StackedImputation

__all__ = [
    "AceEstimate",
    "gcomputation",
    "outcome_regression_ace",
    "bootstrap_se",
    "gcomp_bootstrap_variance",
    "rubin_pool",
    "beesley_pool",
    "jackknife_between_variance",
    "stack_within_variance",
    "stack_outcome_regression",
]

Z95 = 1.96  # normal-approximation intervals use the conventional 1.96 exactly


@dataclass(frozen=True)
class AceEstimate:
    """Point estimate, standard error, and 95% confidence interval."""

    point: float
    se: float
    ci_low: float
    ci_high: float

    def covers(self, true_value: float) -> bool:
        return self.ci_low <= true_value <= self.ci_high


# -- shared fitting plumbing ------------------------------------------------------


def _parts(data):
    """(columns index, values, exposure, response-agnostic weights) for Dataset or stack."""
    if isinstance(data, StackedImputation):
        return data.index, data.values, data.exposure_name, data.weights
    if isinstance(data, Dataset):
        return data._index, data.values, data.exposure_name, None
    raise TypeError(f"expected Dataset or StackedImputation, got {type(data).__name__}")


def _fit_arrays(formula, index, values, weights):
    X = build_design(formula, index, values)
    y = values[:, index[formula.response]]
    if np.isnan(y).any():
        raise DataError(f"response {formula.response!r} has missing values")
    if formula.family is Family.GAUSSIAN:
        beta, cov, sigma2, _ = glm._ols_core(X, y, weights)
    else:
        beta, cov_info, _ = glm._irls_core(X, y, weights)
        cov, sigma2 = cov_info, 1.0
    return beta, cov, sigma2


def _exposure_designs(formula, index, values, exposure):
    """Design matrices with the exposure column forced to 1 and to 0."""
    j = index[exposure]
    mod = values.copy()
    mod[:, j] = 1.0
    X1 = build_design(formula, index, mod)
    mod[:, j] = 0.0
    X0 = build_design(formula, index, mod)
    return X1, X0


def _ace_from_beta(X1, X0, beta, family, weights=None):
    if family is Family.GAUSSIAN:
        diff = (X1 - X0) @ beta
    else:
        diff = expit(X1 @ beta) - expit(X0 @ beta)
    if weights is None:
        return float(diff.mean())
    return float(np.sum(weights * diff) / np.sum(weights))


# -- point estimators ----------------------------------------------------------------


def gcomputation(data, substantive_formula: ModelFormula, weights=None) -> float:
    """Standardized mean (or risk) difference: fit the substantive model,
    predict every record under exposure 1 and 0, and difference the
    (weighted) prediction means. Accepts a Dataset or a weighted stack."""
    index, values, exposure, default_w = _parts(data)
    w = default_w if weights is None else np.asarray(weights, float)
    beta, _, _ = _fit_arrays(substantive_formula, index, values, w)
    X1, X0 = _exposure_designs(substantive_formula, index, values, exposure)
    return _ace_from_beta(X1, X0, beta, substantive_formula.family, w)


def outcome_regression_ace(data: Dataset, formula: ModelFormula) -> tuple[float, float]:
    """Exposure coefficient and its model-based SE from a linear outcome
    regression; valid only without exposure interactions on the identity link."""
    if formula.family is not Family.GAUSSIAN:
        raise DataError("outcome regression ACE requires a gaussian-identity model")
    exposure = data.exposure_name
    if any(exposure in pair for pair in formula.interaction_terms):
        raise DataError(
            "outcome regression is not an ACE with exposure interactions; "
            "use g-computation"
        )
    res = glm.fit(formula, data)
    j = 1 + formula.main_terms.index(exposure)
    return float(res.coef[j]), float(np.sqrt(res.covariance[j, j]))


# -- bootstrap -------------------------------------------------------------------------


def bootstrap_se(data: Dataset, estimator, n_boot: int, rng) -> float:
    """SD of `estimator` over `n_boot` with-replacement resamples of rows.

    Estimator failures trigger a fresh resample, up to 10 * n_boot attempts.
    Applies to single datasets; stacked variances go through
    :func:`stack_within_variance`.
    """
    if n_boot < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    n = data.n_rows
    points = np.empty(n_boot)
    attempts = 0
    got = 0
    while got < n_boot:
        if attempts >= 10 * n_boot:
            raise RuntimeError(
                f"bootstrap exceeded {10 * n_boot} attempts; estimator keeps failing"
            )
        attempts += 1
        idx = rng.integers(0, n, n)
        sample = Dataset(data.columns, data.values[idx].copy(), data.mask[idx].copy())
        try:
            points[got] = estimator(sample)
        except (glm.FitError, DataError, np.linalg.LinAlgError):
            continue
        got += 1
    return float(points.std(ddof=1))


def _batched_weighted_aces(formula, X, X1, X0, y, weight_mat, beta0=None):
    """ACE per batch row of `weight_mat`, refitting under each weight vector.

    Returns (aces, ok); `ok` is False where the refit failed (singular or
    non-converged member).
    """
    B = weight_mat.shape[0]
    Xb = np.broadcast_to(X, (B,) + X.shape)
    if formula.family is Family.GAUSSIAN:
        try:
            beta, _, _, _ = glm.wols_batch(Xb, y, weight_mat)
            ok = np.ones(B, dtype=bool)
        except np.linalg.LinAlgError:
            beta = np.zeros((B, X.shape[1]))
            ok = np.zeros(B, dtype=bool)
            for b in range(B):
                try:
                    beta[b], _, _, _ = glm.wols_batch(X[None], y[None], weight_mat[b][None])[0], None, None, None
                    ok[b] = True
                except np.linalg.LinAlgError:
                    pass
    else:
        beta, ok, _, _ = glm.wirls_batch(Xb, y, weight_mat, beta0=beta0)
    if formula.family is Family.GAUSSIAN:
        diff = (X1 - X0) @ beta.T  # (n, B)
    else:
        diff = expit(X1 @ beta.T) - expit(X0 @ beta.T)
    aces = np.einsum("bn,nb->b", weight_mat, diff) / weight_mat.sum(axis=1)
    return aces, ok


def gcomp_bootstrap_variance(data: Dataset, formula: ModelFormula, n_boot: int, rng) -> float:
    """Bootstrap variance of the g-computation ACE on one complete dataset.

    Same resampling scheme as :func:`bootstrap_se` with the g-computation
    estimator, implemented as count-weighted batched refits.
    """
    if n_boot < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    index, values, exposure, _ = _parts(data)
    n = data.n_rows
    X = build_design(formula, index, values)
    y = values[:, index[formula.response]]
    X1, X0 = _exposure_designs(formula, index, values, exposure)
    beta0 = None
    if formula.family is Family.BERNOULLI:
        beta0, _, _ = _fit_arrays(formula, index, values, None)

    counts = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(float)
    aces = np.empty(n_boot)
    filled = np.zeros(n_boot, dtype=bool)
    attempts = 0
    while not filled.all():
        if attempts >= 10:
            raise RuntimeError("bootstrap refits keep failing; data too fragile")
        attempts += 1
        todo = np.flatnonzero(~filled)
        got, ok = _batched_weighted_aces(formula, X, X1, X0, y, counts[todo], beta0)
        aces[todo[ok]] = got[ok]
        filled[todo[ok]] = True
        bad = todo[~ok]
        if bad.size:
            counts[bad] = rng.multinomial(n, np.full(n, 1.0 / n), size=bad.size).astype(float)
    return float(aces.var(ddof=1))


# -- pooling rules -----------------------------------------------------------------------


def rubin_pool(points, variances) -> AceEstimate:
    """Rubin's rules: T = W + (1 + 1/M) B with the classical t df."""
    points = np.asarray(points, float)
    variances = np.asarray(variances, float)
    m = points.size
    if m < 2:
        raise ValueError("Rubin pooling needs at least 2 imputations")
    if (variances < 0).any():
        raise ValueError("variances must be nonnegative")
    qbar = points.mean()
    wbar = variances.mean()
    b = points.var(ddof=1)
    total = wbar + (1.0 + 1.0 / m) * b
    se = float(np.sqrt(total))
    if b > 0:
        df = (m - 1) * (1.0 + wbar / ((1.0 + 1.0 / m) * b)) ** 2
        q = float(t_dist.ppf(0.975, df))
    else:
        q = float(t_dist.ppf(0.975, np.inf))
    return AceEstimate(float(qbar), se, float(qbar - q * se), float(qbar + q * se))


def beesley_pool(point: float, var_stack: float, var_between: float, m: int) -> AceEstimate:
    """Stacked-imputation variance: M * Var_stack + (M + 1) * Var_between."""
    if m < 2:
        raise ValueError("stacked pooling needs at least 2 imputations")
    if var_stack < 0 or var_between < 0:
        raise ValueError("variance components must be nonnegative")
    var = m * var_stack + (m + 1) * var_between
    se = float(np.sqrt(var))
    return AceEstimate(float(point), se, point - Z95 * se, point + Z95 * se)


# -- stacked variance components -------------------------------------------------------------


def _dropped_imputation_weights(stack: StackedImputation, drop: int) -> np.ndarray:
    """Flat weights with imputation `drop` zeroed and each individual's
    remaining weights renormalized to sum to 1."""
    w = stack.weights_matrix().copy()
    denom = 1.0 - w[drop]
    if np.any(denom <= 0):
        raise ValueError("an individual carries all weight in the dropped imputation")
    w = w / denom
    w[drop] = 0.0
    return w.reshape(-1)


def jackknife_between_variance(stack: StackedImputation, substantive_formula, estimator=None) -> float:
    """Leave-one-imputation-out jackknife of the weighted stack estimate.

    Drops each imputation in turn, renormalizes every individual's remaining
    weights to sum to 1, recomputes the estimate, and returns
    ((M-1)/M) * sum((est_-m - mean)^2).
    """
    m = stack.m_imputations
    if m < 2:
        raise ValueError("jackknife needs at least 2 imputations")
    if estimator is None:
        index = stack.index
        X = build_design(substantive_formula, index, stack.values)
        y = stack.values[:, index[substantive_formula.response]]
        X1, X0 = _exposure_designs(substantive_formula, index, stack.values, stack.exposure_name)
        beta0 = None
        if substantive_formula.family is Family.BERNOULLI:
            beta0, _, _ = _fit_arrays(substantive_formula, index, stack.values, stack.weights)
        weight_mat = np.stack([_dropped_imputation_weights(stack, d) for d in range(m)])
        aces, ok = _batched_weighted_aces(substantive_formula, X, X1, X0, y, weight_mat, beta0)
        if not ok.all():
            raise glm.FitError("jackknife refit failed for a dropped imputation")
    else:
        aces = np.empty(m)
        for d in range(m):
            aces[d] = estimator(_drop_imputation(stack, d))
    return float((m - 1) / m * np.sum((aces - aces.mean()) ** 2))


def _drop_imputation(stack: StackedImputation, drop: int) -> StackedImputation:
    keep = stack.imputation != drop
    w = _dropped_imputation_weights(stack, drop)
    return replace(
        stack,
        values=stack.values[keep].copy(),
        individual=stack.individual[keep].copy(),
        imputation=stack.imputation[keep].copy(),
        weights=w[keep].copy(),
    )


def stack_within_variance(
    stack: StackedImputation,
    substantive_formula: ModelFormula,
    n_boot: int | None = None,
    rng=None,
    unit: str = "individual",
    counts=None,
) -> float:
    """Bootstrap variance of the weighted g-computation ACE on the stack.

    `unit` controls the resampling block: "individual" moves all M rows of a
    sampled individual together with weights unchanged; "record" resamples
    the M*n stacked records independently. Pass `counts` (resamples x units)
    to evaluate an explicit set of resamples instead of drawing them.
    """
    if unit not in ("individual", "record"):
        raise ValueError("unit must be 'individual' or 'record'")
    n_units = stack.n_individuals if unit == "individual" else stack.values.shape[0]
    if counts is None:
        if n_boot is None or n_boot < 2:
            raise ValueError("need at least 2 bootstrap resamples")
        counts = rng.multinomial(n_units, np.full(n_units, 1.0 / n_units), size=n_boot).astype(float)
    else:
        counts = np.asarray(counts, float)
        if counts.shape[1] != n_units:
            raise ValueError(f"counts must have {n_units} columns for unit={unit!r}")
    if unit == "individual":
        weight_mat = counts[:, stack.individual] * stack.weights
    else:
        weight_mat = counts * stack.weights

    index = stack.index
    X = build_design(substantive_formula, index, stack.values)
    y = stack.values[:, index[substantive_formula.response]]
    X1, X0 = _exposure_designs(substantive_formula, index, stack.values, stack.exposure_name)
    beta0 = None
    if substantive_formula.family is Family.BERNOULLI:
        beta0, _, _ = _fit_arrays(substantive_formula, index, stack.values, stack.weights)

    aces = np.empty(weight_mat.shape[0])
    filled = np.zeros(weight_mat.shape[0], dtype=bool)
    attempts = 0
    while not filled.all():
        if attempts >= 10:
            raise RuntimeError("stack bootstrap refits keep failing")
        attempts += 1
        todo = np.flatnonzero(~filled)
        got, ok = _batched_weighted_aces(substantive_formula, X, X1, X0, y, weight_mat[todo], beta0)
        aces[todo[ok]] = got[ok]
        filled[todo[ok]] = True
        bad = todo[~ok]
        if bad.size:
            if counts.shape[0] == weight_mat.shape[0] and rng is not None:
                re = rng.multinomial(n_units, np.full(n_units, 1.0 / n_units), size=bad.size).astype(float)
                if unit == "individual":
                    weight_mat[bad] = re[:, stack.individual] * stack.weights
                else:
                    weight_mat[bad] = re * stack.weights
            else:
                raise glm.FitError("stack refit failed on an explicit resample")
    return float(aces.var(ddof=1))


def stack_outcome_regression(stack: StackedImputation, formula: ModelFormula) -> tuple[float, float]:
    """Exposure coefficient from the weighted stacked regression and its
    naive model-based variance.

    The variance is computed with weights rescaled to mean 1 (total weight
    M*n), the convention under which the naive stacked variance approximates
    (average within-imputation variance) / M and the stacked pooling rule's
    M * Var_stack recovers the within-imputation component.
    """
    if formula.family is not Family.GAUSSIAN:
        raise DataError("stacked outcome regression requires a gaussian-identity model")
    exposure = stack.exposure_name
    if any(exposure in pair for pair in formula.interaction_terms):
        raise DataError("stacked outcome regression disallows exposure interactions")
    index = stack.index
    X = build_design(formula, index, stack.values)
    y = stack.values[:, index[formula.response]]
    w = stack.weights * stack.m_imputations  # mean-1 scaling
    beta, cov, _, _ = glm._ols_core(X, y, w)
    j = 1 + formula.main_terms.index(exposure)
    return float(beta[j]), float(cov[j, j])
