"""Stacked compatible imputation with delta adjustment (NAR-SMC-stack).

Covariates are imputed by standard FCS *excluding the outcome* (with the
outcome missingness indicator as a predictor whenever the sensitivity
parameters are non-null), the M datasets are stacked, the outcome is imputed
on the stack from a model fitted to fully observed records of the original
data, and each stacked record receives an importance weight: the substantive
outcome density for pattern-III individuals, normalized within individual,
and exactly 1/M for patterns I, II, and IV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from . import glm
from .data import (
    DataError,
    Dataset,
    Family,
    MissingnessPattern,
    ModelFormula,
    Role,
    VariableSpec,
    build_design,
    classify_patterns,
    missingness_indicator_name,
    with_missingness_indicator,
)
from .fcs import (
    DeltaSpec,
    ImputationPlan,
    _impute_univariate_batch,
    _resample_fill_batch,
    _validate_formula_vars,
)

__all__ = [
    "StackedImputation",
    "impute_covariates_stack",
    "build_stack",
    "impute_outcome_on_stack",
    "compute_weights",
    "run_nar_smc_stack",
]


@dataclass(frozen=True)
class StackedImputation:
    """M vertically concatenated imputed datasets in imputation-major order.

    Row ``m * n + i`` is individual `i` in imputation `m`. `pattern` holds the
    per-individual missingness pattern codes of the original dataset; weights
    sum to 1 within each individual.
    """

    columns: tuple[VariableSpec, ...]
    values: np.ndarray  # (M*n, p)
    individual: np.ndarray  # (M*n,)
    imputation: np.ndarray  # (M*n,)
    weights: np.ndarray  # (M*n,)
    pattern: np.ndarray  # (n,) MissingnessPattern codes

    def __post_init__(self):
        for arr in (self.values, self.individual, self.imputation, self.weights, self.pattern):
            arr.setflags(write=False)

    @property
    def n_individuals(self) -> int:
        return self.pattern.size

    @property
    def m_imputations(self) -> int:
        return self.values.shape[0] // self.pattern.size

    @property
    def index(self) -> dict:
        return {c.name: j for j, c in enumerate(self.columns)}

    @property
    def outcome_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.OUTCOME)

    @property
    def exposure_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.EXPOSURE)

    def weights_matrix(self) -> np.ndarray:
        """Weights reshaped to (M, n): column i holds individual i's weights."""
        return self.weights.reshape(self.m_imputations, self.n_individuals)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "m", "weight"] + [c.name for c in self.columns])
            for r in range(self.values.shape[0]):
                writer.writerow(
                    [int(self.individual[r]), int(self.imputation[r]), repr(float(self.weights[r]))]
                    + [repr(float(v)) for v in self.values[r]]
                )


# -- step 1: covariate-only FCS ---------------------------------------------------


def impute_covariates_stack(data: Dataset, plan: ImputationPlan, rng) -> list[Dataset]:
    """Standard FCS over non-outcome targets with the outcome excluded.

    The outcome missingness indicator is available to the univariate models
    under the name ``m_<outcome>``; per-plan delta it must be included in
    every covariate model when delta is non-null and omitted when null. The
    outcome column passes through unmodified (missing cells stay missing).
    """
    outcome = data.outcome_name
    indicator = missingness_indicator_name(outcome)
    uses = []
    for target in plan.targets:
        f = plan.univariate_formulas[target]
        if f.response == outcome or outcome in f.main_terms:
            raise DataError(
                f"covariate model for {target!r} references the outcome; stack "
                "imputation excludes the outcome from step-1 models"
            )
        uses.append(indicator in f.main_terms)
    if plan.delta.is_null and any(uses):
        raise DataError(
            f"{indicator!r} must be omitted from covariate models when delta is null"
        )
    if not plan.delta.is_null and not all(uses):
        raise DataError(
            f"{indicator!r} must be a predictor in every covariate model when "
            "delta is non-null"
        )

    aug = with_missingness_indicator(data, outcome, indicator)
    index = aug._index
    for target in plan.targets:
        if target not in index:
            raise DataError(f"imputation target {target!r} not in dataset")
        _validate_formula_vars(plan.univariate_formulas[target], aug.columns, index)

    m = plan.n_imputations
    rngs = rng.spawn(m)
    working = np.repeat(aug.values[None], m, axis=0)
    mask = aug.mask
    _resample_fill_batch(plan.targets, index, working, mask, aug.values, rngs)
    warm: dict[str, np.ndarray] = {}
    for _ in range(plan.iterations):
        for target in plan.targets:
            warm[target] = _impute_univariate_batch(
                target,
                plan.univariate_formulas[target],
                index,
                working,
                mask,
                rngs,
                beta0=warm.get(target),
                proper=plan.proper_draws,
            )
    y_col = data.index(outcome)
    out_mask = np.zeros_like(data.mask)
    out_mask[:, y_col] = data.mask[:, y_col]
    return [
        Dataset(data.columns, working[c, :, : data.n_cols].copy(), out_mask.copy())
        for c in range(m)
    ]


# -- step 2: stacking ----------------------------------------------------------------


def build_stack(data: Dataset, imputed: Sequence[Dataset]) -> StackedImputation:
    """Stack covariate-imputed copies with uniform 1/M weights."""
    m = len(imputed)
    n = data.n_rows
    values = np.vstack([d.values for d in imputed])
    return StackedImputation(
        columns=data.columns,
        values=values,
        individual=np.tile(np.arange(n), m),
        imputation=np.repeat(np.arange(m), n),
        weights=np.full(m * n, 1.0 / m),
        pattern=classify_patterns(data),
    )


# -- step 3: outcome imputation on the stack ------------------------------------------


def impute_outcome_on_stack(
    stack: StackedImputation,
    outcome_formula: ModelFormula,
    delta: DeltaSpec,
    original: Dataset,
    rng,
) -> tuple[StackedImputation, glm.GlmFit]:
    """Fit the identifiable part once on pattern-I rows of the original data,
    draw its parameters, and draw every stacked missing outcome with the
    delta shift. Returns the completed stack and the pattern-I fit."""
    pattern_one = classify_patterns(original) == MissingnessPattern.I
    k = outcome_formula.n_coefficients
    if pattern_one.sum() < k:
        raise glm.FitError(
            f"too few fully observed (pattern I) rows to fit the outcome model: "
            f"{int(pattern_one.sum())} < {k}"
        )
    outcome_fit = glm.fit(outcome_formula, original, row_filter=pattern_one)
    coef_draw, disp_draw = glm.draw_params(outcome_fit, rng)

    index = stack.index
    j = index[outcome_formula.response]
    missing = np.isnan(stack.values[:, j])
    values = stack.values.copy()
    if missing.any():
        rows = np.flatnonzero(missing)
        X = build_design(outcome_formula, index, values, rows)
        eta = X @ coef_draw
        eta += delta.offset(values[rows, index[stack.exposure_name]])
        if outcome_formula.family is Family.GAUSSIAN:
            values[rows, j] = eta + np.sqrt(disp_draw) * rng.standard_normal(rows.size)
        else:
            values[rows, j] = (rng.random(rows.size) < expit(eta)).astype(float)
    return replace(stack, values=values), outcome_fit


# -- step 4: importance weights ---------------------------------------------------------


def compute_weights(
    stack: StackedImputation,
    outcome_fit: glm.GlmFit,
    coef=None,
    dispersion=None,
) -> StackedImputation:
    """Per-record weights from the importance ratio of each missingness pattern.

    Pattern III: substantive outcome density at the observed outcome given the
    record's (possibly imputed) covariates, normalized within individual in log
    space. Patterns I, II, IV: exactly 1/M. By default densities use the
    pattern-I MLE; pass drawn parameters to weight under a parameter draw.
    """
    beta = outcome_fit.coef if coef is None else np.asarray(coef, float)
    sigma2 = outcome_fit.dispersion if dispersion is None else float(dispersion)
    m, n = stack.m_imputations, stack.n_individuals
    index = stack.index
    j = index[outcome_fit.formula.response]
    is_three = stack.pattern == MissingnessPattern.III

    weights = np.full((m, n), 1.0 / m)
    if is_three.any():
        rows = np.flatnonzero(np.tile(is_three, m))
        X = build_design(outcome_fit.formula, index, stack.values, rows)
        eta = X @ beta
        y = stack.values[rows, j]
        if outcome_fit.formula.family is Family.GAUSSIAN:
            if sigma2 <= 0:
                raise glm.FitError("gaussian density needs positive variance")
            log_d = glm.gaussian_logpdf(y, eta, sigma2)
        else:
            log_d = glm.bernoulli_logpmf(y, eta)
        log_d = log_d.reshape(m, is_three.sum())
        if np.any(np.isneginf(log_d).all(axis=0)):
            raise glm.FitError(
                "all importance weights underflow for at least one individual"
            )
        log_norm = logsumexp(log_d, axis=0)
        weights[:, is_three] = np.exp(log_d - log_norm)
    return replace(stack, weights=weights.reshape(m * n))


# -- full algorithm -------------------------------------------------------------------------


def run_nar_smc_stack(data: Dataset, plan: ImputationPlan, rng) -> StackedImputation:
    """Steps 1-4 composed: covariate FCS, stack, outcome imputation, weights."""
    imputed = impute_covariates_stack(data, plan, rng)
    stack = build_stack(data, imputed)
    stack, outcome_fit = impute_outcome_on_stack(
        stack, plan.outcome_formula, plan.delta, data, rng
    )
    return compute_weights(stack, outcome_fit)
