"""Chained-equations engine: initialization, univariate imputation, delta-adjusted
outcome imputation, and the sweep loop (standard FCS and naive NARFCS).

The M chains are independent given chain-specific RNG streams, so the engine
runs them in lockstep: each (sweep, target) step fits all M univariate models
with one batched call and then draws per chain from that chain's own stream.
Working state is an (M, n, p) array whose originally-missing slots hold the
current imputations; the original mask decides which cells are ever rewritten,
so observed cells cannot be modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import glm
from .data import (
    DataError,
    Dataset,
    Family,
    Measurement,
    ModelFormula,
    Role,
    VariableSpec,
    build_design,
)

__all__ = [
    "DeltaSpec",
    "ImputationPlan",
    "WorkingData",
    "initialize",
    "impute_univariate",
    "impute_outcome_delta",
    "run_narfcs",
]


@dataclass(frozen=True)
class DeltaSpec:
    """Sensitivity parameters on the outcome's missingness indicator.

    `delta0` sits on M_Y and `delta1` on M_Y * exposure; units follow the
    outcome link (mean difference for identity, log-odds for logit).
    (0, 0) encodes the missing-at-random special case. These are engine
    inputs fixed from external information, never estimated.
    """

    delta0: float = 0.0
    delta1: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.delta0) and np.isfinite(self.delta1)):
            raise ValueError("delta components must be finite")

    @property
    def is_null(self) -> bool:
        return self.delta0 == 0.0 and self.delta1 == 0.0

    def scaled(self, multiplier: float) -> "DeltaSpec":
        return DeltaSpec(multiplier * self.delta0, multiplier * self.delta1)

    def offset(self, x_values: np.ndarray) -> np.ndarray:
        """Linear-predictor shift for missing-outcome rows with exposure `x_values`."""
        return self.delta0 + self.delta1 * np.asarray(x_values, float)


@dataclass(frozen=True)
class ImputationPlan:
    """What to impute and how: targets in visit order, their univariate models,
    the delta-adjusted outcome model, and chain dimensions."""

    targets: tuple[str, ...]
    univariate_formulas: Mapping[str, ModelFormula]
    outcome_formula: ModelFormula
    delta: DeltaSpec = DeltaSpec()
    iterations: int = 5
    n_imputations: int = 20
    proper_draws: bool = True

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.n_imputations < 2:
            raise ValueError("need at least 2 imputations")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("duplicate imputation targets")
        for target in self.targets:
            if target not in self.univariate_formulas:
                raise ValueError(f"no univariate formula for target {target!r}")
            f = self.univariate_formulas[target]
            if f.response != target:
                raise ValueError(
                    f"univariate formula for {target!r} has response {f.response!r}"
                )


class WorkingData:
    """Mutable chain state: current values plus the original missingness mask."""

    __slots__ = ("columns", "values", "mask", "_index")

    def __init__(self, columns: Sequence[VariableSpec], values, mask):
        self.columns = tuple(columns)
        self.values = np.array(values, dtype=float)
        self.mask = np.array(mask, dtype=bool)
        self.mask.setflags(write=False)
        self._index = {c.name: j for j, c in enumerate(self.columns)}

    @classmethod
    def from_dataset(cls, data: Dataset) -> "WorkingData":
        return cls(data.columns, data.values, data.mask)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    @property
    def outcome_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.OUTCOME)

    @property
    def exposure_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.EXPOSURE)

    def to_dataset(self) -> Dataset:
        if np.isnan(self.values).any():
            raise DataError("working data still contains unimputed cells")
        return Dataset(self.columns, self.values.copy(), np.zeros_like(self.mask))


# -- plan validation --------------------------------------------------------------


def _validate_formula_vars(formula: ModelFormula, columns, index) -> None:
    for name in (formula.response,) + formula.main_terms:
        if name not in index:
            raise DataError(f"formula references unknown column {name!r}")
        if columns[index[name]].role is Role.LATENT:
            raise DataError(
                f"formula references latent column {name!r}; latent variables "
                "exist only inside the generator"
            )


def _validate_plan(plan: ImputationPlan, columns, index, outcome: str) -> None:
    for target in plan.targets:
        if target not in index:
            raise DataError(f"imputation target {target!r} not in dataset")
        if target == outcome:
            raise DataError(
                "the outcome is imputed through the delta-adjusted outcome model, "
                "not as a chained target"
            )
        f = plan.univariate_formulas[target]
        _validate_formula_vars(f, columns, index)
        want = (
            Family.BERNOULLI
            if columns[index[target]].measurement is Measurement.BINARY
            else Family.GAUSSIAN
        )
        if f.family is not want:
            raise DataError(
                f"univariate formula for {target!r} has family {f.family.value}, "
                f"expected {want.value}"
            )
    if plan.outcome_formula.response != outcome:
        raise DataError(
            f"outcome formula response {plan.outcome_formula.response!r} "
            f"does not match outcome {outcome!r}"
        )
    _validate_formula_vars(plan.outcome_formula, columns, index)


# -- batched building blocks --------------------------------------------------------
# `working` is (M, n, p); `rngs` one Generator per chain. Fits are deterministic
# so they are batched; anything stochastic loops chains in order, consuming only
# that chain's stream.


def _fit_batch(formula, index, working, rows, beta0=None):
    """Fit `formula` on every chain's current values over `rows`.

    Returns (coef (M,k), cov (M,k,k), sigma2 (M,), df (M,)).
    """
    X = build_design(formula, index, working, rows)
    y = working[:, rows, index[formula.response]]
    if np.isnan(y).any():
        raise DataError(f"response {formula.response!r} missing in fitted rows")
    if formula.family is Family.GAUSSIAN:
        coef, sigma2, cov, df = glm.wols_batch(X, y, want_cov=True)
        return coef, cov, sigma2, df
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError(f"bernoulli response {formula.response!r} must be 0/1")
    coef, converged, cov, df = glm.wirls_batch(X, y, beta0=beta0, want_cov=True)
    if not converged.all():
        raise glm.ConvergenceError(
            f"IRLS non-convergence fitting {formula.text()!r} "
            f"in chain(s) {np.flatnonzero(~converged).tolist()} (possible separation)"
        )
    return coef, cov, np.ones(working.shape[0]), df


def _draw_batch(coef, cov, sigma2, df, family, rngs, proper):
    """Per-chain parameter draws; plug-in MLEs when proper=False."""
    if not proper:
        return coef.copy(), np.asarray(sigma2, float).copy()
    m = coef.shape[0]
    coef_draws = np.empty_like(coef)
    disp_draws = np.empty(m)
    for c in range(m):
        coef_draws[c], disp_draws[c] = glm.draw_coef_dispersion(
            coef[c], cov[c], float(sigma2[c]), float(df[c]), family, rngs[c]
        )
    return coef_draws, disp_draws


def _predictive_draw_batch(family, eta, disp, rngs):
    """Draw from the predictive distribution row-wise, one stream per chain."""
    m, nm = eta.shape
    out = np.empty((m, nm))
    if family is Family.GAUSSIAN:
        sd = np.sqrt(disp)
        for c in range(m):
            out[c] = eta[c] + sd[c] * rngs[c].standard_normal(nm)
    else:
        p = expit(eta)
        for c in range(m):
            out[c] = (rngs[c].random(nm) < p[c]).astype(float)
    return out


def _resample_fill_batch(targets, index, working, mask, base_values, rngs):
    """Fill each target's missing cells with draws from its observed values."""
    for target in targets:
        j = index[target]
        observed = base_values[~mask[:, j], j]
        missing_rows = np.flatnonzero(mask[:, j])
        if missing_rows.size == 0:
            continue
        if observed.size == 0:
            raise DataError(f"target {target!r} has no observed values to resample")
        for c, rng in enumerate(rngs):
            pick = rng.integers(0, observed.size, missing_rows.size)
            working[c, missing_rows, j] = observed[pick]


def _impute_univariate_batch(target, formula, index, working, mask, rngs, beta0=None, proper=True):
    """One chained-equations update of `target` across all chains.

    Fits on the originally-observed target rows, draws parameters per chain,
    then draws the originally-missing cells from the predictive distribution.
    Returns the fitted coefficients for warm-starting the next sweep.
    """
    j = index[target]
    missing_rows = np.flatnonzero(mask[:, j])
    obs_rows = np.flatnonzero(~mask[:, j])
    coef, cov, sigma2, df = _fit_batch(formula, index, working, obs_rows, beta0)
    if missing_rows.size:
        coef_d, disp_d = _draw_batch(coef, cov, sigma2, df, formula.family, rngs, proper)
        X = build_design(formula, index, working, missing_rows)
        eta = np.einsum("mnk,mk->mn", X, coef_d)
        working[:, missing_rows, j] = _predictive_draw_batch(formula.family, eta, disp_d, rngs)
    return coef


def _impute_outcome_delta_batch(
    formula, delta, index, working, mask, exposure, rngs, beta0=None, proper=True
):
    """Delta-adjusted outcome update: fit the identifiable part on observed-outcome
    rows, then shift the linear predictor by M_Y*(delta0 + delta1*X) before the
    predictive draw."""
    j = index[formula.response]
    missing_rows = np.flatnonzero(mask[:, j])
    obs_rows = np.flatnonzero(~mask[:, j])
    coef, cov, sigma2, df = _fit_batch(formula, index, working, obs_rows, beta0)
    if missing_rows.size:
        coef_d, disp_d = _draw_batch(coef, cov, sigma2, df, formula.family, rngs, proper)
        X = build_design(formula, index, working, missing_rows)
        eta = np.einsum("mnk,mk->mn", X, coef_d)
        eta += delta.offset(working[:, missing_rows, index[exposure]])
        working[:, missing_rows, j] = _predictive_draw_batch(formula.family, eta, disp_d, rngs)
    return coef


# -- public single-chain operations -------------------------------------------------


def initialize(data: Dataset, plan: ImputationPlan, rng) -> WorkingData:
    """Initial fill: resample targets from their observed values, then draw the
    outcome from the delta-adjusted model fitted on observed-outcome rows."""
    _validate_plan(plan, data.columns, data._index, data.outcome_name)
    work = WorkingData.from_dataset(data)
    _resample_fill_batch(
        plan.targets, work._index, work.values[None], work.mask, data.values, [rng]
    )
    if work.mask[:, work.index(work.outcome_name)].any():
        _impute_outcome_delta_batch(
            plan.outcome_formula,
            plan.delta,
            work._index,
            work.values[None],
            work.mask,
            work.exposure_name,
            [rng],
            proper=plan.proper_draws,
        )
    return work


def impute_univariate(target: str, formula: ModelFormula, work: WorkingData, rng, proper=True) -> np.ndarray:
    """Refit and redraw one target's originally-missing cells in place."""
    _validate_formula_vars(formula, work.columns, work._index)
    _impute_univariate_batch(
        target, formula, work._index, work.values[None], work.mask, [rng], proper=proper
    )
    return work.column(target).copy()


def impute_outcome_delta(
    work: WorkingData, outcome_formula: ModelFormula, delta: DeltaSpec, rng, proper=True
) -> np.ndarray:
    """Refit the identifiable part and redraw missing outcomes with the delta shift."""
    _validate_formula_vars(outcome_formula, work.columns, work._index)
    _impute_outcome_delta_batch(
        outcome_formula,
        delta,
        work._index,
        work.values[None],
        work.mask,
        work.exposure_name,
        [rng],
        proper=proper,
    )
    return work.column(outcome_formula.response).copy()


# -- NARFCS ----------------------------------------------------------------------


def run_narfcs(data: Dataset, plan: ImputationPlan, rng) -> list[Dataset]:
    """Chained equations with a delta-adjusted outcome model (naive NARFCS).

    Each sweep visits the non-outcome targets in plan order and imputes the
    outcome last. Returns the M final imputed datasets.
    """
    outcome = data.outcome_name
    _validate_plan(plan, data.columns, data._index, outcome)
    index = data._index
    m = plan.n_imputations
    rngs = rng.spawn(m)
    working = np.repeat(data.values[None], m, axis=0)
    mask = data.mask
    outcome_missing = mask[:, index[outcome]].any()

    _resample_fill_batch(plan.targets, index, working, mask, data.values, rngs)
    warm: dict[str, np.ndarray] = {}
    if outcome_missing:
        warm[outcome] = _impute_outcome_delta_batch(
            plan.outcome_formula,
            plan.delta,
            index,
            working,
            mask,
            data.exposure_name,
            rngs,
            proper=plan.proper_draws,
        )

    for _ in range(plan.iterations):
        for target in plan.targets:
            formula = plan.univariate_formulas[target]
            warm[target] = _impute_univariate_batch(
                target,
                formula,
                index,
                working,
                mask,
                rngs,
                beta0=warm.get(target),
                proper=plan.proper_draws,
            )
        if outcome_missing:
            warm[outcome] = _impute_outcome_delta_batch(
                plan.outcome_formula,
                plan.delta,
                index,
                working,
                mask,
                data.exposure_name,
                rngs,
                beta0=warm.get(outcome),
                proper=plan.proper_draws,
            )
    return [data.completed(working[c]) for c in range(m)]
