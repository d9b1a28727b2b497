"""Gaussian-identity and Bernoulli-logit model fitting, drawing, and densities.

Two fitting routes share the same math: a single-model route returning a
:class:`GlmFit`, and batched routes (`wols_batch`, `wirls_batch`) that fit B
models with one set of BLAS calls. The batched routes carry the chained
equations engines and the bootstrap, where thousands of small fits dominate
runtime.

All density arithmetic is available in log space; products of densities
underflow in the tails at realistic sample sizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .data import (
    DataError,
    Dataset,
    Family,
    ModelFormula,
    build_design,
    design_matrix,
    response_vector,
)

__all__ = [
    "GlmFit",
    "FitError",
    "ConvergenceError",
    "RankDeficiencyError",
    "fit",
    "draw_params",
    "predict_mean",
    "predict_mean_rows",
    "density",
    "log_density",
    "gaussian_logpdf",
    "bernoulli_logpmf",
]

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100


class FitError(RuntimeError):
    """Raised when a model cannot be fitted."""


class ConvergenceError(FitError):
    """IRLS failed to converge (perfect separation surfaces here)."""


class RankDeficiencyError(FitError):
    """Design matrix is rank deficient; reports the offending column."""


@dataclass(frozen=True)
class GlmFit:
    """Fitted coefficients, covariance, and dispersion for one model.

    ``dispersion`` is the residual variance for gaussian models and fixed 1
    for bernoulli. ``df_resid`` is the total fitting weight minus the number
    of coefficients; it drives the chi-square dispersion draw.
    """

    formula: ModelFormula
    coef: np.ndarray
    covariance: np.ndarray
    dispersion: float
    n_used: int
    df_resid: float

    def __post_init__(self):
        self.coef.setflags(write=False)
        self.covariance.setflags(write=False)


# -- rank diagnostics ---------------------------------------------------------


def _offending_column(X: np.ndarray, labels) -> str:
    """First column that is linearly dependent on its predecessors."""
    rank = 0
    for j in range(X.shape[1]):
        new_rank = np.linalg.matrix_rank(X[:, : j + 1])
        if new_rank == rank:
            return labels[j]
        rank = new_rank
    return labels[-1]


def _check_rank(X: np.ndarray, labels) -> None:
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficiencyError(
            f"rank-deficient design: column {_offending_column(X, labels)!r} "
            "is collinear with earlier columns"
        )


# -- single-model cores --------------------------------------------------------


def _ols_core(X, y, w=None):
    n, k = X.shape
    if w is None:
        sw = np.ones(n)
    else:
        sw = np.asarray(w, float)
    sq = np.sqrt(sw)
    beta, _, rank, _ = np.linalg.lstsq(X * sq[:, None], y * sq, rcond=None)
    if rank < k:
        raise RankDeficiencyError(
            f"rank-deficient design: column "
            f"{_offending_column(X * sq[:, None], range(k))!r} is collinear"
        )
    resid = y - X @ beta
    total_w = sw.sum()
    df = total_w - k
    rss = float(np.sum(sw * resid**2))
    sigma2 = max(rss, 0.0) / df if df > 0 else 0.0
    xtwx = (X * sw[:, None]).T @ X
    cov = sigma2 * np.linalg.inv(xtwx)
    return beta, cov, sigma2, df


def _irls_core(X, y, w=None, beta0=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER):
    n, k = X.shape
    sw = np.ones(n) if w is None else np.asarray(w, float)
    beta = np.zeros(k) if beta0 is None else np.array(beta0, float)
    xtwx = None
    for _ in range(max_iter):
        eta = X @ beta
        mu = expit(eta)
        wvar = sw * mu * (1.0 - mu)
        xtwx = (X * wvar[:, None]).T @ X
        score = X.T @ (sw * (y - mu))
        try:
            step = np.linalg.solve(xtwx, score)
        except np.linalg.LinAlgError:
            raise ConvergenceError(
                "IRLS information matrix is singular (possible separation)"
            ) from None
        beta += step
        if np.max(np.abs(step)) < tol:
            eta = X @ beta
            mu = expit(eta)
            wvar = sw * mu * (1.0 - mu)
            xtwx = (X * wvar[:, None]).T @ X
            return beta, np.linalg.inv(xtwx), float(sw.sum()) - k
    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations (possible separation)"
    )


# -- batched cores ---------------------------------------------------------------
# Xb is (B, n, k) and may be a broadcast view sharing one physical matrix;
# yb and wb broadcast against (B, n). No per-B Python work happens inside.


def wols_batch(Xb, yb, wb=None, want_cov=False):
    """Weighted least squares for B models at once.

    Returns ``(beta, sigma2, cov, df)`` where `beta` is (B, k), `sigma2` and
    `df` are (B,), and `cov` is (B, k, k) or None. Raises
    :class:`numpy.linalg.LinAlgError` if any batch member is singular.
    """
    B, n, k = Xb.shape
    if wb is None:
        wb = np.ones((1, 1))
    wb = np.broadcast_to(wb, (B, n))
    yb = np.broadcast_to(yb, (B, n))
    xtwx = np.einsum("bnp,bn,bnq->bpq", Xb, wb, Xb, optimize=True)
    xtwy = np.einsum("bnp,bn,bn->bp", Xb, wb, yb, optimize=True)
    beta = np.linalg.solve(xtwx, xtwy[..., None])[..., 0]
    resid = yb - np.einsum("bnk,bk->bn", Xb, beta)
    total_w = wb.sum(axis=1)
    df = total_w - k
    rss = np.einsum("bn,bn->b", wb, resid**2)
    sigma2 = np.where(df > 0, np.maximum(rss, 0.0) / np.where(df > 0, df, 1.0), 0.0)
    cov = sigma2[:, None, None] * np.linalg.inv(xtwx) if want_cov else None
    return beta, sigma2, cov, df


def wirls_batch(
    Xb,
    yb,
    wb=None,
    beta0=None,
    tol=IRLS_TOL,
    max_iter=IRLS_MAX_ITER,
    want_cov=False,
):
    """Bernoulli-logit IRLS for B models at once.

    Returns ``(beta, converged, cov, df)``; `converged` is a (B,) bool mask.
    Members that fail to converge keep their last iterate; callers decide
    whether that is an error (engine fits) or a redraw (bootstrap).
    """
    B, n, k = Xb.shape
    wb_arr = None if wb is None else np.broadcast_to(wb, (B, n))
    yb = np.broadcast_to(yb, (B, n))
    if beta0 is None:
        beta = np.zeros((B, k))
    else:
        beta = np.array(np.broadcast_to(beta0, (B, k)), dtype=float)
    active = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    for _ in range(max_iter):
        eta = np.einsum("bnk,bk->bn", Xb, beta)
        mu = expit(eta)
        wvar = mu * (1.0 - mu)
        if wb_arr is not None:
            wvar = wvar * wb_arr
            resid_w = wb_arr * (yb - mu)
        else:
            resid_w = yb - mu
        xtwx = np.einsum("bnp,bn,bnq->bpq", Xb, wvar, Xb, optimize=True)
        score = np.einsum("bnp,bn->bp", Xb, resid_w, optimize=True)
        step, ok = _solve_batch(xtwx, score)
        failed |= active & ~ok
        active &= ok
        step_size = np.max(np.abs(step), axis=1)
        beta[active] += step[active]
        newly_done = active & (step_size < tol)
        active = active & ~newly_done
        if not active.any():
            break
    converged = ~active & ~failed
    cov = None
    if want_cov:
        eta = np.einsum("bnk,bk->bn", Xb, beta)
        mu = expit(eta)
        wvar = mu * (1.0 - mu)
        if wb_arr is not None:
            wvar = wvar * wb_arr
        xtwx = np.einsum("bnp,bn,bnq->bpq", Xb, wvar, Xb, optimize=True)
        cov, ok = _inv_batch(xtwx)
        converged = converged & ok
    total_w = float(n) * np.ones(B) if wb_arr is None else wb_arr.sum(axis=1)
    return beta, converged, cov, total_w - k


def _solve_batch(A, b):
    """Batched solve of A @ x = b for stacked vectors b, flagging singular members."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0], np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    B = A.shape[0]
    out = np.zeros_like(b)
    ok = np.ones(B, dtype=bool)
    for i in range(B):
        try:
            out[i] = np.linalg.solve(A[i], b[i])
        except np.linalg.LinAlgError:
            ok[i] = False
    return out, ok


def _inv_batch(A):
    try:
        return np.linalg.inv(A), np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    B, k, _ = A.shape
    out = np.zeros_like(A)
    ok = np.ones(B, dtype=bool)
    for i in range(B):
        try:
            out[i] = np.linalg.inv(A[i])
        except np.linalg.LinAlgError:
            ok[i] = False
    return out, ok


# -- public fitting ---------------------------------------------------------------


def fit(
    formula: ModelFormula,
    data: Dataset,
    row_filter=None,
    weights=None,
) -> GlmFit:
    """Maximum-likelihood fit of `formula` on `data`.

    Parameters
    ----------
    row_filter : bool array of length n, or callable Dataset -> bool array
        Rows to fit on; default all rows.
    weights : nonnegative per-row reals over the *filtered* rows or all rows
        Frequency-style weights entering the score equations.
    """
    if callable(row_filter):
        row_filter = np.asarray(row_filter(data), dtype=bool)
    if row_filter is None:
        rows = np.arange(data.n_rows)
    else:
        row_filter = np.asarray(row_filter, dtype=bool)
        if row_filter.shape != (data.n_rows,):
            raise DataError("row_filter must be a boolean mask over rows")
        rows = np.flatnonzero(row_filter)
    k = formula.n_coefficients
    if rows.size < k:
        raise FitError(
            f"need at least {k} rows to fit {formula.text()!r}, got {rows.size}"
        )
    X = design_matrix(formula, data, rows)
    y = response_vector(formula, data._index, data.values, rows)
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape == (data.n_rows,):
            w = w[rows]
        elif w.shape != (rows.size,):
            raise DataError("weights must align with filtered rows")
        if (w < 0).any():
            raise DataError("weights must be nonnegative")
    if formula.family is Family.GAUSSIAN:
        _check_rank(X if w is None else X * np.sqrt(w)[:, None], formula.term_labels)
        beta, cov, sigma2, df = _ols_core(X, y, w)
    else:
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataError(f"bernoulli response {formula.response!r} must be 0/1")
        _check_rank(X if w is None else X * np.sqrt(w)[:, None], formula.term_labels)
        beta, cov, df = _irls_core(X, y, w)
        sigma2 = 1.0
    return GlmFit(
        formula=formula,
        coef=beta,
        covariance=cov,
        dispersion=float(sigma2),
        n_used=int(rows.size),
        df_resid=float(df),
    )


# -- parameter draws ----------------------------------------------------------------


def draw_coef_dispersion(coef, covariance, dispersion, df_resid, family, rng):
    """One proper-imputation parameter draw from a fit's sampling distribution.

    For gaussian fits the dispersion is drawn first as
    ``sigma2_hat * df / chi2(df)`` and the coefficient covariance is rescaled
    by the drawn-to-fitted dispersion ratio; bernoulli fits draw straight from
    MVN(coef, covariance).
    """
    if family is Family.GAUSSIAN and df_resid > 0 and dispersion > 0:
        sigma2_star = dispersion * df_resid / rng.chisquare(df_resid)
        cov = covariance * (sigma2_star / dispersion)
    else:
        sigma2_star = dispersion if family is Family.GAUSSIAN else 1.0
        cov = covariance
    k = coef.shape[0]
    if not np.any(cov):
        return coef.copy(), float(sigma2_star)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        warnings.warn("covariance not decomposable; adding 1e-10 diagonal jitter")
        chol = np.linalg.cholesky(cov + 1e-10 * np.eye(k))
    return coef + chol @ rng.standard_normal(k), float(sigma2_star)


def draw_params(glm_fit: GlmFit, rng) -> tuple[np.ndarray, float]:
    return draw_coef_dispersion(
        glm_fit.coef,
        glm_fit.covariance,
        glm_fit.dispersion,
        glm_fit.df_resid,
        glm_fit.formula.family,
        rng,
    )


# -- prediction and density -----------------------------------------------------------


def _mean_from_eta(eta, family: Family):
    return eta if family is Family.GAUSSIAN else expit(eta)


def predict_mean_rows(glm_fit: GlmFit, data: Dataset, rows=None, coef=None) -> np.ndarray:
    beta = glm_fit.coef if coef is None else np.asarray(coef, float)
    X = design_matrix(glm_fit.formula, data, rows)
    return _mean_from_eta(X @ beta, glm_fit.formula.family)


def predict_mean(glm_fit: GlmFit, data: Dataset, row: int, coef=None) -> float:
    return float(predict_mean_rows(glm_fit, data, np.array([row]), coef)[0])


def gaussian_logpdf(y, mu, sigma2):
    sigma2 = np.asarray(sigma2, float)
    return -0.5 * ((np.asarray(y) - mu) ** 2 / sigma2 + np.log(2.0 * np.pi * sigma2))


def bernoulli_logpmf(y, eta):
    """log p^y (1-p)^(1-y) computed from the linear predictor, overflow-safe."""
    y = np.asarray(y, float)
    return y * log_expit(eta) + (1.0 - y) * log_expit(-np.asarray(eta, float))


def log_density(glm_fit: GlmFit, data: Dataset, row: int, y: float, coef=None, dispersion=None) -> float:
    beta = glm_fit.coef if coef is None else np.asarray(coef, float)
    X = design_matrix(glm_fit.formula, data, np.array([row]))
    eta = float(X[0] @ beta)
    if glm_fit.formula.family is Family.GAUSSIAN:
        sigma2 = glm_fit.dispersion if dispersion is None else float(dispersion)
        if sigma2 <= 0:
            raise FitError(f"gaussian density needs positive variance, got {sigma2}")
        return float(gaussian_logpdf(y, eta, sigma2))
    return float(bernoulli_logpmf(y, eta))


def density(glm_fit: GlmFit, data: Dataset, row: int, y: float, coef=None, dispersion=None) -> float:
    return float(np.exp(log_density(glm_fit, data, row, y, coef, dispersion)))
