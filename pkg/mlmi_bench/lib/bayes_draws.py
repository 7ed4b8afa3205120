"""
Bayes Draws - Conjugate posterior draws shared by the Gibbs imputers
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import invwishart

logger = logging.getLogger(__name__)

MAX_JITTER_RETRIES = 10


class ImputationError(RuntimeError):
    """Imputation model cannot be sampled (collinear predictors, non-PD covariance, bad variant)"""


def check_full_rank(X: np.ndarray, labels: Optional[Sequence[str]] = None, tol: float = 1e-10):
    """
    Raise ImputationError naming the collinear predictor columns of X
    """
    if X.shape[1] == 0:
        return
    _, r, piv = linalg.qr(X, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > tol * max(diag[0], 1.0)).sum())
    if rank < X.shape[1]:
        dropped = piv[rank:]
        names = [labels[i] if labels is not None else f'column {i}' for i in sorted(dropped)]
        raise ImputationError(f'collinear predictors: {names}')


def draw_inverse_wishart(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Inverse-Wishart draw that retries with diagonal jitter until the result is positive definite

    Raises:
        ImputationError: after MAX_JITTER_RETRIES failed attempts
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    scale = 0.5 * (scale + scale.T)
    jitter = 0.0
    for attempt in range(MAX_JITTER_RETRIES + 1):
        try:
            draw = np.atleast_2d(invwishart.rvs(df=df, scale=scale + jitter * np.eye(len(scale)),
                                                random_state=rng))
            np.linalg.cholesky(draw)
            return draw
        except (np.linalg.LinAlgError, ValueError):
            jitter = max(jitter * 10, 1e-8 * max(np.trace(scale) / len(scale), 1.0))
            logger.debug(f'inverse-Wishart draw not positive definite, retry {attempt + 1} with jitter {jitter:.2e}')
    raise ImputationError(f'covariance draw not positive definite after {MAX_JITTER_RETRIES} jitter retries')


def draw_inverse_gamma(shape: float, rate: float, rng: np.random.Generator) -> float:
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def draw_scaled_inv_chi2(sum_squares: float, df: int, rng: np.random.Generator) -> float:
    """sigma^2 = SS / chi2_df"""
    return float(sum_squares / rng.chisquare(df))


def draw_normal_precision(precision: np.ndarray, linear: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draw from N(P^-1 b, P^-1) given precision P and linear term b
    """
    chol = linalg.cholesky(precision, lower=True)
    mean = linalg.cho_solve((chol, True), linear)
    z = rng.standard_normal(np.shape(linear))
    return mean + linalg.solve_triangular(chol.T, z, lower=False)


def draw_normal_regression(X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                           labels: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, float]:
    """
    Bayesian normal linear regression with flat prior

    Draws sigma^2 from scaled inverse chi-square with n - p df, then beta | sigma^2.

    Args:
        X: n x p design (observed rows only)
        y: response
        rng: random stream
        labels: column labels for the collinearity message

    Returns:
        (beta, sigma2)
    """
    n, p = X.shape
    if n <= p:
        raise ImputationError(f'{n} observed rows cannot identify {p} regression coefficients')
    check_full_rank(X, labels)
    q, r = linalg.qr(X, mode='economic')
    beta_hat = linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ beta_hat
    sigma2 = draw_scaled_inv_chi2(float(resid @ resid), n - p, rng)
    beta = beta_hat + np.sqrt(sigma2) * linalg.solve_triangular(r, rng.standard_normal(p))
    return beta, sigma2


def draw_mvn_regression(X: np.ndarray, Y: np.ndarray, rng: np.random.Generator,
                        prior_df: Optional[float] = None, prior_scale: Optional[np.ndarray] = None,
                        labels: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multivariate normal regression Y = XB + E, E ~ N(0, Sigma)

    Flat prior on B, Sigma ~ IW(q + 1, I) unless overridden. Sigma is drawn from its marginal
    posterior IW(prior_df + n - p, prior_scale + E'E), then B from the matrix normal conditional.

    Returns:
        (B, Sigma) with B of shape (p, q)
    """
    n, p = X.shape
    q = Y.shape[1]
    prior_df = q + 1 if prior_df is None else prior_df
    prior_scale = np.eye(q) if prior_scale is None else prior_scale
    check_full_rank(X, labels)
    qx, rx = linalg.qr(X, mode='economic')
    B_hat = linalg.solve_triangular(rx, qx.T @ Y)
    E = Y - X @ B_hat
    Sigma = draw_inverse_wishart(prior_df + n - p, prior_scale + E.T @ E, rng)
    B = B_hat + linalg.solve_triangular(rx, rng.standard_normal((p, q))) @ np.linalg.cholesky(Sigma).T
    return B, Sigma


def draw_missing_rows(Y: np.ndarray, missing: np.ndarray, mean: np.ndarray, Sigma: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """
    Draw missing cells of each row from the conditional normal given that row's observed cells

    Rows are grouped by missingness pattern so each pattern costs one factorization.

    Args:
        Y: n x q current values (missing cells may hold anything)
        missing: n x q boolean mask
        mean: n x q row means
        Sigma: q x q covariance

    Returns:
        copy of Y with missing cells replaced
    """
    out = Y.copy()
    rows = np.flatnonzero(missing.any(axis=1))
    if rows.size == 0:
        return out
    patterns, inverse = np.unique(missing[rows], axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for idx, pattern in enumerate(patterns):
        members = rows[inverse == idx]
        mis = np.flatnonzero(pattern)
        obs = np.flatnonzero(~pattern)
        s_mm = Sigma[np.ix_(mis, mis)]
        cond_mean = mean[np.ix_(members, mis)]
        if obs.size:
            s_mo = Sigma[np.ix_(mis, obs)]
            s_oo = Sigma[np.ix_(obs, obs)]
            gain = linalg.solve(s_oo, s_mo.T, assume_a='pos').T
            cond_mean = cond_mean + (Y[np.ix_(members, obs)] - mean[np.ix_(members, obs)]) @ gain.T
            s_mm = s_mm - gain @ s_mo.T
        chol = np.linalg.cholesky(0.5 * (s_mm + s_mm.T))
        out[np.ix_(members, mis)] = cond_mean + rng.standard_normal((members.size, mis.size)) @ chol.T
    return out
