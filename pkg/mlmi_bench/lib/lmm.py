"""
LMM - REML fitting of nested random-intercept linear mixed models (school / school:child)

Variance components are profiled as ratios g2 = sigma2^2 / sigma1^2, g3 = sigma3^2 / sigma1^2.
For children c nested in schools s with W = [X y], child sums S_c and child sizes n_c:

    t_c = 1 / (1 + g2 n_c),   q_s = sum_c n_c t_c,   G_s = sum_c t_c S_c
    W'H^-1 W = W'W - sum_c g2 t_c S_c S_c' - sum_s g3 / (1 + g3 q_s) G_s G_s'
    log|H| = sum_c log(1 + g2 n_c) + sum_s log(1 + g3 q_s)

so every likelihood evaluation costs O(groups * p^2) instead of dense n x n solves.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize, sparse

from mlmi_bench.lib.data_model import CHILD, SCHOOL, LongDataset, WideDataset, to_array

logger = logging.getLogger(__name__)

GROUPINGS = ('school', 'school:child')
GRAD_TOL = 1e-6
STEP_TOL = 1e-8
LOG_RATIO_BOUNDS = (-25.0, 15.0)
LOG_2PI = math.log(2 * math.pi)


class RankDeficiencyError(ValueError):
    """Fixed-effects design is not of full column rank"""


@dataclass(frozen=True)
class Term:
    """Fixed-effect term: main effect, product of two columns, or square of one"""
    kind: str
    parents: Tuple[str, ...]

    @classmethod
    def main(cls, name: str) -> 'Term':
        return cls('main', (name,))

    @classmethod
    def product(cls, a: str, b: str) -> 'Term':
        return cls('product', (a, b))

    @classmethod
    def square(cls, name: str) -> 'Term':
        return cls('square', (name,))

    @property
    def label(self) -> str:
        if self.kind == 'main':
            return self.parents[0]
        if self.kind == 'product':
            return ':'.join(self.parents)
        return f'{self.parents[0]}^2'

    def apply(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        """Evaluate on plain arrays keyed by parent name"""
        parents = [np.asarray(values[name], dtype=float) for name in self.parents]
        if self.kind == 'main':
            return parents[0]
        if self.kind == 'product':
            return parents[0] * parents[1]
        if self.kind == 'square':
            return parents[0] ** 2
        raise ValueError(f'unknown term kind {self.kind!r}')

    def evaluate(self, frame: pd.DataFrame) -> np.ndarray:
        values = to_array(frame, self.parents)
        return self.apply(dict(zip(self.parents, values.T)))


@dataclass(frozen=True)
class LmmSpec:
    """Response, fixed terms (intercept implicit) and nested random intercepts, outermost first"""
    response: str
    fixed_terms: Tuple[Term, ...]
    random_intercepts: Tuple[str, ...] = GROUPINGS

    def __post_init__(self):
        unknown = [g for g in self.random_intercepts if g not in GROUPINGS]
        if unknown:
            raise ValueError(f'unsupported grouping {unknown}; choose from {GROUPINGS}')
        order = [GROUPINGS.index(g) for g in self.random_intercepts]
        if order != sorted(set(order)):
            raise ValueError(f'random intercepts must be listed outermost first: {self.random_intercepts}')

    @property
    def column_labels(self) -> List[str]:
        return ['(Intercept)'] + [t.label for t in self.fixed_terms]


@dataclass
class LmmFit:
    """REML fit; vc is (sigma3^2, sigma2^2, sigma1^2) with absent levels reported as 0"""
    beta_hat: np.ndarray
    se_beta: np.ndarray
    cov_beta: np.ndarray
    vc: Tuple[float, float, float]
    reml_loglik: float
    converged: bool
    n_obs: int
    n_groups: Dict[str, int]
    column_labels: List[str] = field(default_factory=list)
    message: str = ''

    @property
    def df_resid(self) -> int:
        return self.n_obs - len(self.beta_hat)

    def coef(self, label: str) -> Tuple[float, float]:
        idx = self.column_labels.index(label)
        return float(self.beta_hat[idx]), float(self.se_beta[idx])


def gaussian_loglik(y: np.ndarray, mean: np.ndarray, variance: Union[float, np.ndarray]) -> np.ndarray:
    """Per-row normal log density"""
    resid = np.asarray(y, dtype=float) - mean
    return -0.5 * (LOG_2PI + np.log(variance) + resid ** 2 / variance)


class _BlockStructure:
    """Sufficient statistics of W = [X y] for the nested random-intercept likelihood"""

    def __init__(self, X: np.ndarray, y: np.ndarray, school: np.ndarray, child: np.ndarray,
                 random_intercepts: Sequence[str]):
        self.n, self.p = X.shape
        self.use_child = 'school:child' in random_intercepts
        self.use_school = 'school' in random_intercepts
        W = np.column_stack([X, y])
        self.M = W.T @ W
        if self.use_child:
            _, child_code = np.unique(np.column_stack([school, child]), axis=0, return_inverse=True)
        else:
            child_code = np.arange(self.n)
        child_code = np.asarray(child_code).reshape(-1)
        n_child = int(child_code.max()) + 1 if self.n else 0
        indicator = sparse.csr_matrix((np.ones(self.n), (child_code, np.arange(self.n))), shape=(n_child, self.n))
        self.S = np.asarray(indicator @ W)
        self.n_c = np.asarray(indicator.sum(axis=1)).reshape(-1)
        child_school = np.zeros(n_child, dtype=np.int64)
        child_school[child_code] = school
        _, school_code = np.unique(child_school if self.use_school else np.zeros(n_child, dtype=np.int64),
                                   return_inverse=True)
        self.school_code = np.asarray(school_code).reshape(-1)
        self.n_school = int(self.school_code.max()) + 1 if n_child else 0
        self.n_child = n_child
        self.school_of_child = sparse.csr_matrix(
            (np.ones(n_child), (self.school_code, np.arange(n_child))), shape=(self.n_school, n_child))

    def quadratics(self, g2: float, g3: float, with_gradient: bool = False):
        """Return W'H^-1W, log|H| and (optionally) group sums of H^-1 W with the trace terms"""
        t = 1.0 / (1.0 + g2 * self.n_c)
        G = np.asarray(self.school_of_child @ (t[:, None] * self.S))
        q = np.asarray(self.school_of_child @ (self.n_c * t)).reshape(-1)
        shrink = g3 / (1.0 + g3 * q)
        Q = self.M - (g2 * t * self.S.T) @ self.S - (shrink * G.T) @ G
        logdet = float(np.log1p(g2 * self.n_c).sum() + np.log1p(g3 * q).sum())
        if not with_gradient:
            return Q, logdet, None
        nt = self.n_c * t
        C_child = t[:, None] * self.S - (shrink[self.school_code] * nt)[:, None] * G[self.school_code]
        C_school = G / (1.0 + g3 * q)[:, None]
        tr2 = float((nt - shrink[self.school_code] * nt ** 2).sum())
        tr3 = float((q / (1.0 + g3 * q)).sum())
        return Q, logdet, (C_child, C_school, tr2, tr3)


def _split(Q: np.ndarray, p: int):
    return Q[:p, :p], Q[:p, p], Q[p, p]


class _RemlProblem:
    """Profiled REML criterion over the free variance ratios"""

    def __init__(self, blocks: _BlockStructure):
        self.blocks = blocks
        self.free = [name for name, on in (('g2', blocks.use_child), ('g3', blocks.use_school)) if on]

    def ratios(self, values: Dict[str, float]) -> Tuple[float, float]:
        return values.get('g2', 0.0), values.get('g3', 0.0)

    def solve(self, g2: float, g3: float, with_gradient: bool = False):
        b = self.blocks
        Q, logdet, grad_parts = b.quadratics(g2, g3, with_gradient)
        Qxx, Qxy, Qyy = _split(Q, b.p)
        chol = linalg.cho_factor(Qxx)
        beta = linalg.cho_solve(chol, Qxy)
        rss = float(Qyy - Qxy @ beta)
        logdet_x = 2.0 * float(np.log(np.diag(chol[0])).sum())
        return Q, logdet, logdet_x, chol, beta, rss, grad_parts

    def profiled(self, g2: float, g3: float, with_gradient: bool = False):
        """Profiled log-likelihood and its gradient with respect to (g2, g3)"""
        b = self.blocks
        dof = b.n - b.p
        _, logdet, logdet_x, chol, beta, rss, parts = self.solve(g2, g3, with_gradient)
        if rss <= 0:
            return -math.inf, None
        value = -0.5 * (dof * math.log(rss / dof) + logdet + logdet_x + dof * (1.0 + LOG_2PI))
        if not with_gradient:
            return value, None
        C_child, C_school, tr2, tr3 = parts
        a = np.append(-beta, 1.0)
        grads = {}
        for name, C, tr in (('g2', C_child, tr2), ('g3', C_school, tr3)):
            Cx = C[:, :b.p]
            d_rss = -float(((C @ a) ** 2).sum())
            d_logdet_x = -float(np.trace(linalg.cho_solve(chol, Cx.T @ Cx)))
            grads[name] = -0.5 * (dof * d_rss / rss + tr + d_logdet_x)
        return value, grads

    def objective(self, theta: np.ndarray, names: Sequence[str]):
        values = {n: math.exp(v) for n, v in zip(names, theta)}
        g2, g3 = self.ratios(values)
        value, grads = self.profiled(g2, g3, with_gradient=True)
        if not np.isfinite(value):
            return 1e300, np.zeros(len(names))
        grad = np.array([grads[n] * values[n] for n in names])
        return -value, -grad


def _projected_gradient(problem: _RemlProblem, values: Dict[str, float]) -> float:
    g2, g3 = problem.ratios(values)
    _, grads = problem.profiled(g2, g3, with_gradient=True)
    if grads is None:
        return math.inf
    norm = 0.0
    for name in problem.free:
        g = grads[name]
        if values.get(name, 0.0) == 0.0:
            g = max(g, 0.0)  # at the boundary only an ascent direction into the interior counts
        else:
            g *= values[name]
        norm += g * g
    return math.sqrt(norm)


def _optimize_subset(problem: _RemlProblem, names: List[str], start: Dict[str, float]):
    """
    Maximize over the log ratios of `names` with the other ratios fixed at exactly 0

    Returns:
        (ratios, loglik, settled) where settled means the simplex polish stopped on its step tolerance
    """
    if not names:
        value, _ = problem.profiled(0.0, 0.0)
        return {}, value, False
    theta = np.array([math.log(max(start.get(n, 1.0), 1e-6)) for n in names])
    result = optimize.minimize(problem.objective, theta, args=(names,), jac=True, method='L-BFGS-B',
                               bounds=[LOG_RATIO_BOUNDS] * len(names),
                               options={'maxiter': 500, 'ftol': 1e-15, 'gtol': 1e-10})
    theta = result.x
    settled = False
    values = {n: math.exp(v) for n, v in zip(names, theta)}
    if _projected_gradient(problem, values) >= GRAD_TOL:
        polish = optimize.minimize(lambda th: problem.objective(th, names)[0], theta, method='Nelder-Mead',
                                   options={'xatol': STEP_TOL, 'fatol': 1e-12, 'maxiter': 4000})
        if polish.fun <= result.fun:
            theta = np.clip(polish.x, *LOG_RATIO_BOUNDS)
            settled = bool(polish.success)
            values = {n: math.exp(v) for n, v in zip(names, theta)}
    g2, g3 = problem.ratios(values)
    return values, problem.profiled(g2, g3)[0], settled


def _maximize(problem: _RemlProblem) -> Tuple[Dict[str, float], float, bool]:
    """Interior optimum first, then every combination of ratios held exactly on the zero boundary"""
    best_values, best_ll, best_settled = _optimize_subset(problem, problem.free, {})
    for n_zero in range(1, len(problem.free) + 1):
        for zeroed in itertools.combinations(problem.free, n_zero):
            keep = [n for n in problem.free if n not in zeroed]
            values, ll, settled = _optimize_subset(problem, keep, best_values)
            if ll > best_ll + 1e-12:
                best_values, best_ll, best_settled = values, ll, settled
    full = {n: best_values.get(n, 0.0) for n in problem.free}
    converged = _projected_gradient(problem, full) < GRAD_TOL or best_settled
    return full, best_ll, converged


def _design(spec: LmmSpec, data: Union[LongDataset, WideDataset]):
    frame = data.frame
    y = to_array(frame, [spec.response])[:, 0]
    columns = [np.ones(len(frame))] + [term.evaluate(frame) for term in spec.fixed_terms]
    X = np.column_stack(columns)
    school = frame[SCHOOL].to_numpy()
    child = frame[CHILD].to_numpy()
    return X, y, school, child


def _check_rank(X: np.ndarray, labels: Sequence[str]):
    _, r, piv = linalg.qr(X, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > 1e-10 * diag[0]).sum()) if diag.size else 0
    if rank < X.shape[1]:
        raise RankDeficiencyError(f'collinear fixed-effects columns: {[labels[i] for i in sorted(piv[rank:])]}')


def _n_groups(blocks: _BlockStructure) -> Dict[str, int]:
    out = {}
    if blocks.use_school:
        out['school'] = blocks.n_school
    if blocks.use_child:
        out['school:child'] = blocks.n_child
    return out


def fit_lmm(spec: LmmSpec, data: Union[LongDataset, WideDataset]) -> LmmFit:
    """
    Fit the model by REML over non-negative variance components

    Args:
        spec: response, fixed terms and random intercepts
        data: dataset with no missing cells among referenced columns

    Returns:
        LmmFit; converged=False (never an exception) when the optimum cannot be certified

    Raises:
        RankDeficiencyError: if the fixed-effects design is collinear
    """
    X, y, school, child = _design(spec, data)
    labels = spec.column_labels
    _check_rank(X, labels)
    # response centred at its median; the offset returns in the intercept
    offset = float(np.median(y)) if y.size else 0.0
    y = y - offset
    blocks = _BlockStructure(X, y, school, child, spec.random_intercepts)
    problem = _RemlProblem(blocks)
    dof = blocks.n - blocks.p
    if dof <= 0:
        raise RankDeficiencyError(f'{blocks.n} rows cannot identify {blocks.p} fixed effects')

    beta_ols = linalg.lstsq(X, y)[0]
    resid_ols = y - X @ beta_ols
    if float(resid_ols @ resid_ols) <= 1e-20 * max(1.0, float(y @ y)):
        beta_ols[0] += offset
        return LmmFit(beta_hat=beta_ols, se_beta=np.zeros(blocks.p), cov_beta=np.zeros((blocks.p, blocks.p)),
                      vc=(0.0, 0.0, 0.0), reml_loglik=math.inf, converged=True, n_obs=blocks.n,
                      n_groups=_n_groups(blocks), column_labels=labels,
                      message='response is exactly explained by the fixed effects; variance components set to 0')

    values, loglik, converged = _maximize(problem)
    g2, g3 = problem.ratios(values)
    _, _, _, chol, beta, rss, _ = problem.solve(g2, g3)
    sigma1_sq = rss / dof
    cov_beta = sigma1_sq * linalg.cho_solve(chol, np.eye(blocks.p))
    beta = beta.copy()
    beta[0] += offset
    fit = LmmFit(beta_hat=beta, se_beta=np.sqrt(np.diag(cov_beta)), cov_beta=cov_beta,
                 vc=(g3 * sigma1_sq, g2 * sigma1_sq, sigma1_sq), reml_loglik=loglik, converged=converged,
                 n_obs=blocks.n, n_groups=_n_groups(blocks), column_labels=labels)
    if not converged:
        fit.message = 'REML optimum not certified by gradient or step criterion'
        logger.warning(f'LMM for {spec.response!r} did not converge (vc={fit.vc})')
    return fit


def _dense_reml(X: np.ndarray, y: np.ndarray, V: np.ndarray) -> float:
    try:
        chol = linalg.cho_factor(V)
    except linalg.LinAlgError:
        return -math.inf
    Vi_X = linalg.cho_solve(chol, X)
    Vi_y = linalg.cho_solve(chol, y)
    XtViX = X.T @ Vi_X
    try:
        cx = linalg.cho_factor(XtViX)
    except linalg.LinAlgError:
        return -math.inf
    beta = linalg.cho_solve(cx, X.T @ Vi_y)
    r = y - X @ beta
    quad = float(r @ linalg.cho_solve(chol, r))
    logdet_v = 2.0 * float(np.log(np.diag(chol[0])).sum())
    logdet_x = 2.0 * float(np.log(np.diag(cx[0])).sum())
    return -0.5 * (logdet_v + logdet_x + quad + (len(y) - X.shape[1]) * LOG_2PI)


def reml_objective(spec: LmmSpec, data: Union[LongDataset, WideDataset],
                   vc_candidate: Sequence[float]) -> float:
    """
    Restricted log-likelihood at vc_candidate = (sigma3^2, sigma2^2, sigma1^2)

    Equals log of the integral over beta (flat prior) of the marginal normal likelihood.
    Returns -inf when the marginal covariance is singular.
    """
    s3, s2, s1 = (float(v) for v in vc_candidate)
    if min(s3, s2, s1) < 0:
        raise ValueError(f'variance components must be non-negative, got {tuple(vc_candidate)}')
    X, y, school, child = _design(spec, data)
    blocks = _BlockStructure(X, y, school, child, spec.random_intercepts)
    s3 = s3 if blocks.use_school else 0.0
    s2 = s2 if blocks.use_child else 0.0
    if s1 == 0.0:
        # Ratio form needs sigma1 > 0; fall back to the dense marginal covariance
        z_school = (school[:, None] == school[None, :]).astype(float)
        same_child = z_school * (child[:, None] == child[None, :])
        V = s3 * z_school + s2 * same_child
        return _dense_reml(X, y, V)
    Q, logdet, _ = blocks.quadratics(s2 / s1, s3 / s1)
    Qxx, Qxy, Qyy = _split(Q, blocks.p)
    try:
        chol = linalg.cho_factor(Qxx)
    except linalg.LinAlgError:
        return -math.inf
    beta = linalg.cho_solve(chol, Qxy)
    rss = float(Qyy - Qxy @ beta)
    logdet_x = 2.0 * float(np.log(np.diag(chol[0])).sum())
    dof = blocks.n - blocks.p
    return -0.5 * (dof * math.log(s1) + logdet + logdet_x + rss / s1 + dof * LOG_2PI)
