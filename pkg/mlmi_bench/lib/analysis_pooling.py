"""
Analysis Pooling - Fit the three-level substantive model to each completed dataset and pool by Rubin's rules
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from mlmi_bench.lib.data_model import LongDataset
from mlmi_bench.lib.imputers_conventional import ImputedSet
from mlmi_bench.lib.imputers_smc import SubstantiveModelSpec
from mlmi_bench.lib.lmm import LmmFit, fit_lmm

logger = logging.getLogger(__name__)

VC_NAMES = ('vc3', 'vc2', 'vc1')
CONFIDENCE = 0.95


class PoolingError(ValueError):
    """Too few imputations to pool"""


@dataclass
class PooledEstimate:
    """Rubin's rules summary for one coefficient"""
    q_bar: float
    w_bar: float
    b: float
    t: float
    df: float
    ci_low: float
    ci_high: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.t)

    @property
    def fraction_missing_info(self) -> float:
        """lambda = (1 + 1/m) B / T"""
        return (1 + 1 / self.m) * self.b / self.t if self.t > 0 else 0.0


@dataclass
class RepEstimate:
    """Per-imputation fits and pooled results for one (replication, method)"""
    estimates: Dict[str, np.ndarray]
    std_errors: Dict[str, np.ndarray]
    vc_per_imputation: np.ndarray
    pooled: Dict[str, PooledEstimate]
    vc: Tuple[float, float, float]
    n_nonconverged: int = 0
    messages: List[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.vc_per_imputation)

    def rows(self) -> List[Dict[str, object]]:
        """One result row per parameter (coefficients with intervals, variance components as points)"""
        out = []
        for name, pooled in self.pooled.items():
            out.append({'parameter': name, 'estimate': pooled.q_bar, 'se': pooled.se, 'df': pooled.df,
                        'ci_low': pooled.ci_low, 'ci_high': pooled.ci_high})
        for name, value in zip(VC_NAMES, self.vc):
            out.append({'parameter': name, 'estimate': value, 'se': float('nan'), 'df': float('nan'),
                        'ci_low': float('nan'), 'ci_high': float('nan')})
        return out


def fit_substantive(model: SubstantiveModelSpec, completed: LongDataset, jav: bool = False) -> LmmFit:
    """
    Fit the three-level analysis model (school and school:child random intercepts)

    Args:
        model: analysis model
        completed: dataset with no missing cells
        jav: use the imputed derived column in place of the recomputed interaction/square

    Returns:
        LmmFit
    """
    return fit_lmm(model.lmm_spec(jav=jav), completed)


def rubin_df_large_sample(m: int, b: float, t: float) -> float:
    """Original large-sample df (m - 1) / lambda^2; infinite when B = 0"""
    lam = (1 + 1 / m) * b / t if t > 0 else 0.0
    if lam == 0.0:
        return math.inf
    return (m - 1) / lam ** 2


def barnard_rubin_df(m: int, b: float, t: float, df_complete: float) -> float:
    """Small-sample df combining the large-sample df with the observed-data df"""
    lam = (1 + 1 / m) * b / t if t > 0 else 0.0
    df_observed = (df_complete + 1) / (df_complete + 3) * df_complete * (1 - lam)
    df_old = rubin_df_large_sample(m, b, t)
    if math.isinf(df_old):
        return df_observed
    return df_old * df_observed / (df_old + df_observed)


def rubin_pool(estimates: Sequence[float], std_errors: Sequence[float],
               df_complete: Optional[float] = None) -> PooledEstimate:
    """
    Combine m point estimates and standard errors

    Args:
        estimates: Q_1..Q_m
        std_errors: SE_1..SE_m
        df_complete: complete-data residual df; None uses the large-sample df

    Returns:
        PooledEstimate with a 95% t interval

    Raises:
        PoolingError: if m < 2
    """
    q = np.asarray(estimates, dtype=float)
    se = np.asarray(std_errors, dtype=float)
    m = len(q)
    if m < 2:
        raise PoolingError(f'Rubin pooling needs m >= 2 imputations, got {m}')
    if se.shape != q.shape:
        raise PoolingError(f'{m} estimates but {len(se)} standard errors')
    q_bar = float(q.mean())
    w_bar = float((se ** 2).mean())
    b = float(q.var(ddof=1))
    t = w_bar + (1 + 1 / m) * b
    df = rubin_df_large_sample(m, b, t) if df_complete is None else barnard_rubin_df(m, b, t, df_complete)
    half = float(stats.t.ppf(0.5 + CONFIDENCE / 2, df)) * math.sqrt(t)
    return PooledEstimate(q_bar, w_bar, b, t, df, q_bar - half, q_bar + half, m)


def pool_variance_components(vcs: Sequence[Sequence[float]]) -> Tuple[float, float, float]:
    """Componentwise mean of the (vc3, vc2, vc1) triples"""
    arr = np.asarray(vcs, dtype=float).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise PoolingError('no variance-component triples to pool')
    return tuple(float(v) for v in arr.mean(axis=0))


def analyse_imputed_set(model: SubstantiveModelSpec, imputed: ImputedSet, jav: bool = False) -> RepEstimate:
    """
    Fit every completed dataset, pool beta1/beta3 with Rubin's rules and the variance components by means
    """
    labels = model.target_labels(jav)
    fits = [fit_substantive(model, data, jav) for data in imputed.to_long()]
    estimates = {name: np.array([f.coef(label)[0] for f in fits]) for name, label in labels.items()}
    std_errors = {name: np.array([f.coef(label)[1] for f in fits]) for name, label in labels.items()}
    df_complete = float(fits[0].df_resid)
    pooled = {name: rubin_pool(estimates[name], std_errors[name], df_complete) for name in labels}
    vc_all = np.array([f.vc for f in fits])
    failed = [f for f in fits if not f.converged]
    return RepEstimate(estimates, std_errors, vc_all, pooled, pool_variance_components(vc_all),
                       n_nonconverged=len(failed), messages=[f.message for f in failed if f.message])


def analyse_complete(model: SubstantiveModelSpec, data: LongDataset) -> RepEstimate:
    """Single fit on data without missing cells; the interval uses the residual t df"""
    fit = fit_substantive(model, data)
    pooled = {}
    estimates, std_errors = {}, {}
    for name, label in model.target_labels().items():
        q, se = fit.coef(label)
        half = float(stats.t.ppf(0.5 + CONFIDENCE / 2, fit.df_resid)) * se
        pooled[name] = PooledEstimate(q, se ** 2, 0.0, se ** 2, float(fit.df_resid), q - half, q + half, 1)
        estimates[name], std_errors[name] = np.array([q]), np.array([se])
    return RepEstimate(estimates, std_errors, np.array([fit.vc]), pooled, tuple(fit.vc),
                       n_nonconverged=0 if fit.converged else 1,
                       messages=[] if fit.converged else [fit.message])
