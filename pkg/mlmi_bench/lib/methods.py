"""
Methods - Registry of imputation method labels per analysis model, and dispatch to the imputers
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

from mlmi_bench.lib.data_model import LongDataset, reshape_wide
from mlmi_bench.lib.dgp import AnalysisModel
from mlmi_bench.lib.imputers_conventional import (ImputationConfig, ImputedSet, Variant, derive_jav_columns,
                                                  impute_fcs_1l_di_wide, impute_fcs_2l_wide,
                                                  impute_jm_1l_di_wide, impute_jm_2l_wide)
from mlmi_bench.lib.imputers_smc import (CovariateModelPlan, SubstantiveModelSpec, impute_smc_jm_2l_di,
                                         impute_smc_jm_3l, impute_smc_sm_2l_di)

logger = logging.getLogger(__name__)

REFERENCE_METHOD = 'before-deletion'


class UnknownMethodError(ValueError):
    """Label is not a registered imputation method"""


class MethodModelMismatchError(ValueError):
    """Registered method that does not apply to the requested analysis model"""


@dataclass(frozen=True)
class MethodSpec:
    """
    Parsed method label

    family selects the sampler settings of a preset: JM, FCS, SMC-JM-2L, SMC-SM, SMC-JM-3L,
    or REFERENCE for the complete-data analysis.
    """
    label: str
    base: str
    family: str
    variant: Variant = Variant.PLAIN

    @property
    def jav(self) -> bool:
        return self.variant == Variant.JAV

    @property
    def wide(self) -> bool:
        return self.base.endswith('-wide')


BASE_METHODS: Dict[str, str] = {
    'JM-1L-DI-wide': 'JM',
    'FCS-1L-DI-wide': 'FCS',
    'JM-2L-wide': 'JM',
    'FCS-2L-wide': 'FCS',
    'SMC-JM-2L-DI': 'SMC-JM-2L',
    'SMC-SM-2L-DI': 'SMC-SM',
    'SMC-JM-3L': 'SMC-JM-3L',
}

SUFFIXES: Dict[str, Variant] = {
    '-JAV': Variant.JAV,
    '-passive_c': Variant.PASSIVE_C,
    '-passive_all': Variant.PASSIVE_ALL,
    '-passive': Variant.PASSIVE,
}

SMC_METHODS = ['SMC-JM-2L-DI', 'SMC-SM-2L-DI', 'SMC-JM-3L']

METHOD_REGISTRY: Dict[AnalysisModel, List[str]] = {
    AnalysisModel.MODEL1: ['JM-1L-DI-wide', 'FCS-1L-DI-wide', 'JM-2L-wide', 'FCS-2L-wide'] + SMC_METHODS,
    AnalysisModel.MODEL2: ['JM-1L-DI-wide', 'JM-1L-DI-wide-JAV', 'FCS-1L-DI-wide', 'FCS-1L-DI-wide-passive_c',
                           'FCS-1L-DI-wide-passive_all', 'JM-2L-wide-JAV', 'FCS-2L-wide-passive_c',
                           'FCS-2L-wide-passive_all'] + SMC_METHODS,
    AnalysisModel.MODEL3: ['JM-1L-DI-wide', 'JM-1L-DI-wide-JAV', 'FCS-1L-DI-wide', 'FCS-1L-DI-wide-passive',
                           'JM-2L-wide-JAV', 'FCS-2L-wide-passive'] + SMC_METHODS,
}

_IMPUTERS: Dict[str, Callable] = {
    'JM-1L-DI-wide': impute_jm_1l_di_wide,
    'FCS-1L-DI-wide': impute_fcs_1l_di_wide,
    'JM-2L-wide': impute_jm_2l_wide,
    'FCS-2L-wide': impute_fcs_2l_wide,
}


def known_labels() -> List[str]:
    labels = []
    for registry in METHOD_REGISTRY.values():
        labels.extend(l for l in registry if l not in labels)
    return labels + [REFERENCE_METHOD]


def parse_method(label: str) -> MethodSpec:
    """
    Split a label into base method and variant

    Raises:
        UnknownMethodError: if the label is not registered for any model
    """
    if label == REFERENCE_METHOD:
        return MethodSpec(label, label, 'REFERENCE')
    if label not in known_labels():
        raise UnknownMethodError(f'unknown method {label!r}; registered: {", ".join(known_labels())}')
    for suffix, variant in SUFFIXES.items():
        if label.endswith(suffix) and label[:-len(suffix)] in BASE_METHODS:
            base = label[:-len(suffix)]
            return MethodSpec(label, base, BASE_METHODS[base], variant)
    return MethodSpec(label, label, BASE_METHODS[label])


def resolve_methods(model: AnalysisModel, requested: str) -> List[str]:
    """
    Turn a comma list (or 'all') into labels in registration order

    Raises:
        UnknownMethodError: unregistered label
        MethodModelMismatchError: label registered only for other models
    """
    model = AnalysisModel(model)
    registry = METHOD_REGISTRY[model]
    names = [n.strip() for n in requested.split(',') if n.strip()]
    if not names:
        raise UnknownMethodError('no methods requested')
    if names == ['all']:
        return list(registry)
    extra = []
    for name in names:
        if name == 'all':
            extra.extend(registry)
            continue
        parse_method(name)
        if name != REFERENCE_METHOD and name not in registry:
            raise MethodModelMismatchError(f'method {name!r} does not apply to {model.value}; '
                                           f'registered: {", ".join(registry)}')
    order = registry + [REFERENCE_METHOD]
    selected = set(names) | set(extra)
    selected.discard('all')
    return [label for label in order if label in selected]


def impute(label: str, data: LongDataset, model: SubstantiveModelSpec, cfg: ImputationConfig,
           plan: Optional[CovariateModelPlan] = None) -> ImputedSet:
    """
    Run one registered method on an incomplete long dataset

    Wide methods reshape first (and append derived columns for JAV); SMC methods stay long.
    """
    spec = parse_method(label)
    if spec.family == 'REFERENCE':
        raise UnknownMethodError(f'{label!r} analyses complete data and has no imputation step')
    cfg = replace(cfg, variant=spec.variant)
    if spec.base == 'SMC-JM-2L-DI':
        return impute_smc_jm_2l_di(data, model, cfg)
    if spec.base == 'SMC-SM-2L-DI':
        return impute_smc_sm_2l_di(data, model, plan, cfg)
    if spec.base == 'SMC-JM-3L':
        return impute_smc_jm_3l(data, model, cfg)
    wide = reshape_wide(data)
    if spec.jav:
        wide = derive_jav_columns(wide, model)
    if spec.family == 'FCS':
        return _IMPUTERS[spec.base](wide, cfg, model=model)
    return _IMPUTERS[spec.base](wide, cfg)
