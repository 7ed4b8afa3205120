"""
Tests for the method registry and dispatch
"""
import numpy as np
import pytest

from mlmi_bench.lib.dgp import AnalysisModel
from mlmi_bench.lib.imputers_conventional import Variant
from mlmi_bench.lib.imputers_smc import SubstantiveModelSpec
from mlmi_bench.lib.methods import (METHOD_REGISTRY, REFERENCE_METHOD, MethodModelMismatchError,
                                    UnknownMethodError, impute, known_labels, parse_method, resolve_methods)


class TestRegistry:

    @pytest.mark.parametrize('model,count', [
        (AnalysisModel.MODEL1, 7),
        (AnalysisModel.MODEL2, 11),
        (AnalysisModel.MODEL3, 9),
    ])
    def test_method_counts(self, model, count):
        assert len(METHOD_REGISTRY[model]) == count
        assert len(resolve_methods(model, 'all')) == count

    def test_reference_is_known(self):
        assert REFERENCE_METHOD in known_labels()

    @pytest.mark.parametrize('label,base,family,variant', [
        ('JM-1L-DI-wide', 'JM-1L-DI-wide', 'JM', Variant.PLAIN),
        ('JM-2L-wide-JAV', 'JM-2L-wide', 'JM', Variant.JAV),
        ('FCS-1L-DI-wide-passive_all', 'FCS-1L-DI-wide', 'FCS', Variant.PASSIVE_ALL),
        ('FCS-2L-wide-passive', 'FCS-2L-wide', 'FCS', Variant.PASSIVE),
        ('SMC-JM-3L', 'SMC-JM-3L', 'SMC-JM-3L', Variant.PLAIN),
    ])
    def test_parse(self, label, base, family, variant):
        spec = parse_method(label)
        assert (spec.base, spec.family, spec.variant) == (base, family, variant)

    def test_wide_and_jav_flags(self):
        assert parse_method('JM-1L-DI-wide-JAV').jav
        assert parse_method('JM-1L-DI-wide-JAV').wide
        assert not parse_method('SMC-SM-2L-DI').wide

    def test_unknown_label(self):
        with pytest.raises(UnknownMethodError, match='MICE'):
            parse_method('MICE')


class TestResolve:

    def test_registration_order_with_reference_last(self):
        labels = resolve_methods(AnalysisModel.MODEL2, f'{REFERENCE_METHOD},SMC-JM-3L,JM-1L-DI-wide')
        assert labels == ['JM-1L-DI-wide', 'SMC-JM-3L', REFERENCE_METHOD]

    def test_mismatch(self):
        with pytest.raises(MethodModelMismatchError, match='model1'):
            resolve_methods(AnalysisModel.MODEL1, 'JM-1L-DI-wide-JAV')

    def test_passive_c_not_for_model3(self):
        with pytest.raises(MethodModelMismatchError):
            resolve_methods(AnalysisModel.MODEL3, 'FCS-1L-DI-wide-passive_c')

    def test_empty_request(self):
        with pytest.raises(UnknownMethodError):
            resolve_methods(AnalysisModel.MODEL1, ' , ')


class TestDispatch:

    def test_reference_has_no_imputation(self, amputed_data, quick_config):
        with pytest.raises(UnknownMethodError):
            impute(REFERENCE_METHOD, amputed_data, SubstantiveModelSpec.for_model('model1'), quick_config)

    @pytest.mark.parametrize('label', ['JM-1L-DI-wide-JAV', 'FCS-2L-wide-passive_c', 'SMC-SM-2L-DI'])
    def test_model2_methods_return_long_datasets(self, label, make_data, quick_config):
        _, amputed = make_data(model='model2')
        result = impute(label, amputed, SubstantiveModelSpec.for_model('model2'), quick_config)
        assert result.m == quick_config.m
        for data in result.to_long():
            assert data.n_rows == amputed.n_rows
            assert not np.isnan(data.column_with_nan('dep')).any()
        if parse_method(label).jav:
            assert 'depxses' in result.to_long()[0].value_names
