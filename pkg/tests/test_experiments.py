import numpy as np
import pandas as pd
import pytest

from pipeline.experiments import (aggregate_mean_sem, epochs_to_threshold, mmd_mode_comparison, toy_class_sources,
                                  unbiasedness_check)
from utils.errors import ConfigurationError, UsageError


class TestToyClassSources:

    def test_recovers_class_gaussian(self):
        sources = toy_class_sources(0, 400, seed=3)
        assert sources.shape == (400, 2)
        np.testing.assert_allclose(sources.mean(axis=0), [-0.5, -1.0], atol=0.1)
        np.testing.assert_allclose(sources.std(axis=0), [0.5, 0.5], rtol=0.15)

    def test_unknown_class(self):
        with pytest.raises(ConfigurationError):
            toy_class_sources(9, 10, seed=0)


class TestMmdComparison:

    def test_rows_per_mode_pool_and_seed(self):
        frame = mmd_mode_comparison(pool_sizes=[5, 20], seeds=[0, 1], reference_size=200,
                                    modes=['nonparametric', 'parametric', 'oracle'])
        assert len(frame) == 12
        assert list(frame.columns) == ['mode', 'pool_size', 'seed', 'mmd']
        assert (frame['mmd'] >= 0).all()

    def test_deterministic(self):
        first = mmd_mode_comparison(pool_sizes=[5], seeds=[4], reference_size=100)
        second = mmd_mode_comparison(pool_sizes=[5], seeds=[4], reference_size=100)
        pd.testing.assert_frame_equal(first, second)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            mmd_mode_comparison(modes=['mixup'])


class TestAggregate:

    def test_mean_and_standard_error(self):
        frame = pd.DataFrame({'group': ['a', 'a', 'b'], 'value': [1.0, 3.0, 5.0]})
        result = aggregate_mean_sem(frame, ['group'], ['value']).set_index('group')
        assert result.loc['a', 'value_mean'] == 2.0
        assert result.loc['a', 'value_sem'] == pytest.approx(1.0)
        assert np.isnan(result.loc['b', 'value_sem'])
        assert result['n'].tolist() == [2, 1]

    def test_empty_frame(self):
        result = aggregate_mean_sem(pd.DataFrame(columns=['group', 'value']), ['group'], ['value'])
        assert list(result.columns) == ['group', 'value_mean', 'value_sem', 'n']
        assert result.empty


class TestUnbiasedness:

    def test_augmented_risk_matches_plain_risk(self):
        result = unbiasedness_check(trials=200, pool_size=20, seed=0)
        combined = np.hypot(result['plain_se'], result['augmented_se'])
        assert abs(result['difference']) <= 4.0 * combined
        assert result['plain_mean'] > 0

    def test_needs_two_trials(self):
        with pytest.raises(UsageError):
            unbiasedness_check(trials=1)


class TestEpochsToThreshold:

    def test_loose_threshold_reached_in_first_epoch(self, henon_run):
        result = epochs_to_threshold(henon_run.state, henon_run.config, henon_run.data, threshold=10.0)
        assert result['source_space_epoch'] == 1
        assert result['feature_space_epoch'] == 1
        assert np.isfinite(result['source_space_best'])

    def test_unreachable_threshold(self, henon_run):
        result = epochs_to_threshold(henon_run.state, henon_run.config, henon_run.data, threshold=0.0)
        assert result['source_space_epoch'] is None
