import numpy as np
import pytest

from conftest import make_config, small_config_dict, write_idx_images, write_idx_labels
from data.dataset import Dataset, DatasetConverter
from data.toy import ToySpec, generate_toy
from pipeline.checkpoint import load_checkpoint
from pipeline.stages import (STAGES, RunVariant, build_run_data, evaluate_state, run_fingerprint, run_pipeline,
                             stage1_pretrain, stage3_augment, stage4_refine, synthetic_count)
from utils.errors import ConfigurationError, IntegrityError, StageOrderError, UsageError


class TestRunData:

    def test_henon_minority_is_subsampled(self, small_config):
        data = build_run_data(small_config)
        assert data.train.class_counts[0] == 10
        assert data.minority_classes == (0,)
        assert data.train.metadata['class_balance']['少数クラス数'] == 1
        assert data.holdout is None

    def test_dump_with_continuous_targets(self, tmp_path):
        rng = np.random.default_rng(0)
        converter = DatasetConverter()
        for split, n in (('train', 90), ('validation', 30)):
            features = rng.standard_normal((n, 2))
            ds = Dataset(features=features, labels=np.zeros(n), num_classes=1, split=split,
                         targets=features[:, 0] + 0.1 * rng.standard_normal(n))
            converter.dump(ds, str(tmp_path), split)
        config = make_config(dataset={'kind': 'dump', 'path': str(tmp_path), 'continuous_bins': 3})
        data = build_run_data(config)
        assert data.num_classes == 3
        assert data.train.class_counts.tolist() == [30, 30, 30]
        assert len(data.train.metadata['bin_edges']) == 2

    def test_broken_dump(self, tmp_path):
        with pytest.raises(ConfigurationError, match="ダンプ"):
            build_run_data(make_config(dataset={'kind': 'dump', 'path': str(tmp_path)}))

    def test_mnist_idx_files(self, tmp_path):
        rng = np.random.default_rng(1)

        def write(prefix, per_class):
            labels = np.repeat(np.arange(10), per_class)
            pixels = rng.integers(0, 256, size=(labels.size, 3, 3))
            return (write_idx_images(tmp_path / f'{prefix}-images', pixels),
                    write_idx_labels(tmp_path / f'{prefix}-labels', labels))

        train_images, train_labels = write('train', 12)
        test_images, test_labels = write('test', 3)
        dataset = {'kind': 'mnist', 'mnist_train_images': train_images, 'mnist_train_labels': train_labels,
                   'mnist_test_images': test_images, 'mnist_test_labels': test_labels,
                   'minority_classes': [4], 'minority_count': 3, 'majority_count': 8,
                   'validation_per_class': 5}
        data = build_run_data(make_config(dataset=dataset, model={'encoder_hidden': [4], 'latent_dim': 2,
                                                                  'predictor_hidden': [4],
                                                                  'source_predictor_hidden': [4]}))
        assert data.train.class_counts.tolist() == [8, 8, 8, 8, 3, 8, 8, 8, 8, 8]
        # 検証件数はテストデータの最少クラスに合わせて減らす
        assert data.validation.class_counts.tolist() == [3] * 10
        assert data.train.p == 9

    def test_oracle_needs_henon(self):
        config = make_config(augment_mode='oracle',
                             dataset={'kind': 'extreme', 'classes': 4, 'per_class': 5, 'validation_per_class': 3})
        with pytest.raises(ConfigurationError, match="oracle"):
            build_run_data(config)


class TestStagedRun:

    def test_all_stages_complete(self, henon_run):
        state, report = henon_run.state, henon_run.report
        assert state.stage == 'refine'
        assert state.completed_stages == list(STAGES)
        assert 0.0 <= report.top1 <= 1.0
        assert np.isfinite(report.nll)
        assert len(report.f1_per_class) == 7
        assert 0 in state.decorrelation_trace

    def test_minority_sources_are_augmented(self, henon_run):
        state = henon_run.state
        assert set(state.augmented) == {0}
        assert state.augmented[0].size == synthetic_count(henon_run.config, henon_run.data)
        assert state.real_sources[0].size == 10
        assert state.augmented[0].checkpoint_id == state.checkpoint_id()

    def test_learning_curve_rows(self, henon_run):
        stages = {row['stage'] for row in henon_run.state.history}
        assert stages == {'pretrain', 'demix', 'refine'}
        assert {row['split'] for row in henon_run.state.history} == {'train', 'validation'}

    def test_checkpoint_per_stage(self, henon_run):
        for number, stage in enumerate(STAGES, start=1):
            loaded = load_checkpoint(f"{henon_run.checkpoint_dir}/{number}_{stage}", expected_stage=stage)
            assert loaded.stage == stage

    def test_evaluate_state_matches_report(self, henon_run):
        report = evaluate_state(henon_run.state, henon_run.data.validation)
        assert report.nll == pytest.approx(henon_run.report.nll)
        assert report.top1 == henon_run.report.top1

    def test_same_seed_same_fingerprint(self, henon_run):
        state, _ = run_pipeline(henon_run.config, data=build_run_data(henon_run.config))
        assert run_fingerprint(state) == run_fingerprint(henon_run.state)

    def test_partial_run_then_resume(self, henon_run):
        config = henon_run.config
        first, report = run_pipeline(config, data=henon_run.data, stages=[1, 2])
        assert first.stage == 'demix'
        assert report.top1 is None
        resumed, _ = run_pipeline(config, data=henon_run.data, stages=[3, 4], state=first)
        assert run_fingerprint(resumed) == run_fingerprint(henon_run.state)


class TestStageOrder:

    def test_augment_after_pretrain_is_rejected(self, small_config):
        data = build_run_data(small_config)
        state = stage1_pretrain(small_config, data)
        with pytest.raises(StageOrderError):
            stage3_augment(state, small_config, data)

    def test_refine_without_state(self, small_config):
        with pytest.raises(UsageError):
            stage4_refine(None, small_config, build_run_data(small_config))

    def test_refine_rejects_foreign_source_sets(self, henon_run):
        state = load_checkpoint(f"{henon_run.checkpoint_dir}/3_augment")
        state.augmented[0].checkpoint_id = 'other-run'
        with pytest.raises(IntegrityError):
            stage4_refine(state, henon_run.config, henon_run.data)

    def test_majority_only_needs_three_classes(self):
        config = make_config(dataset={'kind': 'extreme', 'classes': 2, 'per_class': 5, 'validation_per_class': 3})
        with pytest.raises(ConfigurationError, match="3 以上"):
            run_pipeline(config)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            RunVariant(kind='smote')


class TestBaselines:

    @pytest.mark.parametrize('variant', ['erm', 'iw'])
    def test_baseline_stops_after_pretrain(self, variant, tmp_path):
        config = make_config(variant=variant, stages=[1, 2, 3, 4])
        state, report = run_pipeline(config, checkpoint_dir=str(tmp_path))
        assert state.completed_stages == ['pretrain']
        assert 'flow' not in state.modules
        assert 0.0 <= report.top1 <= 1.0
        assert (tmp_path / '1_pretrain' / 'manifest.json').exists()

    def test_baselines_train_on_all_classes(self):
        # 多数クラスのみの事前学習は ECRT 専用なので 2 クラスでも動く
        config = make_config(variant='erm',
                             dataset={'kind': 'extreme', 'classes': 2, 'per_class': 5, 'validation_per_class': 3})
        _, report = run_pipeline(config)
        assert len(report.f1_per_class) == 2


class TestVariants:

    def test_lambda_zero_skips_augmentation(self):
        state, report = run_pipeline(make_config(lam=0.0))
        assert state.augmented == {}
        assert report.top1 is not None

    @pytest.mark.slow
    def test_fdv_objective(self):
        state, report = run_pipeline(make_config(objective='fdv'))
        assert 'log_tau' in state.module('critic').parameters()
        assert np.isfinite(report.nll)

    @pytest.mark.slow
    def test_multi_prior_samples_from_learned_prior(self):
        state, _ = run_pipeline(make_config(variant='ecrt-multi'))
        assert state.module('prior').mode == 'per_class'
        assert state.augmented[0].size > 0

    @pytest.mark.slow
    def test_parametric_with_fixed_count(self):
        state, _ = run_pipeline(make_config(augment_mode='parametric', synthetic_count=25))
        assert state.augmented[0].size == 25

    @pytest.mark.slow
    def test_oracle_uses_holdout(self):
        config = make_config(augment_mode='oracle')
        data = build_run_data(config)
        assert data.holdout.class_counts.tolist() == [2000] * 7
        state, _ = run_pipeline(config, data=data)
        assert state.augmented[0].size == synthetic_count(config, data)

    @pytest.mark.slow
    def test_feature_space_records_roundtrip(self):
        state, _ = run_pipeline(make_config(augment_mode='feature-space'))
        assert len(state.feature_batches) == 1
        assert np.all(np.isfinite(state.feature_batches[0].roundtrip_error))
        assert 'augment' in state.quality

    @pytest.mark.slow
    def test_extreme_toy_treats_every_class_as_minority(self):
        config = make_config(dataset={'kind': 'extreme', 'classes': 6, 'per_class': 5, 'validation_per_class': 3})
        data = build_run_data(config)
        assert data.minority_classes == tuple(range(6))
        state, report = run_pipeline(config, data=data)
        assert set(state.augmented) == set(range(6))
        assert len(report.f1_per_class) == 6

    @pytest.mark.slow
    def test_mlp_encoder_on_wider_features(self, tmp_path):
        spec = ToySpec(means=np.eye(3, 4) * 3.0, spreads=np.ones((3, 4)), per_class=30, mixing='none')
        converter = DatasetConverter()
        converter.dump(generate_toy(spec, seed=0), str(tmp_path), 'train')
        validation = generate_toy(spec, seed=1)
        validation.split = 'validation'
        converter.dump(validation, str(tmp_path), 'validation')
        raw = small_config_dict(dataset={'kind': 'dump', 'path': str(tmp_path)})
        raw['model']['encoder_hidden'] = [6]
        config = make_config(**raw)
        state, report = run_pipeline(config)
        assert state.module('encoder').kind == 'mlp'
        assert len(report.f1_per_class) == 3
