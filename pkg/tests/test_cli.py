import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml

import cli.main as cli_main
import pipeline.stages as stages
from cli.main import build_parser, main
from conftest import small_config_dict
from pipeline.checkpoint import load_checkpoint
from utils.file_utils import read_json_file, validate_run_folder


def _write_config(tmp_path, **overrides):
    path = tmp_path / 'config.yaml'
    path.write_text(yaml.safe_dump(small_config_dict(**overrides), allow_unicode=True), encoding='utf-8')
    return str(path)


@pytest.fixture(scope='module')
def cli_run(tmp_path_factory):
    """CLI から 4 ステージを実行した出力フォルダ"""
    root = tmp_path_factory.mktemp('cli')
    out = str(root / 'run')
    code = main(['run', '--config', _write_config(root), '--output-dir', out])
    return code, out


class TestGenData:

    def test_henon_default_size(self, tmp_path, capsys):
        out = str(tmp_path / 'henon')
        assert main(['gen-data', '--toy', 'henon', '--seed', '7', '--out', out]) == 0
        train = read_json_file(os.path.join(out, 'train.json'))
        assert train['n'] == 14000
        assert train['counts'] == [2000] * 7
        assert read_json_file(os.path.join(out, 'validation.json'))['n'] == 3500
        assert os.path.exists(os.path.join(out, 'dataset.yaml'))
        assert json.loads(capsys.readouterr().out)['train']['サンプル数'] == 14000

    def test_extreme_toy(self, tmp_path):
        out = str(tmp_path / 'extreme')
        assert main(['gen-data', '--extreme', '--classes', '50', '--per-class', '5', '--out', out]) == 0
        header = read_json_file(os.path.join(out, 'train.json'))
        assert (header['n'], header['M']) == (250, 50)

    def test_kind_is_required(self, tmp_path):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['gen-data', '--out', str(tmp_path)])


class TestSchema:

    def test_prints_schema(self, capsys):
        assert main(['schema']) == 0
        schema = json.loads(capsys.readouterr().out)
        assert 'lam' in schema['properties']


class TestRun:

    def test_outputs(self, cli_run):
        code, out = cli_run
        assert code == 0
        for name in ('merged_config.json', 'status.json', 'metrics.json', 'learning_curve.csv',
                     'per_class_f1.csv', 'sources.csv', 'run.log'):
            assert os.path.exists(os.path.join(out, name)), name
        assert not os.path.exists(os.path.join(out, 'FAILED'))
        status = read_json_file(os.path.join(out, 'status.json'))
        assert status['state'] == 'completed'
        assert status['completed_stages'] == ['pretrain', 'demix', 'augment', 'refine']
        assert validate_run_folder(out)['valid']

    def test_result_files(self, cli_run):
        _, out = cli_run
        curve = pd.read_csv(os.path.join(out, 'learning_curve.csv'))
        assert list(curve.columns) == ['stage', 'epoch', 'split', 'loss', 'top1']
        f1 = pd.read_csv(os.path.join(out, 'per_class_f1.csv'))
        assert f1['frequency'].tolist()[0] == 10
        sources = pd.read_csv(os.path.join(out, 'sources.csv'))
        assert set(sources['origin']) == {'real', 'synthetic'}
        assert set(sources.loc[sources['origin'] == 'synthetic', 'label']) == {0}
        merged = read_json_file(os.path.join(out, 'merged_config.json'))
        assert merged['dataset']['minority_count'] == 10

    def test_checkpoints_and_inspect(self, cli_run, capsys):
        _, out = cli_run
        folder = os.path.join(out, 'checkpoints', '4_refine')
        assert main(['inspect-checkpoint', folder, '--verify']) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary['verified'] is True
        assert summary['stage'] == 'refine'

    def test_eval_on_dump(self, cli_run, tmp_path, capsys):
        _, out = cli_run
        data = str(tmp_path / 'data')
        assert main(['gen-data', '--toy', 'henon', '--samples-per-class', '40', '--out', data]) == 0
        capsys.readouterr()
        metrics = str(tmp_path / 'eval.json')
        assert main(['eval', '--checkpoint', os.path.join(out, 'checkpoints', '4_refine'), '--data', data,
                     '--out', metrics]) == 0
        report = read_json_file(metrics)
        assert 0.0 <= report['top1'] <= 1.0
        assert sum(report['class_support']) == 70

    def test_eval_rejects_intermediate_checkpoint(self, cli_run, tmp_path):
        _, out = cli_run
        data = str(tmp_path / 'data')
        main(['gen-data', '--toy', 'henon', '--samples-per-class', '8', '--out', data])
        assert main(['eval', '--checkpoint', os.path.join(out, 'checkpoints', '2_demix'), '--data', data]) == 1

    def test_resume_from_demix(self, cli_run, tmp_path):
        _, out = cli_run
        resumed = str(tmp_path / 'resumed')
        code = main(['run', '--config', _write_config(tmp_path), '--output-dir', resumed, '--stages', '3,4',
                     '--resume', os.path.join(out, 'checkpoints', '2_demix')])
        assert code == 0
        first = read_json_file(os.path.join(out, 'metrics.json'))
        second = read_json_file(os.path.join(resumed, 'metrics.json'))
        assert second['top1'] == first['top1']

    def test_resume_without_stages_continues_after_checkpoint(self, cli_run, tmp_path):
        _, out = cli_run
        demix = os.path.join(out, 'checkpoints', '2_demix')
        resumed = str(tmp_path / 'resumed')
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', resumed, '--resume', demix]) == 0
        assert sorted(os.listdir(os.path.join(resumed, 'checkpoints'))) == ['3_augment', '4_refine']
        status = read_json_file(os.path.join(resumed, 'status.json'))
        assert status['completed_stages'] == ['pretrain', 'demix', 'augment', 'refine']
        before = load_checkpoint(demix)
        after = load_checkpoint(os.path.join(resumed, 'checkpoints', '4_refine'))
        for name in ('encoder', 'feature_predictor', 'flow'):
            for param, value in before.module(name).state_dict().items():
                np.testing.assert_array_equal(after.module(name).state_dict()[param], value)

    def test_unexpected_error_in_stage_writes_marker(self, tmp_path, monkeypatch):
        def broken_augment(state, config, data):
            raise ValueError("拡張に失敗")

        monkeypatch.setitem(stages.STAGE_FUNCTIONS, 'augment', broken_augment)
        out = str(tmp_path / 'broken')
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', out]) == 1
        with open(os.path.join(out, 'FAILED'), encoding='utf-8') as f:
            assert f.read().startswith('ValueError')
        status = read_json_file(os.path.join(out, 'status.json'))
        assert status['state'] == 'failed'
        assert status['error_type'] == 'ValueError'
        assert status['completed_stages'] == ['pretrain', 'demix']
        assert os.path.exists(os.path.join(out, 'checkpoints', '2_demix', 'manifest.json'))

    def test_unexpected_error_before_stages(self, tmp_path, monkeypatch):
        def broken_data(config):
            raise ValueError("データ準備に失敗")

        monkeypatch.setattr(cli_main, 'build_run_data', broken_data)
        out = str(tmp_path / 'no-data')
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', out]) == 1
        assert os.path.exists(os.path.join(out, 'FAILED'))
        status = read_json_file(os.path.join(out, 'status.json'))
        assert (status['state'], status['completed_stages']) == ('failed', [])

    def test_failed_run_writes_marker(self, tmp_path):
        out = str(tmp_path / 'failed')
        raw_overrides = ['--set', 'dataset.minority_count=1000']
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', out] + raw_overrides) == 1
        assert os.path.exists(os.path.join(out, 'FAILED'))
        status = read_json_file(os.path.join(out, 'status.json'))
        assert status['state'] == 'failed'
        assert status['error_type'] == 'ConfigurationError'

    def test_invalid_config(self, tmp_path):
        out = str(tmp_path / 'invalid')
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', out,
                     '--set', 'variant=smote']) == 1
        assert not os.path.exists(out)

    def test_bad_stage_list(self, tmp_path):
        assert main(['run', '--config', _write_config(tmp_path), '--stages', '1,5']) == 1

    def test_flags_override_config(self, tmp_path):
        out = str(tmp_path / 'erm')
        assert main(['run', '--config', _write_config(tmp_path), '--output-dir', out, '--variant', 'erm',
                     '--set', 'train.epochs=1']) == 0
        merged = read_json_file(os.path.join(out, 'merged_config.json'))
        assert merged['variant'] == 'erm'
        assert merged['train']['epochs'] == 1
        assert read_json_file(os.path.join(out, 'status.json'))['completed_stages'] == ['pretrain']
