"""
テスト共通のフィクスチャ
"""

import copy
import struct
from types import SimpleNamespace

import numpy as np
import pytest

from cli.config import ExperimentConfig, config_with
from pipeline.stages import build_run_data, run_pipeline

# 数エポックで終わる小さな Hénon 実験
SMALL_CONFIG = {
    'name': 'test',
    'seed': 0,
    'dataset': {
        'kind': 'henon',
        'samples_per_class': 60,
        'minority_classes': [0],
        'minority_count': 10,
    },
    'model': {
        'latent_dim': 2,
        'predictor_hidden': [8],
        'source_predictor_hidden': [8],
    },
    'flow': {'n_blocks': 2, 'hidden': 8, 'n_hidden': 1},
    'critic': {'embed_dim': 4, 'hidden': [8]},
    'train': {'epochs': 2, 'batch_size': 64, 'patience': 2, 'lr': 1e-3},
}


def small_config_dict(**overrides):
    raw = copy.deepcopy(SMALL_CONFIG)
    raw.update(overrides)
    return raw


def make_config(overrides=None, **top_level) -> ExperimentConfig:
    """小さな設定に "train.epochs" 形式の上書きを適用"""
    config = ExperimentConfig.from_dict(small_config_dict(**top_level))
    return config_with(config, overrides) if overrides else config


def write_idx_images(path, pixels: np.ndarray, magic: int = 0x00000803, count=None) -> str:
    count = pixels.shape[0] if count is None else count
    with open(path, 'wb') as f:
        f.write(struct.pack('>IIII', magic, count, pixels.shape[1], pixels.shape[2]))
        f.write(pixels.astype(np.uint8).tobytes())
    return str(path)


def write_idx_labels(path, labels: np.ndarray, magic: int = 0x00000801) -> str:
    with open(path, 'wb') as f:
        f.write(struct.pack('>II', magic, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())
    return str(path)


@pytest.fixture
def small_config() -> ExperimentConfig:
    return make_config()


@pytest.fixture(scope='session')
def henon_run(tmp_path_factory):
    """4 ステージを通した実行結果（チェックポイント付き）"""
    config = make_config()
    data = build_run_data(config)
    checkpoint_dir = tmp_path_factory.mktemp('checkpoints')
    state, report = run_pipeline(config, data=data, checkpoint_dir=str(checkpoint_dir))
    return SimpleNamespace(config=config, data=data, state=state, report=report,
                           checkpoint_dir=str(checkpoint_dir))
