"""
ステージ状態のチェックポイント

manifest.json（ステージ・設定ハッシュ・テンソル一覧と sha256）と、
テンソルごとのリトルエンディアン float64 ファイルで構成する。
"""

import json
import logging
import os
from typing import Dict, Optional

import numpy as np

from augment.source_augment import SourceSet
from autodiff.optim import AdamState
from flow.maf import MafFlow
from flow.prior import SourcePrior
from metrics.evaluation import MetricsReport
from nets.critics import FdvCritic, GclCritic
from nets.made import Made
from nets.mlp import Identity, Mlp
from nets.module import Module
from utils.errors import ConfigurationError, IntegrityError, StageOrderError
from utils.file_utils import ensure_dir, file_sha256, read_json_file, write_json_file

from .stages import STAGES, StageState

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
CHECKPOINT_FORMAT_VERSION = 1
BLOB_DTYPE = '<f8'

MODULE_KINDS = {
    Mlp.kind: Mlp,
    Identity.kind: Identity,
    Made.kind: Made,
    GclCritic.kind: GclCritic,
    FdvCritic.kind: FdvCritic,
    MafFlow.kind: MafFlow,
    SourcePrior.kind: SourcePrior,
}


def _blob_name(group: str, name: str) -> str:
    return f"{group}__{name}.f64"


def _write_tensor(folder: str, group: str, name: str, value: np.ndarray) -> Dict:
    array = np.ascontiguousarray(value, dtype=BLOB_DTYPE)
    filename = _blob_name(group, name)
    path = os.path.join(folder, filename)
    array.tofile(path)
    return {'file': filename, 'shape': list(array.shape), 'sha256': file_sha256(path)}


def _read_tensor(folder: str, entry: Dict) -> np.ndarray:
    path = os.path.join(folder, entry['file'])
    if not os.path.exists(path):
        raise IntegrityError(f"テンソルファイルがありません: {path}")
    if file_sha256(path) != entry['sha256']:
        raise IntegrityError(f"テンソルファイルのハッシュが一致しません: {path}")
    shape = tuple(int(v) for v in entry['shape'])
    expected = int(np.prod(shape)) * 8
    if os.path.getsize(path) != expected:
        raise IntegrityError(f"テンソルファイルのサイズが不正です: {path} ({os.path.getsize(path)} != {expected})")
    return np.fromfile(path, dtype=BLOB_DTYPE).astype(np.float64).reshape(shape)


def _module_entry(folder: str, name: str, module: Module) -> Dict:
    return {
        'spec': module.spec(),
        'tensors': {param: _write_tensor(folder, name, param, value)
                    for param, value in module.state_dict().items()},
    }


def _optimizer_entry(folder: str, stage: str, state: AdamState) -> Dict:
    return {
        'hyper': state.hyperparameters(),
        'm': {name: _write_tensor(folder, f"opt_{stage}_m", name, value) for name, value in sorted(state.m.items())},
        'v': {name: _write_tensor(folder, f"opt_{stage}_v", name, value) for name, value in sorted(state.v.items())},
    }


def _source_sets_entry(folder: str, group: str, sets: Dict[int, SourceSet]) -> Dict:
    return {str(label): {'checkpoint_id': s.checkpoint_id,
                         'tensor': _write_tensor(folder, group, f"class{label}", s.sources)}
            for label, s in sorted(sets.items())}


def save_checkpoint(state: StageState, folder: str) -> str:
    """
    状態をフォルダに保存

    同じ状態からは常にバイト単位で同一のファイル群ができる。

    Returns:
        manifest.json のパス
    """
    ensure_dir(folder)
    manifest = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'stage': state.stage,
        'config_hash': state.config_hash,
        'checkpoint_id': state.checkpoint_id(),
        'completed_stages': list(state.completed_stages),
        'epochs': dict(state.epochs),
        'history': list(state.history),
        'decorrelation_trace': {str(k): v for k, v in sorted(state.decorrelation_trace.items())},
        'modules': {name: _module_entry(folder, name, module) for name, module in sorted(state.modules.items())},
        'optimizers': {stage: _optimizer_entry(folder, stage, opt)
                       for stage, opt in sorted(state.optimizer_states.items()) if opt is not None},
        'source_sets': {
            'real': _source_sets_entry(folder, 'real', state.real_sources),
            'augmented': _source_sets_entry(folder, 'augmented', state.augmented),
        },
        'report': state.report.to_dict() if state.report is not None else None,
        'quality': state.quality,
    }
    path = write_json_file(os.path.join(folder, MANIFEST_NAME), manifest)
    logger.info(f"チェックポイントを保存しました: {folder} (ステージ {state.stage})")
    return path


def _build_module(name: str, entry: Dict, folder: str) -> Module:
    spec = entry.get('spec', {})
    kind = spec.get('kind')
    if kind not in MODULE_KINDS:
        raise IntegrityError(f"未知のモジュール種別です: {name} ({kind})")
    try:
        module = MODULE_KINDS[kind](**spec.get('kwargs', {}))
    except (TypeError, ConfigurationError) as e:
        raise IntegrityError(f"モジュール {name} を再構築できません: {e}")
    module.load_state_dict({param: _read_tensor(folder, t) for param, t in entry['tensors'].items()})
    module.eval()
    return module


def _build_optimizer(entry: Dict, folder: str) -> AdamState:
    hyper = entry['hyper']
    return AdamState(lr=hyper['lr'], beta1=hyper['beta1'], beta2=hyper['beta2'], eps=hyper['eps'],
                     step=int(hyper['step']),
                     m={name: _read_tensor(folder, t) for name, t in entry['m'].items()},
                     v={name: _read_tensor(folder, t) for name, t in entry['v'].items()})


def _build_source_sets(entries: Dict, folder: str) -> Dict[int, SourceSet]:
    return {int(label): SourceSet(label=int(label), sources=_read_tensor(folder, e['tensor']),
                                  checkpoint_id=e['checkpoint_id'])
            for label, e in entries.items()}


def report_from_dict(data: Optional[Dict]) -> Optional[MetricsReport]:
    if data is None:
        return None
    values = dict(data)
    values['decorrelation_trace'] = {int(k): v for k, v in values.get('decorrelation_trace', {}).items()}
    return MetricsReport(**values)


def load_checkpoint(folder: str, expected_stage: Optional[str] = None,
                    config_hash: Optional[str] = None) -> StageState:
    """
    チェックポイントを読み込む

    Args:
        folder: save_checkpoint の保存先
        expected_stage: 期待するステージ（異なれば StageOrderError）
        config_hash: 期待する設定ハッシュ（異なれば IntegrityError）

    Returns:
        StageState
    """
    manifest_path = os.path.join(folder, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise IntegrityError(f"チェックポイントのマニフェストがありません: {manifest_path}")
    try:
        manifest = read_json_file(manifest_path)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise IntegrityError(f"マニフェストを解析できません: {manifest_path}: {e}")

    if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise IntegrityError(f"未対応のチェックポイント形式です: {manifest.get('format_version')}")
    stage = manifest.get('stage')
    if stage not in STAGES:
        raise IntegrityError(f"未知のステージです: {stage}")
    if expected_stage is not None and stage != expected_stage:
        raise StageOrderError(f"チェックポイントのステージが一致しません: 期待 {expected_stage}, 実際 {stage}")
    if config_hash is not None and manifest.get('config_hash') != config_hash:
        raise IntegrityError(f"設定ハッシュが一致しません: {manifest.get('config_hash')} vs {config_hash}")

    try:
        state = StageState(
            stage=stage,
            config_hash=manifest['config_hash'],
            modules={name: _build_module(name, entry, folder) for name, entry in manifest['modules'].items()},
            optimizer_states={s: _build_optimizer(e, folder) for s, e in manifest['optimizers'].items()},
            epochs={k: int(v) for k, v in manifest['epochs'].items()},
            history=list(manifest['history']),
            decorrelation_trace={int(k): v for k, v in manifest['decorrelation_trace'].items()},
            real_sources=_build_source_sets(manifest['source_sets']['real'], folder),
            augmented=_build_source_sets(manifest['source_sets']['augmented'], folder),
            completed_stages=list(manifest['completed_stages']),
            report=report_from_dict(manifest.get('report')),
            quality=manifest.get('quality', {}),
        )
    except KeyError as e:
        raise IntegrityError(f"マニフェストに必要な項目がありません: {e}")

    if state.checkpoint_id() != manifest.get('checkpoint_id'):
        raise IntegrityError("パラメータから計算した checkpoint_id がマニフェストと一致しません")
    logger.info(f"チェックポイントを読み込みました: {folder} (ステージ {stage})")
    return state


def inspect_checkpoint(folder: str) -> Dict:
    """テンソルを読まずにマニフェストの要約を返す"""
    manifest = read_json_file(os.path.join(folder, MANIFEST_NAME))
    return {
        'stage': manifest.get('stage'),
        'config_hash': manifest.get('config_hash'),
        'checkpoint_id': manifest.get('checkpoint_id'),
        'completed_stages': manifest.get('completed_stages', []),
        'epochs': manifest.get('epochs', {}),
        'modules': {name: {'kind': entry['spec']['kind'],
                           'parameters': int(sum(np.prod(t['shape']) for t in entry['tensors'].values()))}
                    for name, entry in manifest.get('modules', {}).items()},
        'augmented_classes': sorted(int(k) for k in manifest.get('source_sets', {}).get('augmented', {})),
        'report': manifest.get('report'),
    }
