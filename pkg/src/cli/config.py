"""
実験設定

設定ファイル（YAML または JSON）を読み込み、スキーマで検証してから
ExperimentConfig に変換する。既定値はハイパーパラメータ表に従う。
"""

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional

import yaml

from data.dataset import spec_hash
from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

VARIANTS = ('erm', 'iw', 'ecrt', 'ecrt-multi')
OBJECTIVES = ('gcl', 'fdv')
AUGMENT_MODES = ('nonparametric', 'parametric', 'oracle', 'feature-space')
DATASET_KINDS = ('henon', 'extreme', 'mnist', 'dump')
ENCODER_KINDS = ('auto', 'identity', 'mlp')
STAGE_NAMES = ('pretrain', 'demix', 'augment', 'refine')

# 実行結果に影響しない項目（設定ハッシュから除外）
_HASH_EXCLUDED = ('name', 'output_dir', 'stages', 'seeds', 'log_level', 'workers')


@dataclass
class DatasetConfig:
    kind: str = 'henon'
    path: Optional[str] = None
    mnist_train_images: Optional[str] = None
    mnist_train_labels: Optional[str] = None
    mnist_test_images: Optional[str] = None
    mnist_test_labels: Optional[str] = None
    samples_per_class: int = 2000
    spread_is_variance: bool = False
    classes: int = 1000
    per_class: int = 20
    minority_classes: List[int] = field(default_factory=list)
    minority_count: Optional[int] = None
    majority_count: Optional[int] = None
    validation_per_class: Optional[int] = None
    train_ratio: float = 0.8
    continuous_bins: Optional[int] = None


@dataclass
class ModelConfig:
    encoder: str = 'auto'
    encoder_hidden: List[int] = field(default_factory=lambda: [32, 32])
    latent_dim: int = 2
    predictor_hidden: List[int] = field(default_factory=lambda: [32])
    source_predictor_hidden: List[int] = field(default_factory=lambda: [32])
    dropout: float = 0.0


@dataclass
class FlowConfig:
    n_blocks: int = 4
    hidden: int = 128
    n_hidden: int = 2


@dataclass
class CriticConfig:
    embed_dim: int = 16
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    tau_init: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    patience: int = 20
    lr: float = 1e-3


@dataclass
class ExperimentConfig:
    """1 回の段階的実行の設定"""
    name: str = 'run'
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = 'runs/run'
    log_level: str = 'INFO'
    workers: Optional[int] = None
    variant: str = 'ecrt'
    objective: str = 'gcl'
    augment_mode: str = 'nonparametric'
    lam: float = 1e-3
    rho: float = 1e-2
    sigma: float = 0.5
    stages: List[int] = field(default_factory=lambda: [1, 2, 3, 4])
    majority_only_pretrain: bool = True
    weighted_refine_base: bool = False
    synthetic_count: Optional[int] = None
    std_floor: float = 1e-4
    without_replacement: bool = False
    stage_epochs: Dict[str, int] = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def prior_mode(self) -> str:
        return 'per_class' if self.variant == 'ecrt-multi' else 'shared'

    @property
    def is_baseline(self) -> bool:
        return self.variant in ('erm', 'iw')

    def train_for(self, stage: str) -> TrainConfig:
        """ステージ別のエポック数を反映した学習設定"""
        if stage in self.stage_epochs:
            return replace(self.train, epochs=int(self.stage_epochs[stage]))
        return self.train

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        data = self.to_dict()
        for key in _HASH_EXCLUDED:
            data.pop(key, None)
        return spec_hash(data)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> 'ExperimentConfig':
        result = validate_config(raw)
        if not result['valid']:
            raise ConfigurationError("設定が不正です:\n  " + "\n  ".join(result['errors']))
        return _build(cls, raw)


_SECTION_TYPES = {
    'dataset': DatasetConfig,
    'model': ModelConfig,
    'flow': FlowConfig,
    'critic': CriticConfig,
    'train': TrainConfig,
}


def _build(cls, raw: Mapping[str, Any]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        section = _SECTION_TYPES.get(f.name) if cls is ExperimentConfig else None
        kwargs[f.name] = _build(section, value) if section is not None else copy.deepcopy(value)
    return cls(**kwargs)


def _int(minimum=None, nullable=False):
    schema = {'type': ['integer', 'null'] if nullable else 'integer'}
    if minimum is not None:
        schema['minimum'] = minimum
    return schema


def _num(minimum=None, maximum=None, exclusive_minimum=None):
    schema = {'type': 'number'}
    if minimum is not None:
        schema['minimum'] = minimum
    if maximum is not None:
        schema['maximum'] = maximum
    if exclusive_minimum is not None:
        schema['exclusiveMinimum'] = exclusive_minimum
    return schema


_STR_OR_NULL = {'type': ['string', 'null']}
_INT_LIST = {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}}

CONFIG_SCHEMA: Dict[str, Any] = {
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'name': {'type': 'string'},
        'seed': _int(0),
        'seeds': {'type': 'array', 'items': _int(0)},
        'output_dir': {'type': 'string'},
        'log_level': {'type': 'string', 'enum': ['DEBUG', 'INFO', 'WARNING', 'ERROR']},
        'workers': _int(1, nullable=True),
        'variant': {'type': 'string', 'enum': list(VARIANTS)},
        'objective': {'type': 'string', 'enum': list(OBJECTIVES)},
        'augment_mode': {'type': 'string', 'enum': list(AUGMENT_MODES)},
        'lam': _num(0.0, 1.0),
        'rho': _num(0.0),
        'sigma': _num(exclusive_minimum=0.0),
        'stages': {'type': 'array', 'items': {'type': 'integer', 'enum': [1, 2, 3, 4]}},
        'majority_only_pretrain': {'type': 'boolean'},
        'weighted_refine_base': {'type': 'boolean'},
        'synthetic_count': _int(0, nullable=True),
        'std_floor': _num(exclusive_minimum=0.0),
        'without_replacement': {'type': 'boolean'},
        'stage_epochs': {'type': 'object', 'propertyNames': list(STAGE_NAMES),
                         'additionalProperties': _int(0)},
        'dataset': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'kind': {'type': 'string', 'enum': list(DATASET_KINDS)},
                'path': _STR_OR_NULL,
                'mnist_train_images': _STR_OR_NULL,
                'mnist_train_labels': _STR_OR_NULL,
                'mnist_test_images': _STR_OR_NULL,
                'mnist_test_labels': _STR_OR_NULL,
                'samples_per_class': _int(1),
                'spread_is_variance': {'type': 'boolean'},
                'classes': _int(2),
                'per_class': _int(1),
                'minority_classes': {'type': 'array', 'items': _int(0)},
                'minority_count': _int(1, nullable=True),
                'majority_count': _int(1, nullable=True),
                'validation_per_class': _int(1, nullable=True),
                'train_ratio': {'type': 'number', 'exclusiveMinimum': 0.0, 'exclusiveMaximum': 1.0},
                'continuous_bins': _int(2, nullable=True),
            },
        },
        'model': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'encoder': {'type': 'string', 'enum': list(ENCODER_KINDS)},
                'encoder_hidden': _INT_LIST,
                'latent_dim': _int(1),
                'predictor_hidden': _INT_LIST,
                'source_predictor_hidden': _INT_LIST,
                'dropout': {'type': 'number', 'minimum': 0.0, 'exclusiveMaximum': 1.0},
            },
        },
        'flow': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {'n_blocks': _int(1), 'hidden': _int(1), 'n_hidden': _int(1)},
        },
        'critic': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {'embed_dim': _int(1), 'hidden': _INT_LIST,
                           'tau_init': _num(exclusive_minimum=0.0)},
        },
        'train': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {'epochs': _int(0), 'batch_size': _int(2), 'patience': _int(1),
                           'lr': _num(exclusive_minimum=0.0)},
        },
    },
}

_TYPE_CHECKS = {
    'object': lambda v: isinstance(v, dict),
    'array': lambda v: isinstance(v, list),
    'string': lambda v: isinstance(v, str),
    'boolean': lambda v: isinstance(v, bool),
    'integer': lambda v: isinstance(v, int) and not isinstance(v, bool),
    'number': lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    'null': lambda v: v is None,
}


def _check(value, schema: Mapping[str, Any], path: str, errors: List[str]) -> None:
    types = schema.get('type')
    if types is not None:
        types = types if isinstance(types, list) else [types]
        if not any(_TYPE_CHECKS[t](value) for t in types):
            errors.append(f"{path}: 型が不正です（期待 {'/'.join(types)}, 実際 {type(value).__name__}）")
            return
    if value is None:
        return
    if 'enum' in schema and value not in schema['enum']:
        errors.append(f"{path}: {value!r} は {schema['enum']} のいずれかである必要があります")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if 'minimum' in schema and value < schema['minimum']:
            errors.append(f"{path}: {value} は {schema['minimum']} 以上である必要があります")
        if 'maximum' in schema and value > schema['maximum']:
            errors.append(f"{path}: {value} は {schema['maximum']} 以下である必要があります")
        if 'exclusiveMinimum' in schema and value <= schema['exclusiveMinimum']:
            errors.append(f"{path}: {value} は {schema['exclusiveMinimum']} より大きい必要があります")
        if 'exclusiveMaximum' in schema and value >= schema['exclusiveMaximum']:
            errors.append(f"{path}: {value} は {schema['exclusiveMaximum']} 未満である必要があります")
    if isinstance(value, list) and 'items' in schema:
        for i, item in enumerate(value):
            _check(item, schema['items'], f"{path}[{i}]", errors)
    if isinstance(value, dict):
        properties = schema.get('properties', {})
        names = schema.get('propertyNames')
        extra = schema.get('additionalProperties', True)
        for key, item in value.items():
            child = f"{path}.{key}" if path else str(key)
            if names is not None and key not in names:
                errors.append(f"{child}: 未知のキーです（{names} のいずれか）")
            elif key in properties:
                _check(item, properties[key], child, errors)
            elif extra is False:
                errors.append(f"{child}: 未知の設定項目です")
            elif isinstance(extra, dict):
                _check(item, extra, child, errors)


def validate_config(raw: Any) -> Dict[str, Any]:
    """
    設定辞書をスキーマで検証

    Returns:
        {'valid', 'errors', 'warnings', 'info'} の検証結果辞書
    """
    result = {
        'valid': False,
        'errors': [],
        'warnings': [],
        'info': {}
    }
    if not isinstance(raw, dict):
        result['errors'].append(f"設定の最上位はオブジェクトである必要があります: {type(raw).__name__}")
        return result

    _check(raw, CONFIG_SCHEMA, '', result['errors'])

    dataset = raw.get('dataset', {}) if isinstance(raw.get('dataset'), dict) else {}
    kind = dataset.get('kind', 'henon')
    if kind == 'dump' and not dataset.get('path'):
        result['errors'].append("dataset.path: dump データセットにはパスが必要です")
    if kind == 'mnist':
        missing = [k for k in ('mnist_train_images', 'mnist_train_labels', 'mnist_test_images', 'mnist_test_labels')
                   if not dataset.get(k)]
        if missing:
            result['errors'].append(f"dataset: MNIST のファイル指定が不足しています: {missing}")
    if raw.get('variant') in ('erm', 'iw') and raw.get('stages') and max(raw['stages']) > 1:
        result['warnings'].append("erm/iw ではステージ 2〜4 は実行されません")
    if raw.get('augment_mode') == 'oracle':
        result['warnings'].append("oracle 拡張はホールドアウト集合が必要な検証用モードです")

    result['info'] = {
        '変種': raw.get('variant', 'ecrt'),
        '目的関数': raw.get('objective', 'gcl'),
        'データセット': kind,
    }
    result['valid'] = not result['errors']
    return result


def load_config(path: str, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    設定ファイルを読み込み、上書きを適用してから検証する

    Args:
        path: YAML または JSON の設定ファイル
        overrides: "train.epochs" 形式のキーによる上書き

    Returns:
        ExperimentConfig
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigurationError(f"設定ファイルが見つかりません: {path}")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"設定ファイルを解析できません: {path}: {e}")
    if overrides:
        raw = merge_overrides(raw, overrides)
    config = ExperimentConfig.from_dict(raw)
    logger.info(f"設定を読み込みました: {path} (変種 {config.variant}, 目的関数 {config.objective})")
    return config


def merge_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """ドット区切りのキーで設定辞書を上書きした複製を返す"""
    merged = copy.deepcopy(dict(raw))
    for dotted, value in overrides.items():
        if value is None:
            continue
        keys = dotted.split('.')
        node = merged
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = value
    return merged


def config_with(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """既存の設定にドット区切りの上書きを適用"""
    return ExperimentConfig.from_dict(merge_overrides(config.to_dict(), overrides))


def dataclass_defaults() -> Dict[str, Any]:
    """既定値の設定辞書"""
    return ExperimentConfig().to_dict()
