"""
データセットの型・分割・ダンプ入出力

ダンプ形式:
    <name>.json          ヘッダー（n, p, M, クラス数, シード, 仕様ハッシュ, ブロブのハッシュ）
    <name>.features.f64  リトルエンディアン 64bit 浮動小数の特徴量
    <name>.labels.i32    リトルエンディアン 32bit 整数のラベル
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

from utils.errors import ConfigurationError, IntegrityError
from utils.file_utils import (
    DUMP_FEATURE_SUFFIX,
    DUMP_LABEL_SUFFIX,
    ensure_dir,
    file_sha256,
    get_dump_file_sets,
    read_json_file,
    write_json_file,
)

logger = logging.getLogger(__name__)

SPLITS = ('train', 'validation', 'test')
DUMP_SOURCE_SUFFIX = '.sources.f64'
DUMP_TARGET_SUFFIX = '.targets.f64'
DUMP_FORMAT_VERSION = 1


def spec_hash(spec: Any) -> str:
    """仕様（JSON 化可能な値）の安定したハッシュ"""
    text = json.dumps(spec, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


@dataclass
class Dataset:
    """特徴量行列と整数ラベル"""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = 'train'
    seed: Optional[int] = None
    spec_hash: str = ''
    sources: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.sources is not None:
            self.sources = np.asarray(self.sources, dtype=np.float64)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def p(self) -> int:
        return int(self.features.shape[1])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise ConfigurationError(f"特徴量は2次元配列である必要があります: {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(f"特徴量とラベルの行数が一致しません: {self.features.shape[0]} vs {self.labels.shape[0]}")
        if self.num_classes < 1:
            raise ConfigurationError(f"クラス数が不正です: {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError(f"ラベルが [0, {self.num_classes}) の範囲外です")
        if self.split not in SPLITS:
            raise ConfigurationError(f"未知の分割名です: {self.split}")
        for name, extra in (('sources', self.sources), ('targets', self.targets)):
            if extra is not None and extra.shape[0] != self.n:
                raise ConfigurationError(f"{name} の行数が一致しません: {extra.shape[0]} vs {self.n}")

    def subset(self, index, split: Optional[str] = None) -> 'Dataset':
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            features=self.features[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            split=split or self.split,
            seed=self.seed,
            spec_hash=self.spec_hash,
            sources=None if self.sources is None else self.sources[index],
            targets=None if self.targets is None else self.targets[index],
            metadata=dict(self.metadata),
        )

    def class_rows(self, label: int) -> np.ndarray:
        return np.where(self.labels == label)[0]


def train_val_split(dataset: Dataset, train_ratio: float = 0.8,
                    rng: Optional[np.random.Generator] = None) -> Tuple[Dataset, Dataset]:
    """ランダムな train/validation 分割（既定 8/2）"""
    if not 0.0 < train_ratio < 1.0:
        raise ConfigurationError(f"訓練データの割合は (0, 1) の範囲です: {train_ratio}")
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(dataset.n)
    split_idx = int(dataset.n * train_ratio)
    return dataset.subset(np.sort(order[:split_idx]), 'train'), dataset.subset(np.sort(order[split_idx:]), 'validation')


class DatasetConverter:
    """Dataset とダンプファイル群の相互変換"""

    def __init__(self):
        self.stats = {
            'dumped': [],
            'class_counts': {},
            'errors': [],
        }

    def dump(self, dataset: Dataset, output_folder: str, name: Optional[str] = None) -> Dict:
        """
        データセットをダンプ

        Args:
            dataset: 出力するデータセット
            output_folder: 出力フォルダ
            name: ファイル名の基部（省略時は分割名）

        Returns:
            出力結果の詳細
        """
        ensure_dir(output_folder)
        name = name or dataset.split
        base = os.path.join(output_folder, name)

        blobs = {
            'features': (base + DUMP_FEATURE_SUFFIX, dataset.features.astype('<f8')),
            'labels': (base + DUMP_LABEL_SUFFIX, dataset.labels.astype('<i4')),
        }
        if dataset.sources is not None:
            blobs['sources'] = (base + DUMP_SOURCE_SUFFIX, dataset.sources.astype('<f8'))
        if dataset.targets is not None:
            blobs['targets'] = (base + DUMP_TARGET_SUFFIX, dataset.targets.astype('<f8'))

        blob_hashes = {}
        for key, (path, array) in blobs.items():
            with open(path, 'wb') as f:
                f.write(array.tobytes())
            blob_hashes[key] = file_sha256(path)

        header = {
            'format_version': DUMP_FORMAT_VERSION,
            'n': dataset.n,
            'p': dataset.p,
            'M': dataset.num_classes,
            'counts': [int(c) for c in dataset.class_counts],
            'split': dataset.split,
            'seed': dataset.seed,
            'spec_hash': dataset.spec_hash,
            'source_dim': None if dataset.sources is None else int(dataset.sources.shape[1]),
            'blobs': blob_hashes,
            'metadata': dataset.metadata,
        }
        header_path = write_json_file(base + '.json', header)

        self.stats['dumped'].append(name)
        self.stats['class_counts'][name] = header['counts']
        logger.info(f"データセットを書き出しました: {header_path} (n={dataset.n}, p={dataset.p}, M={dataset.num_classes})")

        return {
            '出力成功': True,
            'ヘッダー': header_path,
            '統計情報': {
                'サンプル数': dataset.n,
                '特徴量次元': dataset.p,
                'クラス数': dataset.num_classes,
            },
            'クラス情報': {int(m): int(c) for m, c in enumerate(dataset.class_counts)},
        }

    def write_config_file(self, output_folder: str, splits: Dict[str, Dataset]) -> str:
        """ダンプ一式の概要を dataset.yaml に書き出す"""
        first = next(iter(splits.values()))
        yaml_data = {
            'splits': {name: f"{name}.json" for name in sorted(splits)},
            'n': {name: ds.n for name, ds in sorted(splits.items())},
            'p': first.p,
            'M': first.num_classes,
            'spec_hash': first.spec_hash,
            'seed': first.seed,
        }
        path = os.path.join(output_folder, 'dataset.yaml')
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(yaml_data, f, default_flow_style=False, allow_unicode=True, sort_keys=True)
        return path

    def load(self, folder: str, name: str = 'train', verify: bool = True) -> Dataset:
        """
        ダンプからデータセットを復元

        Raises:
            IntegrityError: ヘッダーとブロブが一致しない場合
        """
        base = os.path.join(folder, name)
        header_path = base + '.json'
        if not os.path.exists(header_path):
            raise IntegrityError(f"ヘッダーが見つかりません: {header_path}")
        header = read_json_file(header_path)

        def read_blob(key: str, suffix: str, dtype: str, shape):
            path = base + suffix
            if not os.path.exists(path):
                raise IntegrityError(f"ブロブが見つかりません: {path}")
            if verify and header.get('blobs', {}).get(key) != file_sha256(path):
                raise IntegrityError(f"ブロブのハッシュが一致しません: {path}")
            raw = np.fromfile(path, dtype=dtype)
            expected = int(np.prod(shape))
            if raw.size != expected:
                raise IntegrityError(f"ブロブの要素数が一致しません: {path} ({raw.size} vs {expected})")
            return raw.reshape(shape)

        n, p = int(header['n']), int(header['p'])
        features = read_blob('features', DUMP_FEATURE_SUFFIX, '<f8', (n, p)).astype(np.float64)
        labels = read_blob('labels', DUMP_LABEL_SUFFIX, '<i4', (n,)).astype(np.int64)
        sources = None
        if 'sources' in header.get('blobs', {}):
            sources = read_blob('sources', DUMP_SOURCE_SUFFIX, '<f8', (n, int(header['source_dim']))).astype(np.float64)
        targets = None
        if 'targets' in header.get('blobs', {}):
            targets = read_blob('targets', DUMP_TARGET_SUFFIX, '<f8', (n,)).astype(np.float64)

        dataset = Dataset(features=features, labels=labels, num_classes=int(header['M']),
                          split=header.get('split', 'train'), seed=header.get('seed'),
                          spec_hash=header.get('spec_hash', ''), sources=sources, targets=targets,
                          metadata=header.get('metadata', {}))
        if [int(c) for c in dataset.class_counts] != list(header['counts']):
            raise IntegrityError(f"クラスごとの件数がヘッダーと一致しません: {header_path}")
        return dataset

    def validate_dataset_dump(self, folder: str) -> Dict:
        """ダンプフォルダの検証"""
        validation_result = {
            'valid': True,
            'errors': [],
            'warnings': [],
            'statistics': {}
        }

        headers, sets = get_dump_file_sets(folder)
        if not sets:
            validation_result['valid'] = False
            validation_result['errors'].append(f"完全なダンプ（ヘッダー + 特徴量 + ラベル）が見つかりません: {folder}")
            return validation_result

        complete = {header for header, _, _ in sets}
        for header in headers:
            if header not in complete:
                validation_result['warnings'].append(f"ブロブが揃っていないヘッダーがあります: {header}")

        for header, _, _ in sets:
            name = header[:-len('.json')]
            try:
                ds = self.load(folder, name)
            except (IntegrityError, ConfigurationError, KeyError, ValueError) as e:
                validation_result['valid'] = False
                validation_result['errors'].append(f"{name}: {e}")
                continue
            counts = ds.class_counts
            validation_result['statistics'][name] = {
                'サンプル数': ds.n,
                '特徴量次元': ds.p,
                'クラス数': ds.num_classes,
            }
            if np.any(counts == 0):
                validation_result['warnings'].append(
                    f"{name}: サンプル数 0 のクラスがあります: {np.where(counts == 0)[0].tolist()[:10]}")

        return validation_result
