"""
ステップ型の不均衡データ作成
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigurationError
from .dataset import Dataset

logger = logging.getLogger(__name__)

MNIST_MAJORITY_COUNT = 6000
MNIST_MINORITY_COUNT = 1200
MNIST_VALIDATION_PER_CLASS = 1000


@dataclass
class ImbalanceSpec:
    """多数クラス・少数クラスごとのサンプル数と、検証データのクラスあたり件数"""
    majority: Dict[int, int] = field(default_factory=dict)
    minority: Dict[int, int] = field(default_factory=dict)
    validation_per_class: Optional[int] = None

    def __post_init__(self):
        self.majority = {int(k): int(v) for k, v in self.majority.items()}
        self.minority = {int(k): int(v) for k, v in self.minority.items()}
        overlap = set(self.majority) & set(self.minority)
        if overlap:
            raise ConfigurationError(f"多数クラスと少数クラスが重複しています: {sorted(overlap)}")
        if any(v < 0 for v in list(self.majority.values()) + list(self.minority.values())):
            raise ConfigurationError("サンプル数は 0 以上である必要があります")
        if self.majority and self.minority and max(self.minority.values()) >= min(self.majority.values()):
            raise ConfigurationError(
                f"少数クラスの件数は多数クラスより少ない必要があります: "
                f"{max(self.minority.values())} >= {min(self.majority.values())}")

    @property
    def counts(self) -> Dict[int, int]:
        return {**self.majority, **self.minority}

    @property
    def minority_classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.minority))

    def to_dict(self) -> dict:
        return {
            'majority': {str(k): v for k, v in sorted(self.majority.items())},
            'minority': {str(k): v for k, v in sorted(self.minority.items())},
            'validation_per_class': self.validation_per_class,
        }


def mnist_step_spec(minority_classes: Sequence[int] = (0,), num_classes: int = 10,
                    majority_count: int = MNIST_MAJORITY_COUNT, minority_count: int = MNIST_MINORITY_COUNT,
                    validation_per_class: int = MNIST_VALIDATION_PER_CLASS) -> ImbalanceSpec:
    """残り全クラスを多数クラス（各 majority_count 件）とする MNIST 既定の設定"""
    minority = {int(m): minority_count for m in minority_classes}
    majority = {m: majority_count for m in range(num_classes) if m not in minority}
    return ImbalanceSpec(majority=majority, minority=minority, validation_per_class=validation_per_class)


def apply_step_imbalance(dataset: Dataset, spec: ImbalanceSpec, seed) -> Dataset:
    """
    各クラスを指定件数まで非復元で間引く

    指定のないクラスは除外される。
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    available = dataset.class_counts
    keep = []
    for label, count in sorted(spec.counts.items()):
        if label >= dataset.num_classes:
            raise ConfigurationError(f"クラス {label} はデータセットに存在しません（クラス数 {dataset.num_classes}）")
        if count > available[label]:
            raise ConfigurationError(f"クラス {label} のサンプルが不足しています: 要求 {count}, 実際 {available[label]}")
        rows = dataset.class_rows(label)
        keep.append(rng.choice(rows, size=count, replace=False))

    index = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    result = dataset.subset(index)
    result.metadata['imbalance'] = spec.to_dict()
    logger.info(f"ステップ不均衡を適用しました: 多数 {len(spec.majority)} クラス, 少数 {len(spec.minority)} クラス, n={result.n}")
    return result


def split_step_imbalance(dataset: Dataset, spec: ImbalanceSpec, seed,
                         validation_pool: Optional[Dataset] = None) -> Tuple[Dataset, Dataset]:
    """
    不均衡な訓練データと、クラスあたり均等な検証データを作る

    validation_pool を省略した場合は dataset から先に検証データを取り分ける。
    """
    if spec.validation_per_class is None:
        raise ConfigurationError("検証データのクラスあたり件数が未指定です")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    per_class = spec.validation_per_class
    balanced = ImbalanceSpec(majority={label: per_class for label in spec.counts})

    if validation_pool is not None:
        validation = apply_step_imbalance(validation_pool, balanced, rng)
        train = apply_step_imbalance(dataset, spec, rng)
    else:
        validation_index = []
        for label in sorted(spec.counts):
            rows = dataset.class_rows(label)
            if per_class > rows.size:
                raise ConfigurationError(f"クラス {label} の検証データが不足しています: 要求 {per_class}, 実際 {rows.size}")
            validation_index.append(rng.choice(rows, size=per_class, replace=False))
        validation_index = np.sort(np.concatenate(validation_index))
        remaining = np.setdiff1d(np.arange(dataset.n), validation_index)
        validation = dataset.subset(validation_index)
        train = apply_step_imbalance(dataset.subset(remaining), spec, rng)

    validation.split = 'validation'
    validation.metadata.pop('imbalance', None)
    train.split = 'train'
    return train, validation
