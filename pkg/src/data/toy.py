"""
トイデータ生成

- Hénon 写像で混合した 7 クラスの 2 次元ガウス
- 1000 クラスの極端分類トイ
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np

from utils.errors import ConfigurationError
from .dataset import Dataset, spec_hash

MIXINGS = ('henon', 'none')

HENON_MEANS = (
    (-0.5, -1.0),
    (2.0, 1.0),
    (5.0, 2.0),
    (1.0, 3.0),
    (-2.0, 1.0),
    (-3.5, 4.0),
    (-4.0, -1.0),
)
HENON_SPREADS = (
    (0.5, 0.5),
    (3.0, 1.0),
    (1.0, 2.0),
    (0.3, 2.0),
    (1.0, 0.2),
    (1.0, 1.0),
    (2.0, 0.3),
)
HENON_PER_CLASS = 2000

EXTREME_CLASSES = 1000
EXTREME_STD = 0.1
EXTREME_MEAN_RANGE = 4.0
EXTREME_VALIDATION_PER_CLASS = 20
EXTREME_PER_CLASS_GRID = (5, 10, 20, 50, 75, 100, 150)


def henon_map(s: np.ndarray) -> np.ndarray:
    """z1 = 1 − 1.4 s1² + s2, z2 = 0.3 s1"""
    s = np.asarray(s, dtype=np.float64)
    z = np.empty_like(s)
    z[..., 0] = 1.0 - 1.4 * s[..., 0] ** 2 + s[..., 1]
    z[..., 1] = 0.3 * s[..., 0]
    return z


def henon_inverse(z: np.ndarray) -> np.ndarray:
    """s1 = z2 / 0.3, s2 = z1 − 1 + 1.4 s1²"""
    z = np.asarray(z, dtype=np.float64)
    s = np.empty_like(z)
    s[..., 0] = z[..., 1] / 0.3
    s[..., 1] = z[..., 0] - 1.0 + 1.4 * s[..., 0] ** 2
    return s


@dataclass
class ToySpec:
    """クラスごとの平均・広がりと混合の種類"""
    means: Sequence[Sequence[float]] = HENON_MEANS
    spreads: Sequence[Sequence[float]] = HENON_SPREADS
    per_class: Union[int, Sequence[int]] = HENON_PER_CLASS
    mixing: str = 'henon'
    # True なら spreads を分散として扱う（既定は標準偏差）
    spread_is_variance: bool = False

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        spreads = np.asarray(self.spreads, dtype=np.float64)
        if means.ndim != 2 or means.shape != spreads.shape:
            raise ConfigurationError(f"平均と広がりの形状が一致しません: {means.shape} vs {spreads.shape}")
        if np.any(spreads <= 0):
            raise ConfigurationError("広がりは正である必要があります")
        if self.mixing not in MIXINGS:
            raise ConfigurationError(f"未知の混合です: {self.mixing}（{MIXINGS} のいずれか）")
        if self.mixing == 'henon' and means.shape[1] != 2:
            raise ConfigurationError(f"Hénon 混合は2次元のみ対応します: d={means.shape[1]}")
        counts = self.counts
        if np.any(counts < 0):
            raise ConfigurationError(f"クラスごとのサンプル数が不正です: {self.per_class}")

    @property
    def num_classes(self) -> int:
        return len(self.means)

    @property
    def counts(self) -> np.ndarray:
        if isinstance(self.per_class, (int, np.integer)):
            return np.full(self.num_classes, int(self.per_class))
        counts = np.asarray(self.per_class, dtype=np.int64)
        if counts.shape != (self.num_classes,):
            raise ConfigurationError(f"クラスごとのサンプル数の長さが一致しません: {counts.shape} vs {self.num_classes}")
        return counts

    @property
    def stds(self) -> np.ndarray:
        spreads = np.asarray(self.spreads, dtype=np.float64)
        return np.sqrt(spreads) if self.spread_is_variance else spreads

    def to_dict(self) -> dict:
        return {
            'means': np.asarray(self.means, dtype=np.float64).tolist(),
            'spreads': np.asarray(self.spreads, dtype=np.float64).tolist(),
            'per_class': self.counts.tolist(),
            'mixing': self.mixing,
            'spread_is_variance': self.spread_is_variance,
        }


def _sample_gaussians(means: np.ndarray, stds: np.ndarray, counts: np.ndarray,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    sources, labels = [], []
    for m, (mu, sd, count) in enumerate(zip(means, stds, counts)):
        sources.append(mu + sd * rng.standard_normal((int(count), means.shape[1])))
        labels.append(np.full(int(count), m, dtype=np.int64))
    return np.concatenate(sources, axis=0), np.concatenate(labels)


def generate_toy(spec: ToySpec = None, seed: int = 0) -> Dataset:
    """
    ガウス源をクラスごとに生成し、混合を適用

    Returns:
        features = 混合後, sources = 正解ソース を持つ Dataset
    """
    spec = spec or ToySpec()
    rng = np.random.default_rng(seed)
    sources, labels = _sample_gaussians(np.asarray(spec.means, dtype=np.float64), spec.stds, spec.counts, rng)
    features = henon_map(sources) if spec.mixing == 'henon' else sources.copy()
    return Dataset(features=features, labels=labels, num_classes=spec.num_classes, split='train',
                   seed=seed, spec_hash=spec_hash(spec.to_dict()), sources=sources,
                   metadata={'generator': 'toy', 'mixing': spec.mixing})


def generate_extreme_toy(classes: int = EXTREME_CLASSES, per_class: Union[int, Sequence[int]] = 20,
                         seed: int = 0, validation_per_class: int = EXTREME_VALIDATION_PER_CLASS,
                         std: float = EXTREME_STD, mixing: str = 'none') -> Tuple[Dataset, Dataset]:
    """
    極端分類トイ（平均は (−4, 4)² の一様、標準偏差 0.1）

    Returns:
        (訓練データ, クラスあたり validation_per_class 件の検証データ)
    """
    if classes < 2:
        raise ConfigurationError(f"クラス数は2以上である必要があります: {classes}")
    if std <= 0:
        raise ConfigurationError(f"標準偏差は正である必要があります: {std}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-EXTREME_MEAN_RANGE, EXTREME_MEAN_RANGE, size=(classes, 2))
    stds = np.full((classes, 2), std)
    spec = ToySpec(means=means, spreads=stds, per_class=per_class, mixing=mixing)
    info = {'generator': 'extreme', 'classes': classes, 'std': std, 'mixing': mixing}
    digest = spec_hash({**info, 'seed': seed, 'per_class': spec.counts.tolist(),
                        'validation_per_class': validation_per_class})

    def build(counts, split):
        sources, labels = _sample_gaussians(means, stds, counts, rng)
        features = henon_map(sources) if mixing == 'henon' else sources.copy()
        return Dataset(features=features, labels=labels, num_classes=classes, split=split, seed=seed,
                       spec_hash=digest, sources=sources, metadata=dict(info))

    train = build(spec.counts, 'train')
    validation = build(np.full(classes, int(validation_per_class)), 'validation')
    return train, validation
