"""
ソース空間の事前分布
"""

from typing import Optional

import numpy as np

from autodiff.tensor import Tensor, as_tensor, gather
from nets.module import Module
from utils.errors import ConfigurationError, UsageError

PRIOR_MODES = ('shared', 'per_class')
_LOG_2PI = float(np.log(2.0 * np.pi))


class SourcePrior(Module):
    """
    ガウス事前分布 p(s)

    shared: 全クラス共通の標準正規分布（パラメータなし）
    per_class: クラスごとの学習可能な平均・対数分散（ECRT-MULTI）
    """

    kind = 'source_prior'

    def __init__(self, mode: str = 'shared', num_classes: int = 1, dim: int = 2):
        super().__init__()
        if mode not in PRIOR_MODES:
            raise ConfigurationError(f"未知の事前分布モードです: {mode}（{PRIOR_MODES} のいずれか）")
        if dim < 1 or num_classes < 1:
            raise ConfigurationError(f"事前分布の設定が不正です: M={num_classes}, d={dim}")
        self.mode = mode
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        if mode == 'per_class':
            self.mu = self.add_param('mu', np.zeros((self.num_classes, self.dim)))
            self.log_var = self.add_param('log_var', np.zeros((self.num_classes, self.dim)))

    @property
    def requires_labels(self) -> bool:
        return self.mode == 'per_class'

    def config(self):
        return {'mode': self.mode, 'num_classes': self.num_classes, 'dim': self.dim}

    def forward(self, s, labels=None) -> Tensor:
        return self.log_prob(s, labels)

    def log_prob(self, s, labels: Optional[np.ndarray] = None) -> Tensor:
        """行ごとの log p(s)（クラス別モードでは log p^m(s)）"""
        s = as_tensor(s)
        if s.ndim != 2 or s.shape[1] != self.dim:
            raise ConfigurationError(f"ソースの形状が事前分布と一致しません: {s.shape} vs d={self.dim}")
        const = -0.5 * self.dim * _LOG_2PI
        if self.mode == 'shared':
            return (s * s).sum(axis=1) * -0.5 + const

        if labels is None:
            raise UsageError("クラス別事前分布ではラベルが必要です")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != s.shape[0]:
            raise UsageError(f"ラベル数とソース行数が一致しません: {labels.shape[0]} vs {s.shape[0]}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise UsageError(f"未知のラベル ID です（クラス数 {self.num_classes}）")
        mu = gather(self.mu, labels)
        log_var = gather(self.log_var, labels)
        diff = s - mu
        quad = diff * diff / log_var.exp()
        return (log_var + quad).sum(axis=1) * -0.5 + const

    def moments(self, label: int):
        """クラスの平均と標準偏差（numpy）"""
        if self.mode == 'shared':
            return np.zeros(self.dim), np.ones(self.dim)
        if not 0 <= label < self.num_classes:
            raise UsageError(f"未知のラベル ID です: {label}")
        return self.mu.data[label].copy(), np.exp(0.5 * self.log_var.data[label])

    def sample(self, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """クラス label の事前分布から count 個サンプリング"""
        mean, std = self.moments(label)
        return mean + std * rng.standard_normal((int(count), self.dim))
