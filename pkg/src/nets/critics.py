"""
対照学習用の臨界関数（critic）

GclCritic: 次元ごとのネットワーク出力の和 r(y, s) = Σ_a γ^a(y, [s]_a)
FdvCritic: ラベル埋め込みと Σ_a γ^a(y, [s]_a) のコサイン類似度 / 温度
"""

import logging
from typing import Sequence

import numpy as np

from autodiff.tensor import Tensor, as_tensor, concat, gather
from utils.errors import ConfigurationError, UsageError
from .mlp import Mlp
from .module import Module

logger = logging.getLogger(__name__)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)]
        raise UsageError(f"未知のラベル ID です: {sorted(set(bad.tolist()))[:10]} (クラス数 {num_classes})")
    return labels


class _LabelConditionedCritic(Module):
    """ラベル埋め込み + 次元ごとのネットワーク γ^a を持つ共通部"""

    def __init__(self, num_classes: int, dim: int, embed_dim: int, hidden: Sequence[int],
                 out_width: int, seed: int):
        super().__init__()
        if num_classes < 1 or dim < 1 or embed_dim < 1:
            raise ConfigurationError(f"critic の設定が不正です: M={num_classes}, d={dim}, 埋め込み={embed_dim}")
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        self.embed_dim = int(embed_dim)
        self.hidden = [int(h) for h in hidden]
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.embedding = self.add_param('embedding', rng.standard_normal((self.num_classes, self.embed_dim)))
        self.gammas = []
        for a in range(self.dim):
            net = Mlp([self.embed_dim + 1] + self.hidden + [out_width], seed=seed + 101 * (a + 1))
            self.gammas.append(self.add_child(f'gamma.{a}', net))

    def config(self):
        return {'num_classes': self.num_classes, 'dim': self.dim, 'embed_dim': self.embed_dim,
                'hidden': list(self.hidden), 'seed': self.seed}

    def _check_sources(self, s) -> Tensor:
        s = as_tensor(s)
        if s.ndim != 2 or s.shape[1] != self.dim:
            raise ConfigurationError(f"ソースの列数が critic の次元と一致しません: {s.shape} vs d={self.dim}")
        return s

    def per_dimension(self, labels: np.ndarray, s: Tensor) -> list:
        """各次元の γ^a(y, [s]_a) をリストで返す"""
        emb = gather(self.embedding, labels)
        outputs = []
        for a, net in enumerate(self.gammas):
            coord = s[:, a:a + 1]
            outputs.append(net(concat([emb, coord], axis=1)))
        return outputs

    def summed(self, labels: np.ndarray, s: Tensor) -> Tensor:
        outputs = self.per_dimension(labels, s)
        total = outputs[0]
        for out in outputs[1:]:
            total = total + out
        return total


class GclCritic(_LabelConditionedCritic):
    """GCL 用の加法的 critic（各 γ^a はスカラー出力）"""

    kind = 'gcl_critic'

    def __init__(self, num_classes: int, dim: int, embed_dim: int = 16,
                 hidden: Sequence[int] = (64, 64), seed: int = 0):
        super().__init__(num_classes, dim, embed_dim, hidden, out_width=1, seed=seed)

    def score(self, labels, s) -> Tensor:
        """
        各行の r(y_i, s_i) を計算

        Args:
            labels: (n,) のラベル
            s: (n, d) のソース

        Returns:
            (n,) のスコア
        """
        s = self._check_sources(s)
        labels = _check_labels(labels, self.num_classes)
        if labels.shape[0] != s.shape[0]:
            raise UsageError(f"ラベル数とソース行数が一致しません: {labels.shape[0]} vs {s.shape[0]}")
        return self.summed(labels, s).reshape(-1)


class FdvCritic(_LabelConditionedCritic):
    """FDV 用のエネルギー critic（コサイン類似度 / 学習可能な温度 τ）"""

    kind = 'fdv_critic'

    def __init__(self, num_classes: int, dim: int, embed_dim: int = 16,
                 hidden: Sequence[int] = (64, 64), tau_init: float = 0.1, seed: int = 0):
        if tau_init <= 0:
            raise ConfigurationError(f"温度 τ は正である必要があります: {tau_init}")
        super().__init__(num_classes, dim, embed_dim, hidden, out_width=embed_dim, seed=seed)
        self.tau_init = float(tau_init)
        # τ = exp(log_tau) で常に正
        self.log_tau = self.add_param('log_tau', np.array(np.log(tau_init)))

    def config(self):
        cfg = super().config()
        cfg['tau_init'] = self.tau_init
        return cfg

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def _cosine(self, emb: Tensor, h: Tensor) -> Tensor:
        """行ごとのコサイン類似度。ノルム 0 の行は 0 とする"""
        dot = (emb * h).sum(axis=1)
        emb_sq = (emb * emb).sum(axis=1)
        h_sq = (h * h).sum(axis=1)
        degenerate = (emb_sq.data <= 0) | (h_sq.data <= 0)
        if np.any(degenerate):
            logger.warning(f"警告: ノルム 0 の方向が {int(degenerate.sum())} 行あります（スコア 0 として扱います）")
        denom = (emb_sq.sqrt() * h_sq.sqrt()) + degenerate.astype(np.float64)
        return dot / denom

    def score(self, labels, s) -> Tensor:
        """
        各行の g(y_i, s_i) = sim(embed(y_i), Σ_a γ^a) / τ

        Args:
            labels: (n,) のラベル
            s: (n, d) のソース

        Returns:
            (n,) のスコア
        """
        s = self._check_sources(s)
        labels = _check_labels(labels, self.num_classes)
        if labels.shape[0] != s.shape[0]:
            raise UsageError(f"ラベル数とソース行数が一致しません: {labels.shape[0]} vs {s.shape[0]}")
        emb = gather(self.embedding, labels)
        h = self.summed(labels, s)
        return self._cosine(emb, h) / self.log_tau.exp()

    def pairwise_scores(self, labels, s) -> Tensor:
        """
        バッチ内の全組 [i, j] = g(y_j, s_i) を計算

        同じラベルの列は同じ値になるため、ユニークなラベルごとに評価してから列を展開する。

        Returns:
            (n, n) のスコア行列
        """
        s = self._check_sources(s)
        labels = _check_labels(labels, self.num_classes)
        n = s.shape[0]
        if labels.shape[0] != n:
            raise UsageError(f"ラベル数とソース行数が一致しません: {labels.shape[0]} vs {n}")

        unique, inverse = np.unique(labels, return_inverse=True)
        u = unique.shape[0]
        row_index = np.repeat(np.arange(n), u)
        label_index = np.tile(unique, n)

        pair_sources = gather(s, row_index)
        emb = gather(self.embedding, label_index)
        h = self.summed(label_index, pair_sources)
        scores = (self._cosine(emb, h) / self.log_tau.exp()).reshape(n, u)
        return scores[:, inverse.reshape(-1)]


def gcl_critic_score(critic: GclCritic, y, s) -> Tensor:
    """GCL critic のスコア（関数形式）"""
    return critic.score(y, s)


def fdv_critic_score(critic: FdvCritic, y, s) -> Tensor:
    """FDV critic のスコア（関数形式）"""
    return critic.score(y, s)

