"""
マスク付き自己回帰フロー（MAF）

ブロック t は z^{t+1} = a_t(z^t) ⊙ z^t + b_t(z^t) を計算する。
a_t, b_t はそれぞれ MADE で求め、log a_t は tanh で [-7, 7] に飽和させる。
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from autodiff.tensor import Tensor, as_tensor, no_grad
from nets.made import Made
from nets.module import Module
from utils.errors import ConfigurationError, NumericError, UsageError

logger = logging.getLogger(__name__)

LOG_SCALE_BOUND = 7.0


def _check_finite(z: np.ndarray, what: str) -> None:
    bad_rows = np.where(~np.all(np.isfinite(z), axis=1))[0]
    if bad_rows.size:
        raise UsageError(f"{what}に非有限値を含む行があります: {bad_rows[:20].tolist()}"
                         + (" ..." if bad_rows.size > 20 else ""))


class MafBlock(Module):
    """シフト・スケール変換 1 段（置換 → 変換 → 逆置換）"""

    kind = 'maf_block'

    def __init__(self, d: int, hidden: int = 128, n_hidden: int = 2, reverse: bool = False, seed: int = 0):
        super().__init__()
        if d < 1:
            raise ConfigurationError(f"次元 d は1以上である必要があります: {d}")
        self.d = int(d)
        self.hidden = int(hidden)
        self.n_hidden = int(n_hidden)
        self.reverse = bool(reverse)
        self.seed = seed

        self.perm = np.arange(self.d)[::-1].copy() if self.reverse else np.arange(self.d)
        self.inv_perm = np.argsort(self.perm)

        widths = [self.hidden] * self.n_hidden
        self.shift_net = self.add_child('shift', Made(self.d, widths, zero_last=True, seed=seed))
        self.log_scale_net = self.add_child('log_scale', Made(self.d, widths, zero_last=True, seed=seed + 1))

    def config(self):
        return {'d': self.d, 'hidden': self.hidden, 'n_hidden': self.n_hidden,
                'reverse': self.reverse, 'seed': self.seed}

    def _params_of(self, zp) -> Tuple[Tensor, Tensor]:
        shift = self.shift_net(zp)
        raw = self.log_scale_net(zp)
        log_a = (raw * (1.0 / LOG_SCALE_BOUND)).tanh() * LOG_SCALE_BOUND
        return shift, log_a

    def forward(self, z) -> Tuple[Tensor, Tensor]:
        """
        Returns:
            (変換後の行列, 行ごとの log|det|)
        """
        z = as_tensor(z)
        zp = z[:, self.perm]
        shift, log_a = self._params_of(zp)
        out = log_a.exp() * zp + shift
        return out[:, self.inv_perm], log_a.sum(axis=1)

    def inverse(self, s: np.ndarray, block_index: int = 0) -> np.ndarray:
        """座標を1つずつ確定させる逐次逆変換（d 回の順伝播）"""
        s = np.asarray(s, dtype=np.float64)
        sp = s[:, self.perm]
        zp = np.zeros_like(sp)
        with no_grad():
            for k in range(self.d):
                shift, log_a = self._params_of(Tensor(zp))
                zp[:, k] = (sp[:, k] - shift.data[:, k]) * np.exp(-log_a.data[:, k])
                bad = np.where(~np.isfinite(zp[:, k]))[0]
                if bad.size:
                    coord = int(self.perm[k])
                    raise NumericError(f"逆変換が発散しました: ブロック {block_index}, 座標 {coord}, "
                                       f"行 {bad[:20].tolist()}")
        return zp[:, self.inv_perm]


class MafFlow(Module):
    """MafBlock の列。奇数番目のブロックは座標順を反転する"""

    kind = 'maf_flow'

    def __init__(self, d: int, n_blocks: int = 4, hidden: int = 128, n_hidden: int = 2, seed: int = 0):
        super().__init__()
        if n_blocks < 1:
            raise ConfigurationError(f"ブロック数は1以上である必要があります: {n_blocks}")
        self.d = int(d)
        self.n_blocks = int(n_blocks)
        self.hidden = int(hidden)
        self.n_hidden = int(n_hidden)
        self.seed = seed
        self.blocks: List[MafBlock] = []
        for t in range(self.n_blocks):
            block = MafBlock(self.d, self.hidden, self.n_hidden, reverse=t % 2 == 1, seed=seed + 7919 * t)
            self.blocks.append(self.add_child(f'blocks.{t}', block))

    def config(self):
        return {'d': self.d, 'n_blocks': self.n_blocks, 'hidden': self.hidden,
                'n_hidden': self.n_hidden, 'seed': self.seed}

    def forward(self, z) -> Tuple[Tensor, Tensor]:
        s, logdets = self.trajectory(z)
        total = logdets[0]
        for ld in logdets[1:]:
            total = total + ld
        return s, total

    def trajectory(self, z) -> Tuple[Tensor, List[Tensor]]:
        """最終出力とブロックごとの log|det| のリスト"""
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.d:
            raise ConfigurationError(f"入力の形状がフロー次元と一致しません: {z.shape} vs d={self.d}")
        _check_finite(z.data, "フロー入力")
        logdets = []
        for block in self.blocks:
            z, ld = block(z)
            logdets.append(ld)
        return z, logdets

    def inverse(self, s) -> np.ndarray:
        s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != self.d:
            raise ConfigurationError(f"ソースの形状がフロー次元と一致しません: {s.shape} vs d={self.d}")
        _check_finite(s, "ソース")
        for t in range(self.n_blocks - 1, -1, -1):
            s = self.blocks[t].inverse(s, block_index=t)
        return s


def flow_forward(flow: MafFlow, z) -> Tuple[Tensor, Tensor]:
    """s = f_ψ(z) と行ごとの log|det ∇f_ψ|"""
    return flow(z)


def flow_inverse(flow: MafFlow, s) -> np.ndarray:
    """z = f_ψ^{-1}(s)（ブロック逆順・座標逐次）"""
    return flow.inverse(s)


def flow_log_likelihood(flow: MafFlow, prior, z, labels: Optional[np.ndarray] = None) -> Tensor:
    """
    行ごとの対数尤度 log|det| + log p(f_ψ(z))

    Args:
        flow: MAF
        prior: SourcePrior
        z: (n, d) の特徴量
        labels: クラス別事前分布のときに必須

    Returns:
        (n,) の対数尤度
    """
    if prior.requires_labels and labels is None:
        raise UsageError("クラス別事前分布ではラベルが必要です")
    s, logdet = flow_forward(flow, z)
    return logdet + prior.log_prob(s, labels)
