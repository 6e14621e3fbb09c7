"""
MADE（マスク付き自己回帰ネットワーク）

出力 k は次数が k 未満の入力にのみ依存する。
"""

from typing import List, Optional, Sequence

import numpy as np

from autodiff.tensor import Tensor, as_tensor
from utils.errors import ConfigurationError
from .module import Module, uniform_init


def made_degrees(d: int, hidden_widths: Sequence[int], order: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """
    各層のユニットに自己回帰の次数を割り当てる

    Args:
        d: 入力次元
        hidden_widths: 隠れ層の幅
        order: 入力の次数（1..d の並べ替え）。省略時は自然順

    Returns:
        [入力次数, 隠れ層1の次数, ...] のリスト
    """
    if d < 1:
        raise ConfigurationError(f"次元 d は1以上である必要があります: {d}")

    if order is None:
        input_degrees = np.arange(1, d + 1)
    else:
        input_degrees = np.asarray(order, dtype=np.int64)
        if sorted(input_degrees.tolist()) != list(range(1, d + 1)):
            raise ConfigurationError(f"入力次数は 1..{d} の並べ替えである必要があります: {order}")

    degrees = [input_degrees]
    # 隠れ層の次数は [1, d-1] を巡回（d <= 2 では全て 1）
    span = max(d - 1, 1)
    for width in hidden_widths:
        if width <= 0:
            raise ConfigurationError(f"隠れ層の幅が不正です: {width}")
        degrees.append(np.arange(width) % span + 1)
    return degrees


def made_masks(degrees: List[np.ndarray]) -> List[np.ndarray]:
    """次数から (入力, 出力) 形状のマスクを作る。最終層は出力次数 = 入力次数で厳密不等号"""
    masks = []
    for prev, nxt in zip(degrees[:-1], degrees[1:]):
        masks.append((nxt[None, :] >= prev[:, None]).astype(np.float64))
    output_degrees = degrees[0]
    masks.append((output_degrees[None, :] > degrees[-1][:, None]).astype(np.float64))
    return masks


class MaskedLinear(Module):
    """重みにマスクを掛けた全結合層"""

    kind = 'masked_linear'

    def __init__(self, in_features: int, out_features: int, mask: np.ndarray,
                 zero_init: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (in_features, out_features):
            raise ConfigurationError(f"マスク形状が不正です: {mask.shape} vs {(in_features, out_features)}")
        rng = rng or np.random.default_rng(0)
        if zero_init:
            w = np.zeros((in_features, out_features))
            b = np.zeros(out_features)
        else:
            w = uniform_init(rng, in_features, (in_features, out_features))
            b = uniform_init(rng, in_features, (out_features,))
        self.mask = mask
        self.weight = self.add_param('weight', w)
        self.bias = self.add_param('bias', b)

    def forward(self, x) -> Tensor:
        return as_tensor(x) @ (self.weight * self.mask) + self.bias


class Made(Module):
    """d 入力 d 出力の MADE。出力 k は次数 k 未満の入力にのみ依存"""

    kind = 'made'

    def __init__(self, d: int, hidden_widths: Sequence[int] = (128, 128),
                 order: Optional[Sequence[int]] = None, zero_last: bool = True, seed: int = 0):
        super().__init__()
        self.d = int(d)
        self.hidden_widths = [int(h) for h in hidden_widths]
        self.order = None if order is None else [int(o) for o in order]
        self.zero_last = zero_last
        self.seed = seed

        degrees = made_degrees(self.d, self.hidden_widths, self.order)
        masks = made_masks(degrees)
        widths = [self.d] + self.hidden_widths + [self.d]
        rng = np.random.default_rng(seed)
        self.layers: List[MaskedLinear] = []
        for i, mask in enumerate(masks):
            last = i == len(masks) - 1
            layer = MaskedLinear(widths[i], widths[i + 1], mask, zero_init=last and zero_last, rng=rng)
            self.layers.append(self.add_child(f'layers.{i}', layer))
        self.degrees = degrees

    def config(self):
        return {'d': self.d, 'hidden_widths': list(self.hidden_widths), 'order': self.order,
                'zero_last': self.zero_last, 'seed': self.seed}

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d:
            raise ConfigurationError(f"入力幅が一致しません: 期待 {self.d}, 実際 {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x
