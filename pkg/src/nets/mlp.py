"""
多層パーセプトロン（エンコーダ・予測器・臨界関数の部品）
"""

from typing import List, Optional, Sequence, Union

import numpy as np

from autodiff.tensor import Tensor, as_tensor
from utils.errors import ConfigurationError
from .module import Module, uniform_init

ACTIVATIONS = ('relu', 'tanh', 'linear')


class Mlp(Module):
    """全結合ネットワーク（層ごとの活性化とドロップアウト）"""

    kind = 'mlp'

    def __init__(self,
                 widths: Sequence[int],
                 activations: Optional[Union[str, Sequence[str]]] = None,
                 dropout: Union[float, Sequence[float]] = 0.0,
                 zero_last: bool = False,
                 seed: int = 0):
        """
        Args:
            widths: 入力幅から出力幅までの層幅（例: [784, 32, 32, 2]）
            activations: 層ごとの活性化。省略時は隠れ層 ReLU・最終層 linear
            dropout: 層ごとのドロップアウト率（学習時のみ）
            zero_last: 最終層の重みとバイアスをゼロで初期化
            seed: 初期化用シード
        """
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigurationError(f"層幅が不正です: {widths}")

        n_layers = len(widths) - 1
        if activations is None:
            activations = ['relu'] * (n_layers - 1) + ['linear']
        elif isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ['linear']
        activations = list(activations)
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ConfigurationError(f"活性化の指定が不正です: {activations}")

        if isinstance(dropout, (int, float)):
            dropout = [float(dropout)] * (n_layers - 1) + [0.0]
        dropout = [float(r) for r in dropout]
        if len(dropout) != n_layers or any(not 0.0 <= r < 1.0 for r in dropout):
            raise ConfigurationError(f"ドロップアウト率が不正です: {dropout}")

        self.widths = widths
        self.activations = activations
        self.dropout = dropout
        self.zero_last = zero_last
        self.seed = seed
        self._dropout_rng = np.random.default_rng(seed + 1)

        rng = np.random.default_rng(seed)
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == n_layers - 1
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                w = uniform_init(rng, fan_in, (fan_in, fan_out))
                b = uniform_init(rng, fan_in, (fan_out,))
            self.weights.append(self.add_param(f'layers.{i}.weight', w))
            self.biases.append(self.add_param(f'layers.{i}.bias', b))

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def config(self):
        return {
            'widths': list(self.widths),
            'activations': list(self.activations),
            'dropout': list(self.dropout),
            'zero_last': self.zero_last,
            'seed': self.seed,
        }

    def forward(self, batch) -> Tensor:
        """
        順伝播

        Args:
            batch: (n, 入力幅) または (入力幅,) の入力

        Returns:
            出力の活性
        """
        x = as_tensor(batch)
        if x.shape[-1] != self.in_features:
            raise ConfigurationError(f"入力幅が一致しません: 期待 {self.in_features}, 実際 {x.shape[-1]}")

        for w, b, act, rate in zip(self.weights, self.biases, self.activations, self.dropout):
            x = x @ w + b
            if act == 'relu':
                x = x.relu()
            elif act == 'tanh':
                x = x.tanh()
            if rate > 0.0 and self.training:
                keep = (self._dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
                x = x * keep
        return x


def mlp_forward(net: Mlp, batch) -> Tensor:
    """Mlp の順伝播（関数形式）"""
    return net.forward(batch)


class Identity(Module):
    """恒等写像（特徴量が既に低次元のときのエンコーダ）"""

    kind = 'identity'

    def __init__(self, width: int):
        super().__init__()
        self.width = int(width)

    @property
    def in_features(self) -> int:
        return self.width

    @property
    def out_features(self) -> int:
        return self.width

    def config(self):
        return {'width': self.width}

    def forward(self, batch) -> Tensor:
        x = as_tensor(batch)
        if x.shape[-1] != self.width:
            raise ConfigurationError(f"入力幅が一致しません: 期待 {self.width}, 実際 {x.shape[-1]}")
        return x
