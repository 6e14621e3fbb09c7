"""
勾配法によるパラメータ更新（Adam）
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from utils.errors import ConfigurationError
from .tensor import Tensor


@dataclass
class AdamState:
    """Adam の内部状態（パラメータ名ごとの1次・2次モーメント）"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"学習率は正である必要があります: {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"β1, β2 は [0, 1) の範囲です: {self.beta1}, {self.beta2}")

    def hyperparameters(self) -> Dict[str, float]:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps, 'step': self.step}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState) -> None:
    """
    バイアス補正付き Adam 更新をその場で適用

    Args:
        params: パラメータ名 → テンソル
        grads: パラメータ名 → 勾配（None はゼロ勾配扱い）
        state: 更新される Adam 状態
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape:
            raise ConfigurationError(f"勾配の形状が一致しません: {name} {grad.shape} vs {param.data.shape}")

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        if m.shape != param.data.shape:
            raise ConfigurationError(f"モーメントの形状が一致しません: {name} {m.shape} vs {param.data.shape}")

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v

        m_hat = m / bias1
        v_hat = v / bias2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)


class Adam:
    """名前付きパラメータ集合に対する Adam オプティマイザ"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: Optional[AdamState] = None):
        self.params = dict(params)
        self.state = state if state is not None else AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self) -> None:
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state)
