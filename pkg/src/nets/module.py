"""
ニューラルネット部品の基底クラス
"""

from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from autodiff.tensor import Tensor
from utils.errors import ConfigurationError, IntegrityError


class Module:
    """パラメータと子モジュールを名前付きで管理する基底クラス"""

    # チェックポイントからの復元に使う種別名
    kind = 'module'

    def __init__(self):
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self._children: 'OrderedDict[str, Module]' = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, child: 'Module') -> 'Module':
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for child_name, child in self._children.items():
            yield from child.named_parameters(prefix + child_name + '.')

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def train(self) -> 'Module':
        self.training = True
        for child in self._children.values():
            child.train()
        return self

    def eval(self) -> 'Module':
        self.training = False
        for child in self._children.values():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, param.data.copy()) for name, param in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.parameters()
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing or unexpected:
            raise IntegrityError(f"パラメータ名が一致しません: 欠損={missing}, 余分={unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.data.shape:
                raise IntegrityError(f"パラメータ形状が一致しません: {name} {value.shape} vs {param.data.shape}")
            param.data[...] = value

    def spec(self) -> Dict:
        """再構築用の種別と引数"""
        return {'kind': self.kind, 'kwargs': self.config()}

    def config(self) -> Dict:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """[-1/√fan_in, +1/√fan_in] の一様初期化"""
    if fan_in <= 0:
        raise ConfigurationError(f"fan_in は正である必要があります: {fan_in}")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
