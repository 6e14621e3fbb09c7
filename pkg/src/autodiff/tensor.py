"""
逆モード自動微分エンジン
numpy 配列の上に計算グラフを記録し、逆伝播で勾配を求める
"""

import logging
import threading
from contextlib import contextmanager
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigurationError, NumericError, UsageError

logger = logging.getLogger(__name__)

# softplus(r) は r がこれを超えると r を返す
SOFTPLUS_LINEAR_THRESHOLD = 30.0

_SUPPORTED_DTYPES = (np.float64, np.float32)
_default_dtype = np.float64
_grad_mode = threading.local()


def set_default_dtype(dtype) -> None:
    """既定の浮動小数点精度を設定（64bit が既定、32bit は高速化用）"""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise ConfigurationError(f"未対応の精度です: {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    """既定の浮動小数点精度を返す"""
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """一時的に既定精度を切り替える"""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """ブロック内では計算グラフを記録しない（推論・凍結評価用、スレッドごと）"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


class Tensor:
    """勾配を追跡できる密な数値配列"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _ctx: Optional['Function'] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx = _ctx

    # 基本情報
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"要素数1のテンソルのみ item() できます: shape={self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> 'Tensor':
        """勾配追跡を切った複製"""
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # 演算子
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, other)
    def __rmatmul__(self, other): return MatMul.apply(other, self)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    # メソッド形式の演算
    def sum(self, axis=None, keepdims: bool = False): return Sum.apply(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis=axis, keepdims=keepdims)
    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def tanh(self): return Tanh.apply(self)
    def relu(self): return Relu.apply(self)
    def softplus(self): return Softplus.apply(self)
    def sigmoid(self): return Sigmoid.apply(self)
    def sqrt(self): return Sqrt.apply(self)
    def reshape(self, *shape): return Reshape.apply(self, shape=_normalize_shape(shape))
    def transpose(self): return Transpose.apply(self)

    @property
    def T(self): return Transpose.apply(self)

    def logsumexp(self, axis=None, keepdims: bool = False):
        return LogSumExp.apply(self, axis=axis, keepdims=keepdims)

    def log_softmax(self, axis: int = -1):
        return log_softmax(self, axis=axis)

    def backward(self, params: Optional[Sequence['Tensor']] = None) -> Optional[List[np.ndarray]]:
        return backward(self, params)


def _normalize_shape(shape) -> Tuple[int, ...]:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        return tuple(shape[0])
    return tuple(shape)


def as_tensor(value) -> Tensor:
    """スカラー・配列を定数テンソルに変換"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストされた勾配を元の形状へ縮約"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op_name: str, *arrays: np.ndarray) -> None:
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        shapes = ', '.join(str(a.shape) for a in arrays)
        raise ConfigurationError(f"{op_name}: 形状が整合しません {shapes}")


class Function:
    """計算グラフのノード（順伝播と随伴の組）"""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        ctx = cls(*tensors)
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=track, _ctx=ctx if track else None, dtype=out.dtype)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        _check_broadcast('add', a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast('sub', a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast('mul', a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_broadcast('div', a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ConfigurationError(f"matmul: 形状が整合しません {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = grad.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError(f"log: 非正の入力が {int(np.sum(a <= 0))} 個あります")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -a))


class Sigmoid(Function):
    def forward(self, a):
        self.out = _stable_sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    """h(r) = log(1 + exp(r))、r > 30 では r をそのまま返す"""

    def forward(self, a):
        self.a = a
        clipped = np.minimum(a, SOFTPLUS_LINEAR_THRESHOLD)
        return np.where(a > SOFTPLUS_LINEAR_THRESHOLD, a, np.log1p(np.exp(clipped))).astype(a.dtype)

    def backward(self, grad):
        return (grad * _stable_sigmoid(self.a),)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise NumericError("sqrt: 負の入力があります")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        # 0 での勾配は 0 とする（ゼロノルムの退化方向）
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad * 0.5 / safe, 0.0),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class LogSumExp(Function):
    """最大値シフトで安定化した log-sum-exp"""

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        shifted = np.exp(a - m)
        total = shifted.sum(axis=axis, keepdims=True)
        self.softmax = shifted / total
        out = np.log(total) + m
        if not keepdims:
            out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
        return np.asarray(out)

    def backward(self, grad):
        if not self.keepdims:
            if self.axis is None:
                grad = np.reshape(grad, (1,) * len(self.shape))
            else:
                grad = np.expand_dims(grad, self.axis)
        return (grad * self.softmax,)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ConfigurationError(f"reshape: {a.shape} を {shape} に変形できません")

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


class GetItem(Function):
    """スライス・インデックス取得（gather を含む）"""

    def forward(self, a, index):
        self.shape, self.index, self.dtype = a.shape, index, a.dtype
        try:
            return np.array(a[index])
        except IndexError as e:
            raise UsageError(f"インデックスが範囲外です: {e}")

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                    s1 != s2 for i, (s1, s2) in enumerate(zip(arr.shape, ref.shape)) if i != axis % ref.ndim):
                raise ConfigurationError(
                    f"concat: 形状が整合しません {[a.shape for a in arrays]} (axis={axis})")
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


# 関数形式のプリミティブ

def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def exp(a) -> Tensor: return Exp.apply(a)
def log(a) -> Tensor: return Log.apply(a)
def tanh(a) -> Tensor: return Tanh.apply(a)
def relu(a) -> Tensor: return Relu.apply(a)
def sigmoid(a) -> Tensor: return Sigmoid.apply(a)
def softplus(a) -> Tensor: return Softplus.apply(a)
def sqrt(a) -> Tensor: return Sqrt.apply(a)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat: 入力が空です")
    return Concat.apply(*tensors, axis=axis)


def gather(a, indices) -> Tensor:
    """先頭軸をインデックス配列で取り出す"""
    return GetItem.apply(a, index=np.asarray(indices, dtype=np.int64))


def pick(a, columns) -> Tensor:
    """各行から指定列の要素を1つずつ取り出す（a[i, columns[i]]）"""
    a = as_tensor(a)
    columns = np.asarray(columns, dtype=np.int64)
    if a.ndim != 2 or columns.shape != (a.shape[0],):
        raise ConfigurationError(f"pick: 形状が整合しません {a.shape} と {columns.shape}")
    return GetItem.apply(a, index=(np.arange(a.shape[0]), columns))


def slice_cols(a, start: int, stop: int) -> Tensor:
    return GetItem.apply(a, index=(slice(None), slice(start, stop)))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise UsageError("mean: 空のテンソルです")
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def log_sum_exp(a, axis=None, keepdims: bool = False) -> Tensor:
    return LogSumExp.apply(a, axis=axis, keepdims=keepdims)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return a - LogSumExp.apply(a, axis=axis, keepdims=True)


def forward_primitive(name: str, *inputs, **kwargs) -> Tensor:
    """名前でプリミティブを呼び出す"""
    table = {
        'matmul': matmul, 'add': Add.apply, 'sub': Sub.apply, 'mul': Mul.apply, 'div': Div.apply,
        'exp': exp, 'log': log, 'tanh': tanh, 'relu': relu, 'sigmoid': sigmoid,
        'softplus': softplus, 'sqrt': sqrt, 'sum': lambda a, **kw: Sum.apply(a, **kw),
        'mean': mean, 'log_sum_exp': log_sum_exp, 'log_softmax': log_softmax,
        'gather': gather, 'pick': pick, 'slice_cols': slice_cols,
        'concat': lambda *ts, **kw: concat(ts, **kw),
    }
    if name not in table:
        raise UsageError(f"未知のプリミティブです: {name}")
    return table[name](*inputs, **kwargs)


class GradTape:
    """
    逆伝播用の記録

    損失から到達できる演算ノードを逆トポロジカル順に並べ、各ノードを一度だけ辿る。
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, loss: Tensor) -> 'GradTape':
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        order.reverse()
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> Dict[int, np.ndarray]:
        """随伴を逆順に伝播し、テンソル id → 勾配 の辞書を返す"""
        grads: Dict[int, np.ndarray] = {id(self.nodes[0]): seed}
        for node in self.nodes:
            grad = grads.get(id(node))
            if grad is None or node._ctx is None:
                continue
            parent_grads = node._ctx.backward(grad)
            for parent, pgrad in zip(node._ctx.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pgrad if key not in grads else grads[key] + pgrad
        return grads


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> Optional[List[np.ndarray]]:
    """
    スカラー損失から逆伝播

    Args:
        loss: スカラーの損失テンソル
        params: 勾配を返してほしいパラメータ（任意）

    Returns:
        params を指定した場合はその順の勾配（到達しないものはゼロ）
    """
    if loss.size != 1:
        raise UsageError(f"backward はスカラー損失のみ対応します: shape={loss.shape}")
    if not loss.requires_grad:
        raise UsageError("損失に記録された演算がありません（勾配を追跡するパラメータに依存していません）")

    tape = GradTape.record(loss)
    grads = tape.replay(np.ones_like(loss.data))

    for node in tape.nodes:
        if node.is_leaf and id(node) in grads:
            g = grads[id(node)].astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g

    if params is None:
        return None
    return [grads.get(id(p), np.zeros_like(p.data)).copy() if p.requires_grad else np.zeros_like(p.data)
            for p in params]


def numerical_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """中心差分による数値勾配（検証用）"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn(x))
        flat[i] = orig - step
        minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad
