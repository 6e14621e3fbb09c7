"""
自動微分モジュール
"""

from .optim import Adam, AdamState, adam_step
from .tensor import (
    GradTape,
    Tensor,
    backward,
    concat,
    gather,
    log_softmax,
    log_sum_exp,
    no_grad,
    pick,
    set_default_dtype,
)

__all__ = [
    "Tensor", "GradTape", "backward", "no_grad", "set_default_dtype",
    "concat", "gather", "pick", "log_sum_exp", "log_softmax",
    "Adam", "AdamState", "adam_step",
]
