"""
ニューラルネット部品モジュール
"""

from .critics import FdvCritic, GclCritic, fdv_critic_score, gcl_critic_score
from .made import Made, MaskedLinear, made_degrees, made_masks
from .mlp import Identity, Mlp, mlp_forward
from .module import Module

__all__ = [
    "Module", "Mlp", "Identity", "mlp_forward",
    "MaskedLinear", "Made", "made_degrees", "made_masks",
    "GclCritic", "FdvCritic", "gcl_critic_score", "fdv_critic_score",
]
