"""
正規化フローモジュール
"""

from .maf import MafBlock, MafFlow, flow_forward, flow_inverse, flow_log_likelihood
from .prior import SourcePrior

__all__ = ["MafBlock", "MafFlow", "SourcePrior", "flow_forward", "flow_inverse", "flow_log_likelihood"]
