"""
評価指標モジュール
"""

from .evaluation import (
    MetricsReport,
    MmdConfig,
    class_conditional_decorrelation,
    classification_metrics,
    mmd,
)

__all__ = ["MetricsReport", "MmdConfig", "classification_metrics", "mmd", "class_conditional_decorrelation"]
