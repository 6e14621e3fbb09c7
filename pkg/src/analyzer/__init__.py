"""
クラス不均衡の分析モジュール
"""

from .class_balance import ClassBalanceAnalyzer

__all__ = ["ClassBalanceAnalyzer"]
