"""
ソース集合の品質チェックモジュール
"""

from .source_quality import SourceQualityChecker

__all__ = ["SourceQualityChecker"]
