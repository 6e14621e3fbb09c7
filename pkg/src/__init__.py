"""
ソース空間拡張による不均衡分類の実験ツール
"""

__version__ = "1.0.0"
