"""
ユーティリティモジュール
"""

from .errors import (
    ConfigurationError,
    ECRTError,
    IngestionError,
    IntegrityError,
    NumericError,
    StageOrderError,
    UsageError,
)

__version__ = "1.0.0"

__all__ = [
    "ECRTError",
    "ConfigurationError",
    "UsageError",
    "StageOrderError",
    "NumericError",
    "IngestionError",
    "IntegrityError",
]
