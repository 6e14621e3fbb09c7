"""
コマンドラインと実験設定
"""

from .config import CONFIG_SCHEMA, ExperimentConfig, load_config, validate_config

__all__ = ["CONFIG_SCHEMA", "ExperimentConfig", "load_config", "validate_config"]
