"""
ソース空間データ拡張モジュール
"""

from .source_augment import (
    AUGMENT_MODES,
    AugmentPlan,
    FeatureSpaceBatch,
    SourceSet,
    augment_source_set,
    export_source_sets_csv,
    feature_space_augment,
    oracle_augment,
    parametric_augment,
    permute_augment,
)

__all__ = [
    "AUGMENT_MODES", "SourceSet", "AugmentPlan", "FeatureSpaceBatch",
    "permute_augment", "parametric_augment", "oracle_augment", "feature_space_augment",
    "augment_source_set", "export_source_sets_csv",
]
