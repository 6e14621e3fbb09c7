"""
損失関数モジュール
"""

from .losses import (
    AugmentedLossConfig,
    GclBatchPlan,
    RegularizedGclConfig,
    augmented_refinement_loss,
    cross_entropy_loss,
    cross_entropy_per_sample,
    fdv_estimate,
    fdv_loss,
    fdv_loss_from_sources,
    gcl_loss,
    gcl_loss_from_sources,
    importance_weights,
    make_gcl_plan,
    regularized_demixing_loss,
)

__all__ = [
    "cross_entropy_loss", "cross_entropy_per_sample", "importance_weights",
    "GclBatchPlan", "make_gcl_plan", "gcl_loss", "gcl_loss_from_sources",
    "fdv_loss", "fdv_loss_from_sources", "fdv_estimate",
    "RegularizedGclConfig", "regularized_demixing_loss",
    "AugmentedLossConfig", "augmented_refinement_loss",
]
