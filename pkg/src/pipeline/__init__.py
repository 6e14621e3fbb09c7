"""
段階的パイプライン・チェックポイント・検証実験
"""

from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .stages import (RunData, RunVariant, StageState, build_run_data, evaluate_state, run_pipeline,
                     stage1_pretrain, stage2_demix, stage3_augment, stage4_refine)
from .trainer import FitResult, fit

__all__ = [
    "FitResult",
    "RunData",
    "RunVariant",
    "StageState",
    "build_run_data",
    "evaluate_state",
    "fit",
    "inspect_checkpoint",
    "load_checkpoint",
    "run_pipeline",
    "save_checkpoint",
    "stage1_pretrain",
    "stage2_demix",
    "stage3_augment",
    "stage4_refine",
]
