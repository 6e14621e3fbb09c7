"""
データ生成・読み込みモジュール
"""

from .binning import assign_bins, bin_edges, bin_labels
from .dataset import Dataset, DatasetConverter, spec_hash, train_val_split
from .imbalance import ImbalanceSpec, apply_step_imbalance, mnist_step_spec, split_step_imbalance
from .mnist_idx import load_mnist_idx
from .toy import ToySpec, generate_extreme_toy, generate_toy, henon_inverse, henon_map

__all__ = [
    "Dataset", "DatasetConverter", "spec_hash", "train_val_split",
    "ToySpec", "generate_toy", "generate_extreme_toy", "henon_map", "henon_inverse",
    "load_mnist_idx",
    "ImbalanceSpec", "mnist_step_spec", "apply_step_imbalance", "split_step_imbalance",
    "bin_labels", "bin_edges", "assign_bins",
]
