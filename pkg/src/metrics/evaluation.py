"""
評価指標

NLL・Top-k 正解率・クラス別 F1・MMD・クラス条件付き相関の追跡
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from utils.errors import ConfigurationError, UsageError
from utils.file_utils import write_json_file

logger = logging.getLogger(__name__)

# MMD の平均埋め込みは 1/n で正規化（偏りのある推定量）
MMD_CONVENTION = 'biased-normalized-mean-embedding'
MMD_TILE = 1024


@dataclass
class MetricsReport:
    """評価結果。to_dict のキー名は固定"""
    nll: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    f1_per_class: List[float] = field(default_factory=list)
    macro_f1: Optional[float] = None
    per_class_accuracy: List[float] = field(default_factory=list)
    class_support: List[int] = field(default_factory=list)
    decorrelation_trace: Dict[int, float] = field(default_factory=dict)
    mmd: Dict[str, float] = field(default_factory=dict)
    mmd_convention: str = MMD_CONVENTION

    def record_mmd(self, mode: str, minority_size: int, value: float) -> None:
        self.mmd[f"{mode}/{int(minority_size)}"] = float(value)

    def merge(self, other: 'MetricsReport') -> 'MetricsReport':
        """other の値が入っている項目で上書きした新しいレポート"""
        merged = MetricsReport(**{k: v for k, v in self.__dict__.items()})
        for key, value in other.__dict__.items():
            if value is None or (isinstance(value, (list, dict)) and not value):
                continue
            setattr(merged, key, value)
        return merged

    def to_dict(self) -> dict:
        return {
            'nll': self.nll,
            'top1': self.top1,
            'top5': self.top5,
            'f1_per_class': list(self.f1_per_class),
            'macro_f1': self.macro_f1,
            'per_class_accuracy': list(self.per_class_accuracy),
            'class_support': list(self.class_support),
            'decorrelation_trace': {str(k): v for k, v in sorted(self.decorrelation_trace.items())},
            'mmd': dict(sorted(self.mmd.items())),
            'mmd_convention': self.mmd_convention,
        }

    def save(self, path: str) -> str:
        return write_json_file(path, self.to_dict())


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=1, keepdims=True)
    return logits - shift - np.log(np.exp(logits - shift).sum(axis=1, keepdims=True))


def classification_metrics(logits, labels, ks: Sequence[int] = (1, 5)) -> MetricsReport:
    """
    NLL・Top-k・クラス別 F1 を計算

    Args:
        logits: (n, M) のロジット
        labels: (n,) の正解ラベル
        ks: Top-k の k（1 と 5 を report に格納）

    Returns:
        MetricsReport（分類部分のみ）
    """
    logits = np.asarray(logits.data if hasattr(logits, 'data') else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise UsageError("評価データが空です")
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigurationError(f"ロジットとラベルの形状が整合しません: {logits.shape} vs {labels.shape}")
    n, num_classes = logits.shape
    if labels.min() < 0 or labels.max() >= num_classes:
        raise UsageError(f"ラベルが範囲外です（クラス数 {num_classes}）")

    nll = float(-_log_softmax(logits)[np.arange(n), labels].mean())

    # 同値は添字の小さい方を上位とする
    ranking = np.argsort(-logits, axis=1, kind='stable')
    topk = {}
    for k in sorted(set(ks) | {1, 5}):
        kk = min(k, num_classes)
        topk[k] = float(np.mean(np.any(ranking[:, :kk] == labels[:, None], axis=1)))

    predicted = ranking[:, 0]
    _, recall, f1, support = precision_recall_fscore_support(labels, predicted, labels=np.arange(num_classes),
                                                             average=None, zero_division=0)

    present = support > 0
    macro_f1 = float(f1[present].mean()) if np.any(present) else 0.0

    return MetricsReport(
        nll=nll,
        top1=topk[1],
        top5=topk[5],
        f1_per_class=[float(v) for v in f1],
        macro_f1=macro_f1,
        per_class_accuracy=[float(v) for v in recall],
        class_support=[int(v) for v in support],
    )


@dataclass
class MmdConfig:
    """ガウス RBF カーネルの帯域幅 σ"""
    sigma: float = 0.5
    tile: int = MMD_TILE

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigurationError(f"σ は正である必要があります: {self.sigma}")
        if self.tile < 1:
            raise ConfigurationError(f"タイルサイズが不正です: {self.tile}")


def _kernel_mean(a: np.ndarray, b: np.ndarray, sigma: float, tile: int) -> float:
    """mean_{i,j} exp(−‖a_i − b_j‖² / 2σ²) をタイルごとに計算"""
    total = 0.0
    b_sq = (b * b).sum(axis=1)
    for start in range(0, a.shape[0], tile):
        block = a[start:start + tile]
        sq = (block * block).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * block @ b.T
        total += np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma ** 2)).sum()
    return total / (a.shape[0] * b.shape[0])


def mmd(set_a, set_b, cfg: Optional[MmdConfig] = None) -> float:
    """
    正規化した平均埋め込みの差の RKHS ノルム

    sqrt(max(0, mean K_AA + mean K_BB − 2 mean K_AB))
    """
    cfg = cfg or MmdConfig()
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise UsageError("MMD の入力集合が空です")
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"MMD の入力次元が一致しません: {a.shape[1]} vs {b.shape[1]}")
    k_aa = _kernel_mean(a, a, cfg.sigma, cfg.tile)
    k_bb = _kernel_mean(b, b, cfg.sigma, cfg.tile)
    k_ab = _kernel_mean(a, b, cfg.sigma, cfg.tile)
    return float(np.sqrt(max(0.0, k_aa + k_bb - 2.0 * k_ab)))


def class_conditional_decorrelation(sources, labels, min_per_class: int = 2) -> float:
    """
    クラスごとのピアソン相関行列の非対角成分の絶対値平均を、クラス間で平均

    分散 0 の座標の相関は 0 として扱う。
    """
    sources = np.asarray(sources.data if hasattr(sources, 'data') else sources, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if sources.ndim != 2 or sources.shape[0] != labels.shape[0]:
        raise ConfigurationError(f"ソースとラベルの形状が整合しません: {sources.shape} vs {labels.shape}")
    d = sources.shape[1]
    if d < 2:
        return 0.0

    off_diagonal = ~np.eye(d, dtype=bool)
    values = []
    for label in np.unique(labels):
        rows = sources[labels == label]
        if rows.shape[0] < min_per_class:
            continue
        centered = rows - rows.mean(axis=0)
        std = centered.std(axis=0)
        degenerate = std <= 0
        if np.any(degenerate):
            logger.warning(f"警告: クラス {int(label)} に分散 0 の座標があります: {np.where(degenerate)[0].tolist()}")
        safe = np.where(degenerate, 1.0, std)
        normalized = centered / safe
        corr = normalized.T @ normalized / rows.shape[0]
        corr[degenerate, :] = 0.0
        corr[:, degenerate] = 0.0
        values.append(np.abs(corr[off_diagonal]).mean())

    if not values:
        raise UsageError(f"相関を測れるクラスがありません（クラスあたり {min_per_class} 件以上が必要）")
    return float(np.mean(values))
