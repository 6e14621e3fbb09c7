"""
学習に使う損失関数

- 交差エントロピー（任意で重要度重み付き）
- GCL（ロジスティック回帰型の対照損失）
- FDV（エネルギー型の相互情報量推定、凍結 critic による比の項つき）
- 尤度正則化つき分離損失
- ソース空間拡張による精緻化損失
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor, as_tensor, log_softmax, mean, pick, softplus
from utils.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

OBJECTIVES = ('gcl', 'fdv')
DERANGEMENT_RETRIES = 16


def _labels_array(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def cross_entropy_per_sample(logits, labels) -> Tensor:
    """行ごとの -log softmax(logits)[y]"""
    logits = as_tensor(logits)
    labels = _labels_array(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigurationError(f"ロジットとラベルの形状が整合しません: {logits.shape} vs {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"ラベルが範囲外です（クラス数 {num_classes}）: "
                         f"{sorted(set(labels[(labels < 0) | (labels >= num_classes)].tolist()))[:10]}")
    return -pick(log_softmax(logits, axis=1), labels)


def cross_entropy_loss(logits, labels, class_weights: Optional[np.ndarray] = None) -> Tensor:
    """
    平均（重み付き）交差エントロピー

    Args:
        logits: (n, M) のロジット
        labels: (n,) の正解ラベル
        class_weights: (M,) のクラス重み（任意）

    Returns:
        スカラー損失
    """
    nll = cross_entropy_per_sample(logits, labels)
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)
        nll = nll * weights[_labels_array(labels)]
    return mean(nll)


def importance_weights(class_counts: Sequence[int]) -> np.ndarray:
    """
    クラス重み n / (M · n_m)

    重み付きの経験クラス分布が一様になる。
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigurationError(f"クラス数の配列が不正です: {class_counts}")
    if np.any(counts < 1):
        zero = np.where(counts < 1)[0].tolist()
        raise ConfigurationError(f"サンプル数 0 のクラスがあります: {zero}")
    return counts.sum() / (counts.size * counts)


@dataclass
class GclBatchPlan:
    """一致ペア (y_i, s_i) と不一致ペア (y_j, s_i), j = shuffle[i] ≠ i"""
    labels: np.ndarray
    shuffle: np.ndarray

    @property
    def incongruent_labels(self) -> np.ndarray:
        return self.labels[self.shuffle]

    def __len__(self):
        return int(self.labels.shape[0])


def make_gcl_plan(labels, rng: np.random.Generator) -> GclBatchPlan:
    """
    固定点のないバッチ内シャッフルで不一致ペアを作る

    16 回引き直しても固定点が残る場合は巡回シフトを使う。
    """
    labels = _labels_array(labels)
    n = labels.shape[0]
    if n < 2:
        raise UsageError(f"不一致ペアを作るにはバッチサイズ 2 以上が必要です: {n}")
    index = np.arange(n)
    for _ in range(DERANGEMENT_RETRIES):
        perm = rng.permutation(n)
        if not np.any(perm == index):
            return GclBatchPlan(labels=labels, shuffle=perm)
    return GclBatchPlan(labels=labels, shuffle=(index + 1) % n)


def gcl_loss_from_sources(critic, s, plan: GclBatchPlan) -> Tensor:
    """mean h(−r(y_i, s_i)) + mean h(r(y_j, s_i)), h = softplus"""
    s = as_tensor(s)
    if len(plan) < 2:
        raise UsageError(f"GCL にはバッチサイズ 2 以上が必要です: {len(plan)}")
    if s.shape[0] != len(plan):
        raise UsageError(f"ソース行数とバッチ計画が一致しません: {s.shape[0]} vs {len(plan)}")
    congruent = critic.score(plan.labels, s)
    incongruent = critic.score(plan.incongruent_labels, s)
    return mean(softplus(-congruent)) + mean(softplus(incongruent))


def gcl_loss(critic, flow, z, plan: GclBatchPlan) -> Tensor:
    """GCL 損失（勾配は critic とフローの両方に流れる）"""
    s, _ = flow(z)
    return gcl_loss_from_sources(critic, s, plan)


def _fdv_terms(critic, s, labels) -> Tuple[Tensor, np.ndarray]:
    labels = _labels_array(labels)
    s = as_tensor(s)
    n = s.shape[0]
    if n < 2:
        raise UsageError(f"FDV にはバッチサイズ 2 以上が必要です: {n}")
    if np.unique(labels).size < 2:
        logger.warning("警告: バッチ内のラベルが1種類のみです（負例が退化しています）")

    scores = critic.pairwise_scores(labels, s)
    frozen = scores.data.copy()
    diag_frozen = np.diag(frozen)
    shifted_frozen = frozen - diag_frozen[:, None]
    stabilizer = shifted_frozen.max(axis=1, keepdims=True)

    # 凍結 critic による DV 推定: ĝ_ii − log mean_j exp ĝ_ij
    dv_frozen = -(np.log(np.exp(shifted_frozen - stabilizer).sum(axis=1)) + stabilizer[:, 0]) + np.log(n)

    diag = pick(scores, np.arange(n)).reshape(n, 1)
    numerator = ((scores - diag) - stabilizer).exp().sum(axis=1)
    denominator = np.exp(shifted_frozen - stabilizer).sum(axis=1)
    ratio = numerator / denominator
    estimate = (ratio * -1.0) + (dv_frozen + 1.0)
    return estimate, dv_frozen


def fdv_loss_from_sources(critic, s, labels) -> Tensor:
    """−I_FDV のバッチ平均（最小化で相互情報量を最大化）"""
    estimate, _ = _fdv_terms(critic, s, labels)
    return -mean(estimate)


def fdv_loss(critic, flow, z, labels) -> Tensor:
    s, _ = flow(z)
    return fdv_loss_from_sources(critic, s, labels)


def fdv_estimate(critic, s, labels) -> float:
    """DV 項による相互情報量の推定値（バッチ平均）"""
    _, dv = _fdv_terms(critic, s, labels)
    return float(dv.mean())


@dataclass
class RegularizedGclConfig:
    """尤度正則化つき分離損失の設定"""
    rho: float = 1e-2
    objective: str = 'gcl'
    prior_mode: str = 'shared'

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigurationError(f"ρ は 0 以上である必要があります: {self.rho}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"未知の目的関数です: {self.objective}（{OBJECTIVES} のいずれか）")
        if self.prior_mode not in ('shared', 'per_class'):
            raise ConfigurationError(f"未知の事前分布モードです: {self.prior_mode}")


def regularized_demixing_loss(cfg: RegularizedGclConfig, critic, flow, prior, z, labels,
                              plan: Optional[GclBatchPlan] = None,
                              rng: Optional[np.random.Generator] = None,
                              terms: Optional[Dict[str, float]] = None) -> Tensor:
    """
    対照損失 + ρ · (−平均フロー対数尤度)

    Args:
        cfg: 正則化設定
        critic: GclCritic または FdvCritic
        flow: MAF
        prior: SourcePrior
        z: (n, d) の特徴量（エンコーダ出力、勾配なし）
        labels: (n,) のラベル
        plan: GCL のバッチ計画（省略時は rng から作る）
        rng: 計画作成用の乱数
        terms: 渡された場合、各項の値を書き込む

    Returns:
        スカラー損失
    """
    labels = _labels_array(labels)
    s, logdet = flow(z)
    if cfg.objective == 'gcl':
        if plan is None:
            if rng is None:
                raise UsageError("GCL にはバッチ計画か乱数生成器が必要です")
            plan = make_gcl_plan(labels, rng)
        contrastive = gcl_loss_from_sources(critic, s, plan)
    else:
        contrastive = fdv_loss_from_sources(critic, s, labels)

    total = contrastive
    flow_nll = None
    if cfg.rho > 0:
        log_lik = logdet + prior.log_prob(s, labels if prior.requires_labels else None)
        flow_nll = -mean(log_lik)
        total = contrastive + flow_nll * cfg.rho

    if terms is not None:
        terms['contrastive'] = contrastive.item()
        terms['flow_nll'] = float('nan') if flow_nll is None else flow_nll.item()
        terms['total'] = total.item()
    return total


@dataclass
class AugmentedLossConfig:
    """拡張精緻化損失の設定"""
    lam: float = 1e-3
    minority_classes: Sequence[int] = field(default_factory=tuple)
    weighted_base: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"λ は [0, 1] の範囲である必要があります: {self.lam}")
        self.minority_classes = tuple(int(m) for m in self.minority_classes)


def augmented_refinement_loss(cfg: AugmentedLossConfig, predictor,
                              real_minority: Tuple[np.ndarray, np.ndarray],
                              augmented: Tuple[np.ndarray, np.ndarray],
                              batch: Tuple[np.ndarray, np.ndarray],
                              class_weights: Optional[np.ndarray] = None) -> Tensor:
    """
    L(φ) + λ (E[ℓ(h(s̃), y)] − E[ℓ(h(s), y)])（少数クラスのみ）

    Args:
        cfg: λ と少数クラス
        predictor: ソース空間の予測器 h_φ
        real_minority: 実データの少数クラス (ソース, ラベル)
        augmented: 合成ソース (ソース, ラベル)
        batch: 基本損失に使う全クラスのバッチ (ソース, ラベル)
        class_weights: weighted_base のときのクラス重み

    Returns:
        スカラー損失
    """
    batch_s, batch_y = batch
    weights = class_weights if cfg.weighted_base else None
    base = cross_entropy_loss(predictor(batch_s), batch_y, weights)
    if cfg.lam == 0.0:
        return base

    aug_s, aug_y = augmented
    if aug_s is None or len(aug_s) == 0:
        raise UsageError("λ > 0 ですが合成サンプルが空です")
    real_s, real_y = real_minority
    if real_s is None or len(real_s) == 0:
        raise UsageError("λ > 0 ですが実データの少数クラスサンプルが空です")

    aug_term = cross_entropy_loss(predictor(aug_s), aug_y)
    real_term = cross_entropy_loss(predictor(real_s), real_y)
    return base + (aug_term - real_term) * cfg.lam
