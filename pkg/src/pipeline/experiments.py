"""
小規模な検証実験

- 拡張モードごとの MMD 比較（Hénon トイ、正解の分離関数を使用）
- 拡張リスクの不偏性のモンテカルロ確認
- ソース空間と特徴空間での学習速度の比較
"""

import logging
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from augment.source_augment import SourceSet, parametric_augment, permute_augment
from data.toy import ToySpec, generate_toy, henon_inverse
from metrics.evaluation import MmdConfig, mmd
from utils.errors import ConfigurationError, UsageError
from utils.seeding import derive_int_seed

from .stages import RunData, StageState, build_predictor, encode, fit_classifier, to_sources

logger = logging.getLogger(__name__)

MMD_MODES = ('nonparametric', 'parametric', 'oracle')
MINORITY_POOL_SIZES = (5, 10, 20, 50, 75, 100, 150)
REFERENCE_SIZE = 2000


def toy_class_sources(label: int, count: int, seed: int, spec: Optional[ToySpec] = None) -> np.ndarray:
    """
    Hénon トイの 1 クラス分を生成し、正解の逆写像でソースに戻す

    Returns:
        (count, 2) のソース
    """
    spec = spec or ToySpec()
    if not 0 <= label < spec.num_classes:
        raise ConfigurationError(f"クラス {label} はトイデータに存在しません（クラス数 {spec.num_classes}）")
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    counts[label] = count
    dataset = generate_toy(ToySpec(means=spec.means, spreads=spec.spreads, per_class=counts.tolist(),
                                   mixing=spec.mixing, spread_is_variance=spec.spread_is_variance), seed=seed)
    return henon_inverse(dataset.features) if spec.mixing == 'henon' else dataset.features


def mmd_mode_comparison(pool_sizes: Sequence[int] = MINORITY_POOL_SIZES,
                        seeds: Iterable[int] = range(10),
                        minority_class: int = 0,
                        reference_size: int = REFERENCE_SIZE,
                        sigma: float = 0.5,
                        modes: Sequence[str] = ('nonparametric', 'parametric'),
                        count: Optional[int] = None,
                        std_floor: float = 1e-4) -> pd.DataFrame:
    """
    少数クラスのプールサイズごとに、拡張結果と大きな参照集合の MMD を比較

    Args:
        pool_sizes: 少数クラスのプールサイズ
        seeds: 反復のシード
        minority_class: 対象クラス
        reference_size: 参照集合の件数
        sigma: RBF カーネル帯域幅
        modes: nonparametric / parametric / oracle
        count: 合成数（省略時は reference_size）

    Returns:
        列 mode, pool_size, seed, mmd の DataFrame
    """
    unknown = [m for m in modes if m not in MMD_MODES]
    if unknown:
        raise ConfigurationError(f"未知の拡張モードです: {unknown}（{MMD_MODES} のいずれか）")
    count = int(count or reference_size)
    cfg = MmdConfig(sigma=sigma)
    rows = []
    for seed in seeds:
        reference = toy_class_sources(minority_class, reference_size, derive_int_seed(seed, 'mmd', 'reference'))
        holdout = None
        if 'oracle' in modes:
            holdout = SourceSet(label=minority_class,
                                sources=toy_class_sources(minority_class, reference_size,
                                                          derive_int_seed(seed, 'mmd', 'holdout')))
        for pool_size in pool_sizes:
            pool = SourceSet(label=minority_class,
                             sources=toy_class_sources(minority_class, pool_size,
                                                       derive_int_seed(seed, 'mmd', 'pool', int(pool_size))))
            for mode in modes:
                aug_seed = derive_int_seed(seed, 'mmd', mode, int(pool_size))
                if mode == 'nonparametric':
                    synthetic = permute_augment(pool, count, aug_seed)
                elif mode == 'parametric':
                    synthetic = parametric_augment(pool, count, aug_seed, std_floor=std_floor)
                else:
                    synthetic = permute_augment(holdout, count, aug_seed)
                rows.append({'mode': mode, 'pool_size': int(pool_size), 'seed': int(seed),
                             'mmd': mmd(synthetic.sources, reference, cfg)})
        logger.info(f"MMD 比較: シード {seed} 完了")
    return pd.DataFrame(rows, columns=['mode', 'pool_size', 'seed', 'mmd'])


def aggregate_mean_sem(frame: pd.DataFrame, by: Sequence[str], values: Sequence[str]) -> pd.DataFrame:
    """グループごとの平均と標準誤差（列名は <値>_mean, <値>_sem, n）"""
    if frame.empty:
        return pd.DataFrame(columns=list(by) + [f"{v}_{s}" for v in values for s in ('mean', 'sem')] + ['n'])
    grouped = frame.groupby(list(by), sort=True)
    result = grouped[list(values)].agg(['mean', 'sem'])
    result.columns = [f"{value}_{stat}" for value, stat in result.columns]
    result['n'] = grouped.size()
    return result.reset_index()


def _bayes_logits(sources: np.ndarray, spec: ToySpec) -> np.ndarray:
    """正解のクラス条件付きガウスによる対数尤度（一様な事前確率）"""
    means = np.asarray(spec.means, dtype=np.float64)
    stds = spec.stds
    diff = (sources[:, None, :] - means[None, :, :]) / stds[None, :, :]
    return -0.5 * (diff ** 2).sum(axis=2) - np.log(stds).sum(axis=1)[None, :]


def _risk(logits: np.ndarray, label: int) -> float:
    shift = logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    return float(np.mean(log_norm - logits[:, label]))


def unbiasedness_check(trials: int = 200, pool_size: int = 20, minority_class: int = 0,
                       seed: int = 0, count: Optional[int] = None) -> Dict:
    """
    置換拡張による少数クラスのリスクと、通常の経験リスクを比較

    固定したベイズ分類器の損失を、毎回引き直した少数クラスのプール
    （正解の逆写像で得たソース）と、その拡張集合で評価する。

    Returns:
        平均・標準誤差と、差が 2 標準誤差以内かどうか
    """
    if trials < 2:
        raise UsageError(f"試行回数は 2 以上が必要です: {trials}")
    spec = ToySpec()
    count = int(count or pool_size)
    plain, augmented = [], []
    for t in range(trials):
        pool = SourceSet(label=minority_class,
                         sources=toy_class_sources(minority_class, pool_size, derive_int_seed(seed, 'unbiased', 'pool', t)))
        plain.append(_risk(_bayes_logits(pool.sources, spec), minority_class))
        synthetic = permute_augment(pool, count, derive_int_seed(seed, 'unbiased', 'augment', t))
        augmented.append(_risk(_bayes_logits(synthetic.sources, spec), minority_class))

    plain, augmented = np.asarray(plain), np.asarray(augmented)
    plain_se = float(plain.std(ddof=1) / np.sqrt(trials))
    augmented_se = float(augmented.std(ddof=1) / np.sqrt(trials))
    difference = float(augmented.mean() - plain.mean())
    combined_se = float(np.hypot(plain_se, augmented_se))
    result = {
        'trials': trials,
        'pool_size': pool_size,
        'plain_mean': float(plain.mean()),
        'plain_se': plain_se,
        'augmented_mean': float(augmented.mean()),
        'augmented_se': augmented_se,
        'difference': difference,
        'within_two_se': abs(difference) <= 2.0 * combined_se,
    }
    logger.info(f"不偏性チェック: 通常 {result['plain_mean']:.4f}±{plain_se:.4f}, "
                f"拡張 {result['augmented_mean']:.4f}±{augmented_se:.4f}")
    return result


def _first_epoch_below(history, threshold: float) -> Optional[int]:
    for record in history:
        if record['epoch'] > 0 and record['val_loss'] <= threshold:
            return int(record['epoch'])
    return None


def epochs_to_threshold(state: StageState, config, data: RunData, threshold: float) -> Dict:
    """
    同じ構造の予測器をソース空間と特徴空間で学習し、検証損失が閾値以下になるエポックを比較

    Args:
        state: demix 以降の状態（フローが必要）
        threshold: 検証交差エントロピーの閾値

    Returns:
        各空間の到達エポック（未到達は None）と最良損失
    """
    encoder, flow = state.module('encoder'), state.module('flow')
    z_train = encode(encoder, data.train.features)
    z_val = encode(encoder, data.validation.features)
    spaces = {
        'source_space': (to_sources(flow, z_train), to_sources(flow, z_val)),
        'feature_space': (z_train, z_val),
    }
    result = {'threshold': float(threshold)}
    for name, (train_x, val_x) in spaces.items():
        predictor = build_predictor(config, train_x.shape[1], config.model.source_predictor_hidden,
                                    data.num_classes, 'threshold_predictor')
        fitted = fit_classifier(config, predictor, 'refine', (train_x, data.train.labels),
                                (val_x, data.validation.labels))
        result[f'{name}_epoch'] = _first_epoch_below(fitted.history, threshold)
        result[f'{name}_best'] = fitted.best_val_loss
    logger.info(f"閾値 {threshold} への到達エポック: ソース空間 {result['source_space_epoch']}, "
                f"特徴空間 {result['feature_space_epoch']}")
    return result


__all__ = [
    'MINORITY_POOL_SIZES',
    'aggregate_mean_sem',
    'epochs_to_threshold',
    'mmd_mode_comparison',
    'toy_class_sources',
    'unbiasedness_check',
]
