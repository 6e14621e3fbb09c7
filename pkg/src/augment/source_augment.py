"""
ソース空間でのデータ拡張

- nonparametric: 座標ごとに独立に引いたインデックスで少数クラスのソースを組み替える
- parametric: 経験平均・標準偏差（または学習済みクラス事前分布）からのガウスサンプリング
- oracle: 大きなホールドアウト集合に nonparametric を適用した参照
- feature-space: 組み替えたソースをフローの逆変換で特徴空間に戻す（診断用）
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from autodiff.tensor import no_grad
from utils.errors import ConfigurationError, IntegrityError, UsageError
from utils.file_utils import write_csv_file

logger = logging.getLogger(__name__)

AUGMENT_MODES = ('nonparametric', 'parametric', 'oracle', 'feature-space')
SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class SourceSet:
    """クラス label のソース集合 S^m と、それを作ったチェックポイントの ID"""
    label: int
    sources: np.ndarray
    checkpoint_id: str = ''

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.float64)
        if self.sources.ndim == 1:
            self.sources = self.sources.reshape(-1, 1)
        if self.sources.ndim != 2:
            raise ConfigurationError(f"ソース集合は2次元配列である必要があります: {self.sources.shape}")

    @property
    def size(self) -> int:
        return int(self.sources.shape[0])

    @property
    def dim(self) -> int:
        return int(self.sources.shape[1])

    def verify(self, checkpoint_id: str) -> None:
        """現在のチェックポイントで作られた集合か確認"""
        if self.checkpoint_id != checkpoint_id:
            raise IntegrityError(f"ソース集合 (クラス {self.label}) のチェックポイントが一致しません: "
                                 f"{self.checkpoint_id!r} vs {checkpoint_id!r}")


@dataclass
class AugmentPlan:
    """拡張の設定"""
    mode: str = 'nonparametric'
    count: int = 0
    seed: int = 0
    std_floor: float = 1e-4
    without_replacement: bool = False
    use_prior: bool = False

    def __post_init__(self):
        if self.mode not in AUGMENT_MODES:
            raise ConfigurationError(f"未知の拡張モードです: {self.mode}（{AUGMENT_MODES} のいずれか）")
        if self.count < 0:
            raise ConfigurationError(f"合成サンプル数は 0 以上である必要があります: {self.count}")
        if self.std_floor <= 0:
            raise ConfigurationError(f"標準偏差の下限は正である必要があります: {self.std_floor}")


@dataclass
class FeatureSpaceBatch:
    """特徴空間拡張の結果と往復誤差"""
    label: int
    features: np.ndarray
    sources: np.ndarray
    roundtrip_error: np.ndarray


def _require_rows(source_set: SourceSet) -> None:
    if source_set.size == 0:
        raise UsageError(f"クラス {source_set.label} のソース集合が空です")


def permute_augment(source_set: SourceSet, count: int, seed: SeedLike,
                    without_replacement: bool = False) -> SourceSet:
    """
    座標ごとに独立なインデックス o_a を引いて合成ソースを作る

    Args:
        source_set: 元のソース集合
        count: 合成サンプル数
        seed: 乱数シード
        without_replacement: 座標ごとに非復元抽出（count ≤ n_m が必要）

    Returns:
        合成ソース集合（同じラベル・チェックポイント ID）
    """
    _require_rows(source_set)
    n, d = source_set.size, source_set.dim
    rng = _rng(seed)
    if without_replacement:
        if count > n:
            raise ConfigurationError(f"非復元抽出では合成数がプールサイズ以下である必要があります: {count} > {n}")
        index = np.stack([rng.permutation(n)[:count] for _ in range(d)], axis=1)
    else:
        index = rng.integers(0, n, size=(int(count), d))
    synthetic = source_set.sources[index, np.arange(d)[None, :]]
    return SourceSet(label=source_set.label, sources=synthetic.reshape(int(count), d),
                     checkpoint_id=source_set.checkpoint_id)


def parametric_augment(source_set: SourceSet, count: int, seed: SeedLike,
                       std_floor: float = 1e-4, prior=None) -> SourceSet:
    """
    次元独立のガウス分布から合成ソースを作る

    prior が与えられた場合は学習済みクラス事前分布からサンプリングする。
    """
    rng = _rng(seed)
    if prior is not None:
        synthetic = prior.sample(source_set.label, count, rng)
    else:
        _require_rows(source_set)
        mean = source_set.sources.mean(axis=0)
        std = np.maximum(source_set.sources.std(axis=0), std_floor)
        synthetic = mean + std * rng.standard_normal((int(count), source_set.dim))
    return SourceSet(label=source_set.label, sources=synthetic, checkpoint_id=source_set.checkpoint_id)


def oracle_augment(holdout: SourceSet, count: int, seed: SeedLike) -> SourceSet:
    """大きなホールドアウト集合への nonparametric 拡張（MMD 比較の参照）"""
    return permute_augment(holdout, count, seed)


def feature_space_augment(flow, source_set: SourceSet, count: int, seed: SeedLike) -> FeatureSpaceBatch:
    """
    組み替えたソースをフローの逆変換で特徴空間に戻す

    Returns:
        特徴量・合成ソース・行ごとの往復誤差 ‖f(f⁻¹(s̃)) − s̃‖∞
    """
    synthetic = permute_augment(source_set, count, seed)
    features = flow.inverse(synthetic.sources)
    with no_grad():
        reproduced, _ = flow(features)
    error = np.abs(reproduced.data - synthetic.sources).max(axis=1) if count else np.zeros(0)
    return FeatureSpaceBatch(label=source_set.label, features=features,
                             sources=synthetic.sources, roundtrip_error=error)


def augment_source_set(source_set: SourceSet, plan: AugmentPlan, flow=None, prior=None):
    """
    plan.mode に応じて拡張を実行

    feature-space モードは FeatureSpaceBatch、それ以外は SourceSet を返す。
    oracle モードでは source_set にホールドアウト集合を渡す。
    """
    if plan.mode in ('nonparametric', 'oracle'):
        return permute_augment(source_set, plan.count, plan.seed, plan.without_replacement)
    if plan.mode == 'parametric':
        if plan.use_prior and prior is None:
            raise UsageError("事前分布からのサンプリングには SourcePrior が必要です")
        return parametric_augment(source_set, plan.count, plan.seed, plan.std_floor,
                                  prior if plan.use_prior else None)
    if flow is None:
        raise UsageError("feature-space 拡張にはフローが必要です")
    return feature_space_augment(flow, source_set, plan.count, plan.seed)


def source_rows(sources: np.ndarray, labels: Sequence[int], origin: str) -> Iterable[dict]:
    """CSV 出力用の行（label, origin, s0, s1, ...）"""
    sources = np.asarray(sources, dtype=np.float64)
    for row, label in zip(sources, np.asarray(labels).reshape(-1)):
        record = {'label': int(label), 'origin': origin}
        record.update({f's{a}': float(v) for a, v in enumerate(row)})
        yield record


def export_source_sets_csv(path: str, real: Optional[List[SourceSet]] = None,
                           synthetic: Optional[List[SourceSet]] = None) -> str:
    """実ソースと合成ソースを1つの CSV に書き出す（外部での散布図描画用）"""
    real = real or []
    synthetic = synthetic or []
    all_sets = real + synthetic
    if not all_sets:
        raise UsageError("書き出すソース集合がありません")
    dims = {s.dim for s in all_sets}
    if len(dims) != 1:
        raise ConfigurationError(f"ソース集合の次元が揃っていません: {sorted(dims)}")
    d = dims.pop()

    rows = []
    for origin, sets in (('real', real), ('synthetic', synthetic)):
        for source_set in sets:
            rows.extend(source_rows(source_set.sources, [source_set.label] * source_set.size, origin))
    columns = ['label', 'origin'] + [f's{a}' for a in range(d)]
    logger.info(f"ソース CSV を書き出します: {path} ({len(rows)} 行)")
    return write_csv_file(path, rows, columns)
