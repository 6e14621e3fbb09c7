"""
連続値ラベルの分位点ビニング
"""

import numpy as np

from utils.errors import ConfigurationError


def bin_edges(y, bins: int) -> np.ndarray:
    """
    件数がほぼ等しくなるビンの境界値（各ビンの最小値、先頭を除く）

    昇順に並べた値のうち、順位 ceil(b * n / bins) の値を b 番目の境界とする。
    同値がなければ各ビンの件数の差は高々 1。
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if bins < 2:
        raise ConfigurationError(f"ビン数は2以上である必要があります: {bins}")
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("非有限値を含むラベルはビニングできません")
    distinct = np.unique(y).size
    if distinct < bins:
        raise ConfigurationError(f"異なる値の数がビン数より少ないです: {distinct} < {bins}")

    ordered = np.sort(y)
    n = ordered.size
    edges = ordered[[-(-b * n // bins) for b in range(1, bins)]]
    bounds = np.concatenate([ordered[:1], edges])
    if np.any(np.diff(bounds) <= 0):
        raise ConfigurationError(f"同値が多く空のビンができます: 境界 {edges.tolist()}（最小値 {ordered[0]}）")
    return edges


def assign_bins(y, edges) -> np.ndarray:
    """境界値で値をビンに割り当てる（境界と等しい値は上のビン）"""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return np.searchsorted(np.asarray(edges, dtype=np.float64), y, side='right').astype(np.int64)


def bin_labels(y, bins: int) -> np.ndarray:
    """学習データ自身の境界で割り当てた整数ラベル（assign_bins と同じ規則）"""
    return assign_bins(y, bin_edges(y, bins))
