"""
クラス不均衡の分析
多数クラス・少数クラスの判定と重要度重みの算出
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from objectives.losses import importance_weights
from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


class ClassBalanceAnalyzer:
    """クラスごとのサンプル数から不均衡の状態を分析"""

    # 最大クラス件数に対する割合での判定基準
    BALANCE_THRESHOLDS = {
        'minority_ratio': 0.5,   # これ未満なら少数クラス
        'warning_ratio': 0.8,    # これ未満ならやや少ない
    }

    def __init__(self, minority_ratio: Optional[float] = None):
        self.thresholds = dict(self.BALANCE_THRESHOLDS)
        if minority_ratio is not None:
            if not 0.0 < minority_ratio <= 1.0:
                raise ConfigurationError(f"少数クラス判定の割合は (0, 1] の範囲です: {minority_ratio}")
            self.thresholds['minority_ratio'] = minority_ratio

    def detect_minority_classes(self, counts: Sequence[int]) -> List[int]:
        """
        最大クラス件数の minority_ratio 倍未満のクラスを少数クラスとする

        Args:
            counts: クラスごとのサンプル数

        Returns:
            少数クラスのラベル（昇順）
        """
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            return []
        limit = counts.max() * self.thresholds['minority_ratio']
        return [int(m) for m in np.where(counts < limit)[0]]

    def resolve_minority_classes(self, counts: Sequence[int], configured: Sequence[int] = ()) -> List[int]:
        """設定で指定があればそれを、なければ自動判定の結果を返す"""
        counts = np.asarray(counts, dtype=np.int64)
        if configured:
            unknown = [m for m in configured if not 0 <= m < counts.size]
            if unknown:
                raise ConfigurationError(f"少数クラスの指定が範囲外です: {unknown}（クラス数 {counts.size}）")
            return sorted(int(m) for m in configured)
        detected = self.detect_minority_classes(counts)
        logger.info(f"少数クラスを自動判定しました: {detected}")
        return detected

    def analyze_counts(self, counts: Sequence[int], minority_classes: Sequence[int] = ()) -> Dict:
        """
        クラス件数の分析結果

        Returns:
            全体サマリーとクラス別詳細の辞書
        """
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            return {
                'エラー': True,
                'メッセージ': 'クラスがありません',
            }

        minority = self.resolve_minority_classes(counts, minority_classes)
        largest = int(counts.max())
        smallest = int(counts.min())
        weights = importance_weights(counts) if smallest > 0 else None
        total = int(counts.sum())

        details = {}
        for m, count in enumerate(counts):
            details[int(m)] = {
                '件数': int(count),
                '割合': f"{count / total * 100:.1f}%" if total else "0.0%",
                '区分': '少数' if m in minority else '多数',
                '重み': None if weights is None else round(float(weights[m]), 6),
                '状態': self._get_status_message(int(count), largest),
            }

        return {
            'エラー': False,
            '全体サマリー': {
                'クラス数': int(counts.size),
                '総サンプル数': total,
                '最大件数': largest,
                '最小件数': smallest,
                '不均衡比': round(largest / smallest, 3) if smallest > 0 else None,
                '少数クラス数': len(minority),
            },
            'majority_classes': [m for m in range(counts.size) if m not in minority],
            'minority_classes': minority,
            'クラス別詳細': details,
        }

    def analyze_dataset(self, dataset, minority_classes: Sequence[int] = ()) -> Dict:
        result = self.analyze_counts(dataset.class_counts, minority_classes)
        if not result['エラー']:
            result['全体サマリー']['分割'] = dataset.split
        return result

    def status_lines(self, analysis: Dict, limit: int = 20) -> List[str]:
        """ログ・inspect 表示用の1行ずつの要約"""
        if analysis.get('エラー'):
            return [analysis.get('メッセージ', '不明なエラー')]
        summary = analysis['全体サマリー']
        lines = [f"クラス数 {summary['クラス数']} | 総サンプル数 {summary['総サンプル数']} | "
                 f"不均衡比 {summary['不均衡比']} | 少数クラス {analysis['minority_classes'][:limit]}"]
        for m, detail in list(analysis['クラス別詳細'].items())[:limit]:
            lines.append(f"  クラス {m}: {detail['件数']} 件 ({detail['区分']}) {detail['状態']}")
        return lines

    def _get_status_message(self, count: int, largest: int) -> str:
        ratio = count / largest if largest else 0.0
        if ratio >= self.thresholds['warning_ratio']:
            return "🟢 十分"
        elif ratio >= self.thresholds['minority_ratio']:
            return "🟡 やや少ない"
        elif count > 0:
            return "🟠 少数クラス（拡張対象）"
        else:
            return "🔴 サンプルなし"
