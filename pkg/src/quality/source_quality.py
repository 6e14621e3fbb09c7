"""
ソース集合の品質チェック
分離後のソース・合成ソースの問題を分類して改善案を出す
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from metrics.evaluation import class_conditional_decorrelation
from utils.file_utils import write_json_file

logger = logging.getLogger(__name__)

ISSUE_TYPES = ('非有限値', '分散ゼロ座標', '高相関', 'グリッド化', '逆変換誤差', 'プール不足')


class SourceQualityChecker:
    """ソース集合の品質チェック機能"""

    def __init__(self, thresholds: Optional[Dict] = None):
        self.quality_thresholds = {
            # クラス条件付き相関（平均絶対値）
            'decorrelation_ok': 0.1,
            'decorrelation_high': 0.3,

            # 分散ゼロとみなす標準偏差
            'min_std': 1e-8,

            # この件数以下の2次元プールは格子状の合成になる
            'gridding_pool_size': 10,

            # 逆変換の往復誤差
            'roundtrip_tolerance': 1e-6,

            # 相関を測れる最小件数
            'min_pool_size': 2,
        }
        if thresholds:
            self.quality_thresholds.update(thresholds)

    def check_source_quality(self, sources, labels, feature_batches: Sequence = ()) -> Dict:
        """
        ソース全体の品質チェック

        Args:
            sources: (n, d) のソース
            labels: (n,) のラベル
            feature_batches: 特徴空間拡張の結果（往復誤差の診断用）

        Returns:
            品質チェック結果
        """
        sources = np.asarray(sources, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if sources.size == 0:
            return {
                'エラー': True,
                'メッセージ': 'ソースがありません',
            }

        issues = {name: [] for name in ISSUE_TYPES}
        finite_rows = np.all(np.isfinite(sources), axis=1)
        if not np.all(finite_rows):
            bad = np.where(~finite_rows)[0]
            issues['非有限値'].append({'行': bad[:20].tolist(), '件数': int(bad.size), '重要度': 'high'})

        class_stats = {}
        for label in np.unique(labels):
            rows = sources[(labels == label) & finite_rows]
            class_stats[int(label)] = self.check_single_pool(rows, int(label), issues)

        decorrelation = None
        measurable = [m for m, s in class_stats.items() if s['件数'] >= self.quality_thresholds['min_pool_size']]
        if measurable and sources.shape[1] >= 2:
            mask = np.isin(labels, measurable) & finite_rows
            decorrelation = class_conditional_decorrelation(sources[mask], labels[mask],
                                                            min_per_class=self.quality_thresholds['min_pool_size'])
            if decorrelation >= self.quality_thresholds['decorrelation_ok']:
                issues['高相関'].append({
                    '平均絶対相関': round(decorrelation, 4),
                    '重要度': 'high' if decorrelation >= self.quality_thresholds['decorrelation_high'] else 'medium',
                })

        for batch in feature_batches:
            self._check_roundtrip(batch, issues)

        results = {
            'エラー': False,
            '総件数': int(sources.shape[0]),
            '次元': int(sources.shape[1]),
            '品質統計': {
                'クラス条件付き相関': decorrelation,
                'クラス別': class_stats,
            },
            '品質問題': issues,
        }
        results['推奨改善'] = self._generate_recommendations(issues)
        for line in results['推奨改善']:
            logger.info(line)
        return results

    def check_single_pool(self, rows: np.ndarray, label: int, issues: Dict) -> Dict:
        """1クラス分のソースプールを検査"""
        count = int(rows.shape[0])
        stats = {'件数': count}
        if count < self.quality_thresholds['min_pool_size']:
            issues['プール不足'].append({'クラス': label, '件数': count, '重要度': 'medium'})
            return stats

        std = rows.std(axis=0)
        stats['標準偏差'] = [round(float(v), 6) for v in std]
        degenerate = np.where(std <= self.quality_thresholds['min_std'])[0]
        if degenerate.size:
            issues['分散ゼロ座標'].append({'クラス': label, '座標': degenerate.tolist(), '重要度': 'high'})

        if rows.shape[1] == 2 and count <= self.quality_thresholds['gridding_pool_size']:
            issues['グリッド化'].append({
                'クラス': label,
                '件数': count,
                '格子点数': int(len(np.unique(rows[:, 0])) * len(np.unique(rows[:, 1]))),
                '重要度': 'low',
            })
        return stats

    def _check_roundtrip(self, batch, issues: Dict) -> None:
        error = np.asarray(batch.roundtrip_error, dtype=np.float64)
        if error.size == 0:
            return
        over = np.where(error > self.quality_thresholds['roundtrip_tolerance'])[0]
        norms = np.linalg.norm(batch.sources, axis=1)
        boundary = np.argsort(-norms, kind='stable')[:min(5, error.size)]
        if over.size:
            issues['逆変換誤差'].append({
                'クラス': int(batch.label),
                '行': over[:20].tolist(),
                '最大誤差': float(error.max()),
                '境界行の誤差': [float(error[i]) for i in boundary],
                '重要度': 'medium',
            })

    def _generate_recommendations(self, issues: Dict) -> List[str]:
        recommendations = []
        total_issues = sum(len(issue_list) for issue_list in issues.values())

        if total_issues == 0:
            recommendations.append("品質チェック完了: ソース集合に問題は見つかりませんでした")
            return recommendations

        if issues['非有限値']:
            recommendations.append("非有限値のソースがあります。学習率を下げるか ρ を大きくしてください")
        if issues['分散ゼロ座標']:
            count = len(issues['分散ゼロ座標'])
            recommendations.append(f"分散 0 の座標を持つクラスが {count} 個あります。パラメトリック拡張は下限 ε_σ で補われます")
        if issues['高相関']:
            recommendations.append("クラス条件付き相関が残っています。分離ステージのエポック数を増やすか FDV を試してください")
        if issues['グリッド化']:
            count = len(issues['グリッド化'])
            recommendations.append(f"プールが小さいクラスが {count} 個あります。ノンパラメトリック拡張は格子状になるためパラメトリック拡張を検討してください")
        if issues['逆変換誤差']:
            recommendations.append("フロー逆変換の往復誤差が大きい行があります（境界付近で増幅されます）")
        if issues['プール不足']:
            recommendations.append("サンプルが 2 件未満のクラスがあります")
        return recommendations

    def get_quality_summary(self, quality_result: Dict) -> Dict:
        """品質チェック結果のサマリー"""
        if quality_result.get('エラー', False):
            return {'エラー': True, 'メッセージ': quality_result.get('メッセージ', '不明なエラー')}

        issues = quality_result['品質問題']
        major = []
        for issue_type, issue_list in issues.items():
            if issue_list:
                high = sum(1 for issue in issue_list if issue.get('重要度') == 'high')
                major.append({
                    '問題種別': issue_type,
                    '件数': len(issue_list),
                    '高重要度': high,
                    '重要度': 'high' if high else 'medium',
                })
        major.sort(key=lambda x: (x['重要度'] == 'high', x['件数']), reverse=True)

        return {
            'エラー': False,
            '総件数': quality_result['総件数'],
            'クラス条件付き相関': quality_result['品質統計']['クラス条件付き相関'],
            '主要問題': major[:5],
            '推奨アクション': quality_result['推奨改善'][:3],
        }

    def export_quality_report(self, quality_result: Dict, output_path: str) -> str:
        return write_json_file(output_path, quality_result)
