import json

import numpy as np

from augment.source_augment import FeatureSpaceBatch
from quality.source_quality import ISSUE_TYPES, SourceQualityChecker


def _issue_count(result, name):
    return len(result['品質問題'][name])


class TestSourceQualityChecker:

    def setup_method(self):
        self.checker = SourceQualityChecker()

    def test_clean_sources(self):
        rng = np.random.default_rng(0)
        result = self.checker.check_source_quality(rng.standard_normal((4000, 2)),
                                                    rng.integers(0, 2, size=4000))
        assert not result['エラー']
        assert all(_issue_count(result, name) == 0 for name in ISSUE_TYPES)
        assert result['推奨改善'] == ["品質チェック完了: ソース集合に問題は見つかりませんでした"]

    def test_detects_problems(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(40)
        sources = np.concatenate([
            np.stack([x, x], axis=1),                      # クラス 0: 完全相関
            np.stack([rng.standard_normal(5), np.zeros(5)], axis=1),  # クラス 1: 分散 0, 小さいプール
            [[np.nan, 0.0]],
            [[1.0, 1.0]],                                  # クラス 2: 1 件のみ
        ])
        labels = np.array([0] * 40 + [1] * 5 + [0] + [2])
        result = self.checker.check_source_quality(sources, labels)
        assert _issue_count(result, '非有限値') == 1
        assert result['品質問題']['非有限値'][0]['行'] == [45]
        assert _issue_count(result, '分散ゼロ座標') == 1
        assert _issue_count(result, '高相関') == 1
        assert _issue_count(result, 'グリッド化') == 1
        assert _issue_count(result, 'プール不足') == 1
        assert result['品質問題']['プール不足'][0]['クラス'] == 2

    def test_roundtrip_errors(self):
        rng = np.random.default_rng(2)
        batch = FeatureSpaceBatch(label=0, features=np.zeros((6, 2)), sources=rng.standard_normal((6, 2)),
                                  roundtrip_error=np.array([0.0, 1e-3, 0.0, 0.0, 0.0, 0.0]))
        result = self.checker.check_source_quality(rng.standard_normal((50, 2)), np.zeros(50), [batch])
        issue = result['品質問題']['逆変換誤差'][0]
        assert issue['行'] == [1]
        assert issue['最大誤差'] == 1e-3
        assert len(issue['境界行の誤差']) == 5

    def test_empty_sources(self):
        assert self.checker.check_source_quality(np.zeros((0, 2)), [])['エラー']

    def test_summary_and_export(self, tmp_path):
        x = np.random.default_rng(3).standard_normal(30)
        result = self.checker.check_source_quality(np.stack([x, -x], axis=1), np.zeros(30))
        summary = self.checker.get_quality_summary(result)
        assert summary['主要問題'][0]['問題種別'] == '高相関'
        assert summary['主要問題'][0]['重要度'] == 'high'
        path = self.checker.export_quality_report(result, str(tmp_path / 'quality.json'))
        with open(path, encoding='utf-8') as f:
            assert json.load(f)['総件数'] == 30

    def test_custom_thresholds(self):
        checker = SourceQualityChecker({'gridding_pool_size': 100})
        rng = np.random.default_rng(4)
        result = checker.check_source_quality(rng.standard_normal((50, 2)), np.zeros(50))
        assert _issue_count(result, 'グリッド化') == 1
