"""
ファイル操作ユーティリティ
"""

import hashlib
import json
import os
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import pandas as pd

# 実行フォルダに必ず出力されるファイル
RUN_ARTIFACTS = ('status.json', 'merged_config.json')
RUN_RESULT_ARTIFACTS = ('metrics.json', 'learning_curve.csv', 'per_class_f1.csv', 'sources.csv')

DUMP_FEATURE_SUFFIX = '.features.f64'
DUMP_LABEL_SUFFIX = '.labels.i32'


def ensure_dir(folder_path: str) -> str:
    """フォルダを作成してパスを返す"""
    os.makedirs(folder_path, exist_ok=True)
    return folder_path


def write_json_file(path: str, data: Mapping) -> str:
    """
    JSON をキー順固定で書き出す

    同じ内容なら常にバイト単位で同一のファイルになる。
    """
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    return path


def read_json_file(path: str) -> Dict:
    """JSON ファイルを読み込む"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_csv_file(path: str, rows: Iterable[Mapping], columns: Sequence[str]) -> str:
    """
    ヘッダー付き CSV を書き出す

    Args:
        path: 出力先
        rows: 行（辞書）の列
        columns: 列名（この順で出力）

    Returns:
        出力先パス
    """
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    df = pd.DataFrame(list(rows), columns=list(columns))
    df.to_csv(path, index=False, float_format='%.10g')
    return path


def file_sha256(path: str) -> str:
    """ファイルの SHA-256 を計算"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def get_dump_file_sets(folder_path: str) -> Tuple[List[str], List[Tuple[str, str, str]]]:
    """
    フォルダからデータセットダンプ（ヘッダー + 特徴量 + ラベル）の組を取得

    Args:
        folder_path: 対象フォルダパス

    Returns:
        (ヘッダーファイルリスト, 完全な組のリスト)
    """
    if not os.path.exists(folder_path):
        return [], []

    all_files = os.listdir(folder_path)
    headers = sorted(f for f in all_files if f.endswith('.json') and not f.startswith(RUN_ARTIFACTS))

    sets = []
    for header in headers:
        base = header[:-len('.json')]
        features = base + DUMP_FEATURE_SUFFIX
        labels = base + DUMP_LABEL_SUFFIX
        if features in all_files and labels in all_files:
            sets.append((header, features, labels))

    return headers, sets


def validate_run_folder(folder_path: str) -> dict:
    """
    実行結果フォルダの妥当性チェック

    Args:
        folder_path: チェック対象フォルダ

    Returns:
        検証結果辞書
    """
    result = {
        'valid': False,
        'errors': [],
        'warnings': [],
        'info': {}
    }

    if not os.path.exists(folder_path):
        result['errors'].append(f"フォルダが存在しません: {folder_path}")
        return result

    if not os.path.isdir(folder_path):
        result['errors'].append(f"指定されたパスはフォルダではありません: {folder_path}")
        return result

    try:
        present = set(os.listdir(folder_path))

        for name in RUN_ARTIFACTS:
            if name not in present:
                result['errors'].append(f"必須ファイルが見つかりません: {name}")

        missing_results = [name for name in RUN_RESULT_ARTIFACTS if name not in present]
        if missing_results:
            result['warnings'].append(f"結果ファイルが未出力です: {', '.join(missing_results)}")

        if 'FAILED' in present:
            result['warnings'].append("失敗マーカー (FAILED) があります")

        status = {}
        if 'status.json' in present:
            status = read_json_file(os.path.join(folder_path, 'status.json'))

        result['info'] = {
            'ファイル数': len(present),
            '状態': status.get('state', '不明'),
            '完了ステージ': status.get('completed_stages', []),
        }

        if not result['errors']:
            result['valid'] = True

    except Exception as e:
        result['errors'].append(f"フォルダの読み込み中にエラーが発生: {str(e)}")

    return result


def get_folder_summary(folder_path: str) -> str:
    """
    実行結果フォルダの概要を文字列で取得

    Args:
        folder_path: 対象フォルダ

    Returns:
        概要文字列
    """
    validation = validate_run_folder(folder_path)

    if not validation['valid']:
        return f"エラー: {', '.join(validation['errors'])}"

    info = validation['info']
    summary_parts = [
        f"{os.path.basename(os.path.normpath(folder_path))}",
        f"状態 {info['状態']}",
        f"ファイル {info['ファイル数']}個",
    ]

    if validation['warnings']:
        summary_parts.append(f"{len(validation['warnings'])}件の注意事項")

    return " | ".join(summary_parts)
