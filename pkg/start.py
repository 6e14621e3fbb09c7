#!/usr/bin/env python3
"""
ECRT 不均衡分類実験ツール 起動スクリプト
"""

import sys
from pathlib import Path


def main():
    """メイン起動関数"""
    print("🎯 ECRT 不均衡分類実験ツール")
    print("=" * 50)

    project_root = Path(__file__).parent
    src_path = project_root / "src"

    if not (src_path / "cli" / "main.py").exists():
        print(f"❌ エラー: CLIファイルが見つかりません: {src_path / 'cli' / 'main.py'}")
        return 1

    # 依存関係チェック
    print("📦 依存関係をチェック中...")

    try:
        import numpy
        import pandas
        import yaml
        print("✅ 必要なライブラリがインストールされています")
    except ImportError as e:
        print(f"❌ 必要なライブラリが不足しています: {e}")
        print("💡 以下のコマンドでインストールしてください:")
        print(f"   pip install -r {project_root / 'requirements.txt'}")
        return 1

    sys.path.insert(0, str(src_path))
    from cli.main import main as cli_main

    args = sys.argv[1:] or ['--help']
    print(f"🚀 実行: ecrt {' '.join(args)}")
    print("-" * 50)

    try:
        return cli_main(args)
    except KeyboardInterrupt:
        print("\n👋 ツールを終了しました")
        return 130


if __name__ == "__main__":
    sys.exit(main())
