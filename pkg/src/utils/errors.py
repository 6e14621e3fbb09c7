"""
例外クラス定義
"""


class ECRTError(Exception):
    """本パッケージ共通の基底例外"""


class ConfigurationError(ECRTError, ValueError):
    """設定・形状・仕様の不整合"""


class UsageError(ECRTError, ValueError):
    """API の使い方の誤り"""


class StageOrderError(UsageError):
    """ステージの実行順序の誤り"""


class NumericError(ECRTError, ArithmeticError):
    """数値計算の破綻（発散、非有限値など）"""


class IngestionError(ECRTError, IOError):
    """データファイル読み込みの失敗"""

    def __init__(self, message: str, offset: int = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (オフセット {offset} バイト)"
        super().__init__(message)


class IntegrityError(ECRTError):
    """チェックポイント・ダンプの整合性エラー"""
