"""
KAM-SORT ツールキットの例外クラス
"""

from typing import Optional, Union
from pathlib import Path


class KamSortError(Exception):
    """KAM-SORTの基本例外クラス"""
    pass


class ConfigurationError(KamSortError):
    """設定関連のエラー"""
    pass


class ScenarioError(ConfigurationError):
    """シミュレーション仕様が実現不可能な場合のエラー"""
    pass


class GeometryError(KamSortError):
    """バウンディングボックスの幾何関連のエラー"""
    pass


class NumericalError(KamSortError):
    """カルマンフィルタの数値計算に失敗した場合のエラー"""
    pass


class SequenceError(KamSortError):
    """フレーム順序の違反"""
    pass


class EvaluationError(KamSortError):
    """評価指標が定義できない場合のエラー（正解が空など）"""
    pass


class FileOperationError(KamSortError):
    """ファイル操作関連のエラー"""
    pass


class FileFormatError(KamSortError):
    """ファイル形式のエラー。ファイルパスと行番号を保持する"""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None,
                 line: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.line = line
        location = ""
        if self.path is not None:
            location = self.path
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class SchemaError(FileFormatError):
    """アノテーションJSONのスキーマ違反"""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None,
                 record_id: Optional[int] = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"クエリ id={record_id}: {message}"
        super().__init__(message, path=path)


class EmbeddingFormatError(FileFormatError):
    """埋め込みファイルの次元・インデックス・フレーム網羅のエラー"""
    pass
