"""
MOT形式ファイル・検出＋埋め込みファイル・アノテーションJSONの読み書き
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from association import normalize_embedding
from errors import (EmbeddingFormatError, FileFormatError, FileOperationError,
                    KamSortError, SchemaError)
from geometry import BBox
from tracker import Detection, TrackRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MOT_FIELDS = 10
QUERY_TYPES = ("superset", "subset")
DESCRIPTION_SETTINGS = ("caption", "attributes", "definition", "synonyms", "class_name")


@dataclass(frozen=True)
class MotRow:
    """MOT形式の1行 (frame, id, x, y, w, h, conf, -1, -1, -1)"""
    frame: int
    id: int
    x: float
    y: float
    w: float
    h: float
    conf: float = 1.0

    @property
    def box(self) -> BBox:
        return BBox(self.x, self.y, self.w, self.h)

    @property
    def xywh(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise FileOperationError(f"ファイルを開けません: {path}: {e}") from e


def _read_lines(path: Path) -> List[str]:
    """UTF-8 として1行ずつ復号する。復号できない行は行番号つきのエラー"""
    lines = []
    for line_no, raw in enumerate(_read_bytes(path).splitlines(), 1):
        try:
            lines.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FileFormatError(f"UTF-8 として読めません: {e.reason}", path, line_no) from e
    return lines


def _read_text(path: Path) -> str:
    data = _read_bytes(path)
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line_no = data[:e.start].count(b"\n") + 1
        raise FileFormatError(f"UTF-8 として読めません: {e.reason}", path, line_no) from e


def _parse_int(text: str, name: str, path: Path, line_no: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise FileFormatError(f"{name} が数値ではありません: '{text}'", path, line_no) from None
    if not math.isfinite(value) or value != int(value):
        raise FileFormatError(f"{name} が整数ではありません: '{text}'", path, line_no)
    return int(value)


def _parse_float(text: str, name: str, path: Path, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FileFormatError(f"{name} が数値ではありません: '{text}'", path, line_no) from None
    if not math.isfinite(value):
        raise FileFormatError(f"{name} が有限な値ではありません: '{text}'", path, line_no)
    return value


def read_mot(path: PathLike) -> List[MotRow]:
    """MOT形式ファイルを読み込む。フィールド数は厳密に10"""
    return [row for _, row in _read_mot_lines(Path(path))]


def _read_mot_lines(path: Path) -> List[Tuple[int, MotRow]]:
    rows: List[Tuple[int, MotRow]] = []
    for line_no, line in enumerate(_read_lines(path), 1):
        text = line.strip()
        if not text:
            continue
        fields = [p.strip() for p in text.split(",")]
        if len(fields) != MOT_FIELDS:
            raise FileFormatError(
                f"フィールド数が{MOT_FIELDS}ではありません ({len(fields)})", path, line_no)
        frame = _parse_int(fields[0], "frame", path, line_no)
        if frame < 1:
            raise FileFormatError(f"frame は1以上である必要があります: {frame}", path, line_no)
        track_id = _parse_int(fields[1], "id", path, line_no)
        x, y, w, h, conf = (_parse_float(v, n, path, line_no)
                            for v, n in zip(fields[2:7], ("x", "y", "w", "h", "conf")))
        rows.append((line_no, MotRow(frame, track_id, x, y, w, h, conf)))
    return rows


def write_mot(rows: Iterable[MotRow], path: PathLike, precision: int = 2) -> None:
    """(frame, id) 順に並べてMOT形式で書き出す"""
    path = Path(path)
    p = int(precision)
    ordered = sorted(rows, key=lambda r: (r.frame, r.id))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for r in ordered:
                f.write(f"{r.frame:d},{r.id:d},{r.x:.{p}f},{r.y:.{p}f},{r.w:.{p}f},"
                        f"{r.h:.{p}f},{r.conf:.{p}f},-1,-1,-1\n")
    except OSError as e:
        raise FileOperationError(f"MOTファイルの書き込みに失敗: {path}: {e}") from e


def rows_from_tracks(track_rows: Iterable[TrackRow]) -> List[MotRow]:
    """トラッカーの出力行をMOT行に変換"""
    return [MotRow(r.frame, r.track_id, r.box.x, r.box.y, r.box.w, r.box.h, r.confidence)
            for r in track_rows]


def read_detections(path: PathLike) -> List[Detection]:
    """検出ファイル (id=-1 のMOT形式) を読み込む"""
    path = Path(path)
    detections = []
    for line_no, row in _read_mot_lines(path):
        try:
            detections.append(Detection(frame=row.frame, box=row.box, confidence=row.conf))
        except (KamSortError, ValueError) as e:
            raise FileFormatError(f"不正な検出です: {e}", path, line_no) from e
    return detections


def detections_to_rows(detections: Iterable[Detection]) -> List[MotRow]:
    return [MotRow(d.frame, -1, d.box.x, d.box.y, d.box.w, d.box.h, d.confidence)
            for d in detections]


def write_detections(detections: Sequence[Detection], path: PathLike, precision: int = 2) -> None:
    """検出をファイル順を保ったまま書き出す"""
    path = Path(path)
    p = int(precision)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for r in detections_to_rows(detections):
                f.write(f"{r.frame:d},-1,{r.x:.{p}f},{r.y:.{p}f},{r.w:.{p}f},"
                        f"{r.h:.{p}f},{r.conf:.{p}f},-1,-1,-1\n")
    except OSError as e:
        raise FileOperationError(f"検出ファイルの書き込みに失敗: {path}: {e}") from e


# ---------------------------------------------------------------------------
# 埋め込み
# ---------------------------------------------------------------------------

EmbeddingRows = Dict[int, Dict[int, np.ndarray]]


def read_embedding_rows(path: PathLike) -> EmbeddingRows:
    """`frame,det_index,e0,...` 形式のCSVを {frame: {det_index: ベクトル}} で返す"""
    path = Path(path)
    rows: EmbeddingRows = {}
    dim: Optional[int] = None
    for line_no, line in enumerate(_read_lines(path), 1):
        try:
            record = next(csv.reader([line]), [])
        except csv.Error as e:
            raise EmbeddingFormatError(f"CSVとして読み込めません: {e}", path, line_no) from e
        if not record or all(not v.strip() for v in record):
            continue
        if len(record) < 3:
            raise EmbeddingFormatError("埋め込み行には frame, det_index と1つ以上の値が必要です",
                                       path, line_no)
        frame = _parse_int(record[0], "frame", path, line_no)
        det_index = _parse_int(record[1], "det_index", path, line_no)
        if det_index < 0:
            raise EmbeddingFormatError(f"det_index が負です: {det_index}", path, line_no)
        values = [_parse_float(v, "埋め込み値", path, line_no) for v in record[2:]]
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise EmbeddingFormatError(
                f"埋め込みの次元が一致しません (期待 {dim}, 実際 {len(values)})", path, line_no)
        frame_rows = rows.setdefault(frame, {})
        if det_index in frame_rows:
            raise EmbeddingFormatError(
                f"frame {frame} の det_index {det_index} が重複しています", path, line_no)
        try:
            frame_rows[det_index] = normalize_embedding(values)
        except EmbeddingFormatError as e:
            raise EmbeddingFormatError(str(e), path, line_no) from e
    return rows


def attach_embeddings(detections: Sequence[Detection], rows: EmbeddingRows,
                      path: Optional[PathLike] = None) -> List[Detection]:
    """検出に埋め込みを付ける

    埋め込みファイルに含まれないフレームの検出は埋め込みなしのまま。
    含まれるフレームは全検出を網羅している必要がある。
    """
    by_frame: Dict[int, List[int]] = {}
    for i, det in enumerate(detections):
        by_frame.setdefault(det.frame, []).append(i)

    out = list(detections)
    for frame in sorted(rows):
        indices = by_frame.get(frame, [])
        frame_rows = rows[frame]
        for det_index in frame_rows:
            if det_index >= len(indices):
                raise EmbeddingFormatError(
                    f"frame {frame} の det_index {det_index} は検出数 {len(indices)} の範囲外です", path)
        if len(frame_rows) != len(indices):
            raise EmbeddingFormatError(
                f"frame {frame} の埋め込みが一部の検出にしかありません ({len(frame_rows)}/{len(indices)})", path)
        for det_index, i in enumerate(indices):
            out[i] = replace(detections[i], embedding=frame_rows[det_index])

    missing = sorted(set(by_frame) - set(rows))
    if rows and missing:
        logger.debug(f"埋め込みのないフレーム: {len(missing)}個（外観なしで追跡）")
    return out


def read_embeddings(path: PathLike, detections: Sequence[Detection]) -> List[Detection]:
    """埋め込みCSVを読み込み、検出ファイル順に対応付ける"""
    return attach_embeddings(detections, read_embedding_rows(path), path)


def embedding_rows_of(detections: Sequence[Detection]) -> List[Tuple[int, int, np.ndarray]]:
    """埋め込み付き検出から (frame, det_index, ベクトル) の行を作る"""
    out = []
    counters: Dict[int, int] = {}
    for det in detections:
        idx = counters.get(det.frame, 0)
        counters[det.frame] = idx + 1
        if det.embedding is not None:
            out.append((det.frame, idx, det.embedding))
    return out


def write_embeddings(rows: Iterable[Tuple[int, int, Sequence[float]]], path: PathLike) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            for frame, det_index, values in rows:
                writer.writerow([frame, det_index] + [f"{float(v):.8f}" for v in values])
    except OSError as e:
        raise FileOperationError(f"埋め込みファイルの書き込みに失敗: {path}: {e}") from e


# ---------------------------------------------------------------------------
# アノテーションJSON
# ---------------------------------------------------------------------------

@dataclass
class Video:
    """動画レコード"""
    id: int
    video_path: str


@dataclass
class TrackingQuery:
    """テキスト記述つき追跡クエリ"""
    id: int
    video_id: int
    type: str  # superset, subset
    class_name: str
    track_path: str
    is_eval: bool = False
    superset_idx: int = -1
    synonyms: List[str] = field(default_factory=list)
    definition: str = ""
    attributes: List[str] = field(default_factory=list)
    caption: str = ""

    def describe(self, setting: str = "caption") -> str:
        """検出器に渡す記述文を設定ごとに返す"""
        if setting == "caption":
            return self.caption or self.class_name
        if setting == "attributes":
            return " ".join(self.attributes + [self.class_name])
        if setting == "definition":
            return f"{self.class_name}: {self.definition}" if self.definition else self.class_name
        if setting == "synonyms":
            return " . ".join([self.class_name] + self.synonyms)
        if setting == "class_name":
            return self.class_name
        raise ValueError(f"不明な記述設定です: {setting} (選択肢: {', '.join(DESCRIPTION_SETTINGS)})")


def _first_key(data: Mapping[str, Any], *keys: str) -> Any:
    for key in keys:
        if key in data:
            return data[key]
    return []


def _require(record: Mapping[str, Any], key: str, kind, path: Path, record_id) -> Any:
    if key not in record:
        raise SchemaError(f"必須キー '{key}' がありません", path, record_id)
    value = record[key]
    if kind is int and isinstance(value, bool):
        raise SchemaError(f"'{key}' は整数である必要があります", path, record_id)
    if not isinstance(value, kind):
        raise SchemaError(f"'{key}' の型が不正です: {type(value).__name__}", path, record_id)
    return value


def _text_list(record: Mapping[str, Any], key: str, path: Path, record_id) -> List[str]:
    value = record.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaError(f"'{key}' は文字列のリストである必要があります", path, record_id)
    return list(value)


def _parse_query(record: Any, path: Path) -> TrackingQuery:
    if not isinstance(record, dict):
        raise SchemaError("tracking_query の要素がオブジェクトではありません", path)
    record_id = record.get("id")
    query_id = _require(record, "id", int, path, record_id)
    query_type = _require(record, "type", str, path, query_id)
    if query_type not in QUERY_TYPES:
        raise SchemaError(f"type は superset か subset である必要があります: {query_type}", path, query_id)
    superset_idx = record.get("superset_idx", -1)
    if isinstance(superset_idx, bool) or not isinstance(superset_idx, int):
        raise SchemaError("'superset_idx' は整数である必要があります", path, query_id)
    if query_type == "subset" and superset_idx < 0:
        raise SchemaError("subset クエリには0以上の superset_idx が必要です", path, query_id)
    if query_type == "superset" and superset_idx != -1:
        raise SchemaError("superset クエリの superset_idx は -1 である必要があります", path, query_id)
    is_eval = record.get("is_eval", False)
    if not isinstance(is_eval, bool):
        raise SchemaError("'is_eval' は真偽値である必要があります", path, query_id)
    for key in ("definition", "caption"):
        if not isinstance(record.get(key, ""), str):
            raise SchemaError(f"'{key}' は文字列である必要があります", path, query_id)

    return TrackingQuery(
        id=query_id,
        video_id=_require(record, "video_id", int, path, query_id),
        type=query_type,
        class_name=_require(record, "class_name", str, path, query_id),
        track_path=_require(record, "track_path", str, path, query_id),
        is_eval=is_eval,
        superset_idx=superset_idx,
        synonyms=_text_list(record, "synonyms", path, query_id),
        definition=record.get("definition", ""),
        attributes=_text_list(record, "attributes", path, query_id),
        caption=record.get("caption", ""),
    )


def read_annotations(path: PathLike) -> Tuple[List[Video], List[TrackingQuery]]:
    """アノテーションJSONを読み込む。未知のキーは無視する"""
    path = Path(path)
    try:
        data = json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"JSONとして読み込めません: {e.msg}", path, e.lineno) from e
    if not isinstance(data, dict):
        raise SchemaError("トップレベルはオブジェクトである必要があります", path)

    videos = []
    for record in _first_key(data, "videos", "video"):
        if not isinstance(record, dict):
            raise SchemaError("video の要素がオブジェクトではありません", path)
        videos.append(Video(id=_require(record, "id", int, path, None),
                            video_path=_require(record, "video_path", str, path, None)))

    queries = [_parse_query(r, path) for r in _first_key(data, "tracking_queries", "tracking_query")]
    return videos, queries


def write_annotations(videos: Sequence[Video], queries: Sequence[TrackingQuery], path: PathLike) -> None:
    data = {
        "videos": [asdict(v) for v in videos],
        "tracking_queries": [asdict(q) for q in queries],
    }
    write_json(data, path)


def resolve_track_path(annotation_path: PathLike, query: TrackingQuery) -> Path:
    """クエリの track_path をアノテーションファイル基準で解決"""
    track_path = Path(query.track_path)
    if track_path.is_absolute():
        return track_path
    return Path(annotation_path).parent / track_path


def write_json(data: Any, path: PathLike) -> None:
    """JSONを書き出す"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
    except (OSError, TypeError) as e:
        raise FileOperationError(f"JSONの保存に失敗: {path}: {e}") from e
