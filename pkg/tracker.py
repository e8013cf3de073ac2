"""
KAM-SORT のフレームごとの追跡処理

1. 全トラックの予測
2. 適応重み付きコストによる第1段の割り当て
3. 残ったトラックと検出の第2段の再割り当て（Kalman++ ボックス）
4. トラックのライフサイクル管理と出力
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from association import (AdaptiveWeights, CostMode, adaptive_weights, build_cost_matrix,
                         homogeneity, solve_assignment)
from errors import ConfigurationError, EmbeddingFormatError, FileOperationError, SequenceError
from geometry import BBox, boxes_to_array, iou, iou_matrix
from kalman import (KalmanParams, KalmanTrackState, initiate, observation_centric_reupdate,
                    predict, revised_box, update)

logger = logging.getLogger(__name__)

MODES = ("sort", "ocsort", "kamsort", "kamsort_no_kpp", "kamsort_fixed_weights")

# 第2段で使うボックスの種類
SECOND_STAGE_BY_MODE = {
    "sort": None,
    "ocsort": "last_observation",
    "kamsort": "kalman_pp",
    "kamsort_no_kpp": "predicted",
    "kamsort_fixed_weights": "kalman_pp",
}


class TrackStatus(Enum):
    """トラックの状態"""
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"
    LOST = "Lost"
    REMOVED = "Removed"


@dataclass
class TrackerConfig:
    """トラッカー設定"""
    theta: float = 80.0  # 度
    alpha: float = 1.0
    lam: float = 0.2
    gamma: float = 1.0
    iou_match_threshold: float = 0.3
    second_stage_iou_threshold: float = 0.2
    c_min: float = 1.0
    c_max: float = 1.5
    max_age: int = 30
    min_hits: int = 3
    det_conf_threshold: float = 0.4
    embedding_ema_beta: float = 0.9
    mode: str = "kamsort"  # sort, ocsort, kamsort, kamsort_no_kpp, kamsort_fixed_weights
    process_noise: Tuple[float, ...] = KalmanParams.process_noise
    measurement_noise: Tuple[float, ...] = KalmanParams.measurement_noise
    initial_noise: Tuple[float, ...] = KalmanParams.initial_noise

    def __post_init__(self):
        self.process_noise = tuple(float(v) for v in self.process_noise)
        self.measurement_noise = tuple(float(v) for v in self.measurement_noise)
        self.initial_noise = tuple(float(v) for v in self.initial_noise)
        if self.mode not in MODES:
            raise ConfigurationError(f"不明なモードです: {self.mode} (選択肢: {', '.join(MODES)})")
        if not (0.0 < self.theta < 90.0):
            raise ConfigurationError(f"theta は (0°, 90°) の範囲で指定してください: {self.theta}")
        for name in ("iou_match_threshold", "second_stage_iou_threshold",
                     "det_conf_threshold", "embedding_ema_beta"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigurationError(f"{name} は [0, 1] の範囲で指定してください: {value}")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigurationError(f"lambda と gamma は0以上である必要があります: {self.lam}, {self.gamma}")
        if self.max_age < 0 or self.min_hits < 1:
            raise ConfigurationError(f"max_age >= 0, min_hits >= 1 が必要です: {self.max_age}, {self.min_hits}")
        # KalmanParams 側の検証を通しておく
        self.kalman_params

    @property
    def cos_theta(self) -> float:
        return math.cos(math.radians(self.theta))

    @property
    def use_velocity(self) -> bool:
        return self.mode != "sort"

    @property
    def use_appearance(self) -> bool:
        return self.mode.startswith("kamsort")

    @property
    def adaptive(self) -> bool:
        return self.mode in ("kamsort", "kamsort_no_kpp")

    @property
    def use_reupdate(self) -> bool:
        return self.mode != "sort"

    @property
    def second_stage(self) -> Optional[str]:
        return SECOND_STAGE_BY_MODE[self.mode]

    @property
    def kalman_params(self) -> KalmanParams:
        return KalmanParams(process_noise=self.process_noise,
                            measurement_noise=self.measurement_noise,
                            initial_noise=self.initial_noise,
                            alpha=self.alpha, c_min=self.c_min, c_max=self.c_max)

    def cost_mode(self, appearance_available: bool = True) -> CostMode:
        return CostMode(use_velocity=self.use_velocity,
                        use_appearance=self.use_appearance and appearance_available,
                        adaptive=self.adaptive, gamma=self.gamma)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrackerConfig":
        """辞書から設定を作る。'lambda' キーは lam として扱う"""
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in data.items():
            name = "lam" if key == "lambda" else key
            if name not in known:
                raise ConfigurationError(f"不明な設定キーです: {key}")
            values[name] = value
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"設定値が不正です: {e}") from e

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "TrackerConfig":
        """YAMLファイルの tracker セクション（なければ全体）から読み込む"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise FileOperationError(f"設定ファイルを開けません: {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"設定ファイルのYAMLが不正です: {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"設定ファイルの形式が不正です: {path}")
        return cls.from_dict(data.get("tracker", data))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("process_noise", "measurement_noise", "initial_noise"):
            data[key] = list(data[key])
        return data


@dataclass(frozen=True)
class Detection:
    """1フレームの検出"""
    frame: int
    box: BBox
    confidence: float = 1.0
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"信頼度は [0, 1] の範囲である必要があります: {self.confidence}")


@dataclass(frozen=True)
class TrackRow:
    """出力されるトラックの1行"""
    frame: int
    track_id: int
    box: BBox
    confidence: float


@dataclass
class Track:
    """追跡中のトラック"""
    id: int
    state: KalmanTrackState
    observations: List[Tuple[int, BBox]]
    embedding: Optional[np.ndarray] = None
    hits: int = 1
    age_since_update: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    # 最後の観測で更新した直後の状態
    frozen_state: Optional[KalmanTrackState] = None
    predicted_box: Optional[BBox] = None
    confidence: float = 1.0

    @property
    def last_observation(self) -> Tuple[int, BBox]:
        return self.observations[-1]

    @property
    def is_live(self) -> bool:
        return self.status is not TrackStatus.REMOVED

    def refresh_embedding(self, det_embedding: Optional[np.ndarray], beta: float) -> None:
        """埋め込みの指数移動平均を更新し、正規化する"""
        if det_embedding is None:
            return
        if self.embedding is None:
            self.embedding = det_embedding.copy()
            return
        if self.embedding.shape != det_embedding.shape:
            raise EmbeddingFormatError(
                f"トラック {self.id} の埋め込み次元 {self.embedding.shape[0]} と検出の次元 {det_embedding.shape[0]} が一致しません")
        mixed = beta * self.embedding + (1.0 - beta) * det_embedding
        norm = float(np.linalg.norm(mixed))
        self.embedding = mixed / norm if norm > 1e-12 else det_embedding.copy()


@dataclass
class StepResult:
    """1フレーム分の処理結果"""
    frame: int
    # (トラックid, フレーム内の検出インデックス)
    assignments: List[Tuple[int, int]]
    emitted: List[TrackRow]
    tracks: List[Track]
    weights: AdaptiveWeights


def _iou_assign(boxes: Sequence[BBox], dets: Sequence[Detection],
                threshold: float) -> List[Tuple[int, int]]:
    if not boxes or not dets:
        return []
    ious = iou_matrix(boxes_to_array(boxes), boxes_to_array([d.box for d in dets]))
    result = solve_assignment(1.0 - ious)
    return [(i, j) for i, j in result.matches if ious[i, j] >= threshold]


def kalman_pp_second_stage(unmatched_tracks: Sequence[Track], unmatched_dets: Sequence[Detection],
                           config: TrackerConfig) -> List[Tuple[int, int]]:
    """Kalman++ 補正ボックスとのIoUで残りを再割り当てする

    戻り値は引数リスト内のインデックス対。
    """
    params = config.kalman_params
    boxes = [revised_box(t.state, params) for t in unmatched_tracks]
    return _iou_assign(boxes, unmatched_dets, config.second_stage_iou_threshold)


class Tracker:
    """1シーケンス分のトラッカー（スレッド間での共有は不可）"""

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.params = self.config.kalman_params
        self.tracks: List[Track] = []
        self.next_id = 1
        self.frame_count = 0
        self.last_frame: Optional[int] = None
        self.created = 0
        self._warned_appearance = False

    def _frame_weights(self, dets: Sequence[Detection]) -> Tuple[AdaptiveWeights, bool]:
        if not self.config.use_appearance or not dets:
            return AdaptiveWeights.motion_only(), False
        if any(d.embedding is None for d in dets):
            if not self._warned_appearance:
                logger.warning("埋め込みのない検出があるため、該当フレームは動きのみで割り当てます")
                self._warned_appearance = True
            return AdaptiveWeights.motion_only(), False
        mu = homogeneity([d.embedding for d in dets])
        return adaptive_weights(mu.mu_det, self.config.theta), True

    def _second_stage(self, tracks: Sequence[Track], dets: Sequence[Detection]) -> List[Tuple[int, int]]:
        kind = self.config.second_stage
        if kind is None:
            return []
        if kind == "kalman_pp":
            return kalman_pp_second_stage(tracks, dets, self.config)
        if kind == "predicted":
            boxes = [t.predicted_box for t in tracks]
        else:
            boxes = [t.last_observation[1] for t in tracks]
        return _iou_assign(boxes, dets, self.config.second_stage_iou_threshold)

    def _apply_match(self, track: Track, det: Detection, frame: int) -> None:
        last_frame = track.last_observation[0]
        if self.config.use_reupdate and frame - last_frame > 1:
            track.state = observation_centric_reupdate(
                track.observations, (frame, det.box), track.frozen_state, self.params)
        else:
            track.state = update(track.state, det.box, self.params)
        track.frozen_state = track.state
        track.observations.append((frame, det.box))
        track.refresh_embedding(det.embedding, self.config.embedding_ema_beta)
        track.hits += 1
        track.age_since_update = 0
        track.confidence = det.confidence
        if track.status is TrackStatus.LOST:
            track.status = TrackStatus.CONFIRMED
        elif track.status is TrackStatus.TENTATIVE and track.hits >= self.config.min_hits:
            track.status = TrackStatus.CONFIRMED

    def _spawn(self, det: Detection, frame: int) -> Track:
        state = initiate(det.box, self.params)
        warm = self.frame_count <= self.config.min_hits or self.config.min_hits <= 1
        track = Track(id=self.next_id, state=state, observations=[(frame, det.box)],
                      embedding=None if det.embedding is None else det.embedding.copy(),
                      status=TrackStatus.CONFIRMED if warm else TrackStatus.TENTATIVE,
                      frozen_state=state, predicted_box=det.box, confidence=det.confidence)
        self.next_id += 1
        self.created += 1
        logger.debug(f"frame {frame}: トラック {track.id} を生成 ({track.status.value})")
        return track

    def step(self, frame: int, detections: Sequence[Detection]) -> StepResult:
        """1フレーム分の検出を処理する"""
        if any(d.frame != frame for d in detections):
            raise SequenceError(f"frame {frame} の入力に別フレームの検出が含まれています")
        if self.last_frame is not None and frame <= self.last_frame:
            raise SequenceError(f"フレーム番号が増加していません: {self.last_frame} -> {frame}")
        self.last_frame = frame
        self.frame_count += 1

        det_indices = [i for i, d in enumerate(detections)
                       if d.confidence >= self.config.det_conf_threshold]
        dets = [detections[i] for i in det_indices]

        for track in self.tracks:
            track.state = predict(track.state, self.params)
            track.age_since_update += 1
            track.predicted_box = track.state.to_bbox()

        weights, appearance = self._frame_weights(dets)
        costs = build_cost_matrix(self.tracks, dets, weights, self.config.lam,
                                  self.config.cost_mode(appearance))
        first = solve_assignment(costs)

        matches: List[Tuple[int, int]] = []
        unmatched_t = set(first.unmatched_rows)
        unmatched_d = set(first.unmatched_cols)
        for i, j in first.matches:
            if iou(self.tracks[i].predicted_box, dets[j].box) >= self.config.iou_match_threshold:
                matches.append((i, j))
            else:
                unmatched_t.add(i)
                unmatched_d.add(j)

        left_t = sorted(unmatched_t)
        left_d = sorted(unmatched_d)
        for a, b in self._second_stage([self.tracks[i] for i in left_t], [dets[j] for j in left_d]):
            matches.append((left_t[a], left_d[b]))
            unmatched_t.discard(left_t[a])
            unmatched_d.discard(left_d[b])

        assignments = []
        for i, j in matches:
            track = self.tracks[i]
            self._apply_match(track, dets[j], frame)
            assignments.append((track.id, det_indices[j]))

        for i in unmatched_t:
            track = self.tracks[i]
            if track.status is TrackStatus.TENTATIVE:
                track.status = TrackStatus.REMOVED
            elif track.status is TrackStatus.CONFIRMED:
                track.status = TrackStatus.LOST
            if track.age_since_update > self.config.max_age:
                track.status = TrackStatus.REMOVED
            if track.status is TrackStatus.REMOVED:
                logger.debug(f"frame {frame}: トラック {track.id} を削除")

        self.tracks = [t for t in self.tracks if t.is_live]
        for j in sorted(unmatched_d):
            self.tracks.append(self._spawn(dets[j], frame))

        emitted = sorted(
            (TrackRow(frame, t.id, t.last_observation[1], t.confidence) for t in self.tracks
             if t.status is TrackStatus.CONFIRMED and t.age_since_update == 0),
            key=lambda r: r.track_id)
        logger.debug(f"frame {frame}: 検出 {len(dets)}, 割り当て {len(matches)}, "
                     f"出力 {len(emitted)}, w_a={weights.w_a:.3f}")
        return StepResult(frame, sorted(assignments), emitted, list(self.tracks), weights)


def group_by_frame(detections: Iterable[Detection]) -> Dict[int, List[Detection]]:
    """フレームごとにまとめる（フレーム順に並んでいる必要がある）"""
    grouped: Dict[int, List[Detection]] = {}
    last = None
    for det in detections:
        if last is not None and det.frame < last:
            raise SequenceError(f"検出がフレーム順に並んでいません: {last} の後に {det.frame}")
        last = det.frame
        grouped.setdefault(det.frame, []).append(det)
    return grouped


def run_sequence(detections: Iterable[Detection], config: Optional[TrackerConfig] = None,
                 first_frame: Optional[int] = None, last_frame: Optional[int] = None) -> List[TrackRow]:
    """シーケンス全体を追跡し、(frame, id) 順の出力行を返す

    検出のないフレームも1フレームずつ処理する。
    """
    tracker = Tracker(config)
    grouped = group_by_frame(detections)
    if not grouped and (first_frame is None or last_frame is None):
        return []
    start = first_frame if first_frame is not None else min(grouped)
    end = last_frame if last_frame is not None else max(grouped)
    rows: List[TrackRow] = []
    for frame in range(start, end + 1):
        rows.extend(tracker.step(frame, grouped.get(frame, [])).emitted)
    return rows
