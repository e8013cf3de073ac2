"""
KAM-SORT のコスト行列構築と割り当て

- 検出の外観の均質性 μ_det と適応重み W_a, W_m
- 速度方向の一貫性コスト、外観コスト
- 動き・方向・外観を合成したコスト行列とハンガリアン法による割り当て
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from typing_extensions import TypeAlias

from errors import ConfigurationError, EmbeddingFormatError
from geometry import BBox, CenterState, boxes_to_array, center_direction, iou_matrix

logger = logging.getLogger(__name__)

Embedding: TypeAlias = np.ndarray
CostMatrix: TypeAlias = np.ndarray

# ゲートで除外されたペアを表す番兵値
FORBIDDEN = 1e6
# 平均ベクトルがこれより小さいと均質性を定義できない
DEGENERATE_NORM = 1e-9
# ゲート: IoUがこれ未満かつ中心距離が対角線のGATE_DIAGONALS倍を超えると除外
GATE_IOU = 1e-9
GATE_DIAGONALS = 3.0


class TrackLike(Protocol):
    """コスト行列の行として使えるトラック"""
    predicted_box: BBox
    embedding: Optional[Embedding]
    observations: Sequence[Tuple[int, BBox]]


class DetectionLike(Protocol):
    """コスト行列の列として使える検出"""
    box: BBox
    embedding: Optional[Embedding]


@dataclass(frozen=True)
class Homogeneity:
    """フレーム内検出の外観の均質性"""
    mu_det: float
    degenerate: bool = False


@dataclass(frozen=True)
class AdaptiveWeights:
    """外観重み w_a と動き重み w_m（w_a + w_m = 2）"""
    w_a: float
    w_m: float
    mu_det: float = 1.0

    @classmethod
    def motion_only(cls) -> "AdaptiveWeights":
        return cls(w_a=0.0, w_m=1.0)


@dataclass(frozen=True)
class CostMode:
    """コスト行列に含める項の切り替え"""
    use_velocity: bool = True
    use_appearance: bool = True
    adaptive: bool = True
    gamma: float = 1.0


@dataclass
class AssignmentResult:
    """割り当て結果"""
    matches: List[Tuple[int, int]] = field(default_factory=list)
    unmatched_rows: List[int] = field(default_factory=list)
    unmatched_cols: List[int] = field(default_factory=list)

    def total_cost(self, costs: CostMatrix) -> float:
        return float(sum(costs[r, c] for r, c in self.matches))


def normalize_embedding(values: Sequence[float]) -> Embedding:
    """単位ノルムに正規化した埋め込みを返す"""
    vec = np.asarray(values, dtype=float).ravel()
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm < DEGENERATE_NORM:
        raise EmbeddingFormatError(f"ノルムが0または有限でない埋め込みは正規化できません (norm={norm})")
    return vec / norm


def homogeneity(dets: Sequence[Embedding]) -> Homogeneity:
    """検出埋め込みの平均ベクトルへの平均コサイン類似度 μ_det"""
    if len(dets) == 0:
        raise ValueError("均質性の計算には少なくとも1つの埋め込みが必要です")
    emb = np.stack([np.asarray(e, dtype=float) for e in dets])
    mu = emb.mean(axis=0)
    mu_norm = float(np.linalg.norm(mu))
    if mu_norm < DEGENERATE_NORM:
        logger.debug("埋め込みの平均ベクトルがほぼ0のため μ_det=0 とします")
        return Homogeneity(mu_det=0.0, degenerate=True)
    cos = (emb @ mu) / (np.linalg.norm(emb, axis=1) * mu_norm)
    return Homogeneity(mu_det=float(np.clip(cos.mean(), -1.0, 1.0)))


def adaptive_weights(mu_det: float, theta_deg: float) -> AdaptiveWeights:
    """しきい値角 θ（度）から外観・動きの重みを求める

    μ_det < cos θ のとき w_a は1を超える。下限のクリップはしない。
    """
    if not (0.0 < theta_deg < 90.0):
        raise ConfigurationError(f"θ は (0°, 90°) の範囲で指定してください: {theta_deg}")
    if not (-1.0 <= mu_det <= 1.0):
        raise ValueError(f"μ_det は [-1, 1] の範囲である必要があります: {mu_det}")
    w_a = (1.0 - mu_det) / (1.0 - math.cos(math.radians(theta_deg)))
    return AdaptiveWeights(w_a=w_a, w_m=2.0 - w_a, mu_det=mu_det)


def velocity_cost(track_obs_prev2: CenterState, track_obs_prev1: CenterState,
                  det: CenterState) -> float:
    """過去2観測の進行方向と、最新観測→検出の方向のなす角を π で正規化"""
    d1 = center_direction(track_obs_prev2, track_obs_prev1)
    d2 = center_direction(track_obs_prev1, det)
    if d1 is None or d2 is None:
        return 0.0
    dot = d1[0] * d2[0] + d1[1] * d2[1]
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    return abs(math.atan2(cross, dot)) / math.pi


def appearance_cost(track_emb: Embedding, det_emb: Embedding) -> float:
    """コサイン距離 1 - cos"""
    return 1.0 - float(np.dot(track_emb, det_emb))


def effective_weights(weights: AdaptiveWeights, mode: CostMode) -> AdaptiveWeights:
    """モードに応じて実際に使う重みを決める"""
    if not mode.use_appearance:
        return AdaptiveWeights.motion_only()
    if not mode.adaptive:
        return AdaptiveWeights(w_a=mode.gamma, w_m=1.0, mu_det=weights.mu_det)
    return weights


def _appearance_matrix(tracks: Sequence[TrackLike], detections: Sequence[DetectionLike]) -> np.ndarray:
    n, m = len(tracks), len(detections)
    out = np.ones((n, m))
    det_embs = [d.embedding for d in detections]
    dims = {e.shape[0] for e in det_embs if e is not None}
    dims.update(t.embedding.shape[0] for t in tracks if t.embedding is not None)
    if len(dims) > 1:
        raise EmbeddingFormatError(f"埋め込みの次元が一致しません: {sorted(dims)}")

    valid_cols = [j for j, e in enumerate(det_embs) if e is not None]
    if not valid_cols:
        return out
    det_mat = np.stack([det_embs[j] for j in valid_cols])
    for i, track in enumerate(tracks):
        if track.embedding is None:
            continue
        out[i, valid_cols] = 1.0 - det_mat @ track.embedding
    return out


def _velocity_matrix(tracks: Sequence[TrackLike], detections: Sequence[DetectionLike]) -> np.ndarray:
    out = np.zeros((len(tracks), len(detections)))
    det_centers = [CenterState.from_bbox(d.box) for d in detections]
    for i, track in enumerate(tracks):
        if len(track.observations) < 2:
            continue
        prev2 = CenterState.from_bbox(track.observations[-2][1])
        prev1 = CenterState.from_bbox(track.observations[-1][1])
        for j, center in enumerate(det_centers):
            out[i, j] = velocity_cost(prev2, prev1, center)
    return out


def gate_mask(predicted: np.ndarray, det_boxes: np.ndarray, ious: np.ndarray) -> np.ndarray:
    """除外すべきペアの真偽行列"""
    pc = predicted[:, :2] + predicted[:, 2:] / 2.0
    dc = det_boxes[:, :2] + det_boxes[:, 2:] / 2.0
    dist = np.linalg.norm(pc[:, None, :] - dc[None, :, :], axis=2)
    diag = np.hypot(predicted[:, 2], predicted[:, 3])[:, None]
    return (ious < GATE_IOU) & (dist > GATE_DIAGONALS * diag)


def build_cost_matrix(tracks: Sequence[TrackLike], detections: Sequence[DetectionLike],
                      weights: AdaptiveWeights, lam: float,
                      mode: CostMode = CostMode()) -> CostMatrix:
    """トラック×検出のコスト行列

    C = w_m·(1 - IoU) + λ·C_v + w_a·C_a。ゲート外のペアは FORBIDDEN。
    """
    n, m = len(tracks), len(detections)
    if n == 0 or m == 0:
        return np.zeros((n, m))

    predicted = boxes_to_array([t.predicted_box for t in tracks])
    det_boxes = boxes_to_array([d.box for d in detections])
    ious = iou_matrix(predicted, det_boxes)
    w = effective_weights(weights, mode)

    costs = w.w_m * (1.0 - ious)
    if mode.use_velocity and lam != 0.0:
        costs = costs + lam * _velocity_matrix(tracks, detections)
    if mode.use_appearance and w.w_a != 0.0:
        costs = costs + w.w_a * _appearance_matrix(tracks, detections)

    costs[gate_mask(predicted, det_boxes, ious)] = FORBIDDEN
    return costs


def solve_assignment(costs: CostMatrix, forbid_threshold: float = FORBIDDEN) -> AssignmentResult:
    """最小コストの一対一割り当て。番兵値のペアは未割り当てに戻す"""
    costs = np.asarray(costs, dtype=float)
    n, m = costs.shape
    result = AssignmentResult()
    if n == 0 or m == 0:
        result.unmatched_rows = list(range(n))
        result.unmatched_cols = list(range(m))
        return result

    rows, cols = linear_sum_assignment(costs)
    matched_rows, matched_cols = set(), set()
    for r, c in zip(rows, cols):
        if costs[r, c] >= forbid_threshold:
            continue
        result.matches.append((int(r), int(c)))
        matched_rows.add(int(r))
        matched_cols.add(int(c))
    result.unmatched_rows = [i for i in range(n) if i not in matched_rows]
    result.unmatched_cols = [j for j in range(m) if j not in matched_cols]
    return result
