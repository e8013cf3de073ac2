"""
決定的な合成シーン生成

遮蔽による検出欠落・高速移動・密度・外観の類似度を制御できる。
軌跡はシードから引いたパラメータの閉形式で決まり、乱数は PCG64 を使う。
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import yaml

from association import homogeneity
from errors import FileOperationError, ScenarioError
from geometry import BBox
from mot_io import MotRow
from tracker import Detection

logger = logging.getLogger(__name__)

MOTIONS = ("linear", "crossing", "circular", "rebound")
# 生成後に許容する μ_det の誤差
SIMILARITY_TOLERANCE = 0.05
CLUTTER_CONF_RANGE = (0.4, 1.0)


@dataclass
class ScenarioSpec:
    """シナリオ仕様"""
    seed: int = 0
    n_tracks: int = 5
    frames: int = 100
    frame_size: Tuple[int, int] = (640, 480)
    motion: str = "linear"  # linear, crossing, circular, rebound
    speed: float = 4.0  # px/frame
    gap: Tuple[int, int] = (0, 0)  # (開始フレーム, 長さ)。長さ0で欠落なし
    det_noise_std: float = 0.0
    fp_rate: float = 0.0  # 1フレームあたりの誤検出数の期待値
    embedding_similarity: float = 0.5
    embedding_dim: int = 16
    box_size: Tuple[float, float] = (40.0, 40.0)
    embedding_noise_std: float = 0.01
    lateral_offset: float = 0.0

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.gap = tuple(int(v) for v in self.gap)
        self.box_size = tuple(float(v) for v in self.box_size)
        if self.motion not in MOTIONS:
            raise ScenarioError(f"不明な動きモデルです: {self.motion} (選択肢: {', '.join(MOTIONS)})")
        if self.n_tracks < 1 or self.frames < 1:
            raise ScenarioError(f"n_tracks と frames は正である必要があります: {self.n_tracks}, {self.frames}")
        if len(self.frame_size) != 2 or min(self.frame_size) <= 0:
            raise ScenarioError(f"frame_size が不正です: {self.frame_size}")
        if len(self.box_size) != 2 or min(self.box_size) <= 0:
            raise ScenarioError(f"box_size が不正です: {self.box_size}")
        if len(self.gap) != 2 or self.gap[1] < 0:
            raise ScenarioError(f"gap が不正です: {self.gap}")
        if self.gap[1] > 0 and not (1 <= self.gap[0] and self.gap[0] + self.gap[1] - 1 <= self.frames):
            raise ScenarioError(f"gap の区間は [1, {self.frames}] に収まる必要があります: {self.gap}")
        if self.speed < 0 or self.det_noise_std < 0 or self.fp_rate < 0 or self.embedding_noise_std < 0:
            raise ScenarioError("speed, det_noise_std, fp_rate, embedding_noise_std は0以上である必要があります")
        if not (0.0 <= self.embedding_similarity <= 1.0):
            raise ScenarioError(f"embedding_similarity は [0, 1] の範囲です: {self.embedding_similarity}")
        if self.embedding_dim < self.n_tracks + 1:
            raise ScenarioError(
                f"embedding_dim は n_tracks + 1 以上必要です: {self.embedding_dim} < {self.n_tracks + 1}")

    @property
    def gap_frames(self) -> range:
        start, length = self.gap
        return range(start, start + length)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioSpec":
        try:
            return cls(**data)
        except TypeError as e:
            raise ScenarioError(f"シナリオ仕様のキーが不正です: {e}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScenarioSpec":
        """YAMLまたはJSONのシナリオ仕様を読み込む"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as e:
            raise FileOperationError(f"シナリオ仕様を開けません: {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ScenarioError(f"シナリオ仕様を解析できません: {path}: {e}") from e
        if not isinstance(data, dict):
            raise ScenarioError(f"シナリオ仕様の形式が不正です: {path}")
        return cls.from_dict(data.get("scenario", data))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("frame_size", "gap", "box_size"):
            data[key] = list(data[key])
        return data


@dataclass
class Scenario:
    """生成結果"""
    spec: ScenarioSpec
    gt: List[MotRow]
    detections: List[Detection]
    prototypes: np.ndarray = field(repr=False)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _centers(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """各トラックの中心座標 (n_tracks, frames, 2)"""
    width, height = spec.frame_size
    bw, bh = spec.box_size
    n = spec.n_tracks
    t = np.arange(1, spec.frames + 1, dtype=float)
    out = np.zeros((n, spec.frames, 2))

    if spec.motion == "linear":
        if height / n < bh:
            raise ScenarioError(f"レーン間隔 {height / n:.1f}px がボックス高さ {bh}px より狭いです")
        travel = spec.speed * (spec.frames - 1)
        if travel + bw > width:
            raise ScenarioError(f"移動量 {travel}px のトラックがフレーム幅 {width}px に収まりません")
        for k in range(n):
            direction = 1.0 if k % 2 == 0 else -1.0
            if direction > 0:
                x0 = rng.uniform(bw / 2, width - bw / 2 - travel)
            else:
                x0 = rng.uniform(bw / 2 + travel, width - bw / 2)
            out[k, :, 0] = x0 + direction * spec.speed * (t - 1)
            out[k, :, 1] = (k + 0.5) * height / n
        return out

    center = np.array([width / 2.0, height / 2.0])
    if spec.motion == "circular":
        r_max = min(width - bw, height - bh) / 2.0
        if r_max <= 0:
            raise ScenarioError("円運動の半径を確保できません")
        phases = rng.uniform(0.0, 2.0 * math.pi, size=n)
        for k in range(n):
            radius = r_max * (k + 1) / n
            angle = phases[k] + spec.speed / radius * t
            out[k, :, 0] = center[0] + radius * np.cos(angle)
            out[k, :, 1] = center[1] + radius * np.sin(angle)
        return out

    # crossing / rebound: 全トラックが中間フレームで中心に集まる
    t_mid = (spec.frames + 1) / 2.0
    for k in range(n):
        phi = 2.0 * math.pi * k / n
        direction = np.array([math.cos(phi), math.sin(phi)])
        offset = np.array([0.0, (k - (n - 1) / 2.0) * spec.lateral_offset])
        if spec.motion == "crossing":
            travel = (t - t_mid) * spec.speed
        else:
            travel = -np.abs(t - t_mid) * spec.speed
        out[k] = center + offset + travel[:, np.newaxis] * direction
    return out


def _check_inside(centers: np.ndarray, spec: ScenarioSpec) -> None:
    width, height = spec.frame_size
    bw, bh = spec.box_size
    x0 = centers[..., 0] - bw / 2
    y0 = centers[..., 1] - bh / 2
    if x0.min() < 0 or y0.min() < 0 or (x0 + bw).max() > width or (y0 + bh).max() > height:
        raise ScenarioError(
            f"速度 {spec.speed}px/frame ではトラックがフレーム {width}x{height} に収まりません")


def embedding_prototypes(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """同時に現れたときの μ_det が目標値になる単位ベクトル群

    p_k = a·c + sqrt(1 - a²)·u_k。u_k は中心が原点の正単体、c はそれと直交する単位ベクトル。
    """
    n, dim = spec.n_tracks, spec.embedding_dim
    a = spec.embedding_similarity
    protos = np.zeros((n, dim))
    if n == 1:
        protos[0, n] = 1.0
    else:
        simplex = np.eye(n) - 1.0 / n
        simplex /= np.linalg.norm(simplex, axis=1, keepdims=True)
        protos[:, :n] = math.sqrt(max(0.0, 1.0 - a * a)) * simplex
        protos[:, n] = a
    rotation, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return protos @ rotation.T


def _noisy_unit(vec: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std > 0:
        vec = vec + rng.normal(0.0, std, size=vec.shape)
    return vec / np.linalg.norm(vec)


def generate(spec: ScenarioSpec) -> Scenario:
    """正解・検出・埋め込みを生成する（同じシードなら同じ結果）"""
    rng = _rng(spec.seed)
    centers = _centers(spec, rng)
    _check_inside(centers, spec)
    protos = embedding_prototypes(spec, rng)
    width, height = spec.frame_size
    bw, bh = spec.box_size
    gap = set(spec.gap_frames)

    gt: List[MotRow] = []
    detections: List[Detection] = []
    for fi in range(spec.frames):
        frame = fi + 1
        for k in range(spec.n_tracks):
            cx, cy = centers[k, fi]
            gt.append(MotRow(frame, k + 1, cx - bw / 2, cy - bh / 2, bw, bh, 1.0))
            if frame in gap:
                continue
            if spec.det_noise_std > 0:
                dx, dy = rng.normal(0.0, spec.det_noise_std, size=2)
                cx, cy = cx + dx, cy + dy
            detections.append(Detection(
                frame=frame, box=BBox(cx - bw / 2, cy - bh / 2, bw, bh), confidence=1.0,
                embedding=_noisy_unit(protos[k], spec.embedding_noise_std, rng)))
        for _ in range(rng.poisson(spec.fp_rate) if spec.fp_rate > 0 else 0):
            x = rng.uniform(0.0, width - bw)
            y = rng.uniform(0.0, height - bh)
            conf = rng.uniform(*CLUTTER_CONF_RANGE)
            emb = rng.standard_normal(spec.embedding_dim)
            detections.append(Detection(frame=frame, box=BBox(x, y, bw, bh), confidence=float(conf),
                                        embedding=emb / np.linalg.norm(emb)))

    scenario = Scenario(spec=spec, gt=gt, detections=detections, prototypes=protos)
    measured = measured_similarity(scenario)
    if measured is not None and abs(measured - spec.embedding_similarity) > SIMILARITY_TOLERANCE:
        raise ScenarioError(
            f"埋め込みの均質性 {measured:.3f} が目標 {spec.embedding_similarity:.3f} から外れています。"
            "embedding_noise_std を小さくしてください")
    logger.info(f"シナリオを生成しました: motion={spec.motion}, tracks={spec.n_tracks}, "
                f"frames={spec.frames}, detections={len(detections)}")
    return scenario


def measured_similarity(scenario: Scenario) -> Optional[float]:
    """全トラックが検出されている最初のフレームの μ_det（誤検出は除く）

    トラックが1本なら μ_det は常に1なので None を返す。
    """
    n = scenario.spec.n_tracks
    if n < 2:
        return None
    gap = set(scenario.spec.gap_frames)
    by_frame: Dict[int, List[np.ndarray]] = {}
    for det in scenario.detections:
        if det.frame not in gap:
            by_frame.setdefault(det.frame, []).append(det.embedding)
    for frame in sorted(by_frame):
        if frame not in gap and len(by_frame[frame]) >= n:
            return homogeneity(by_frame[frame][:n]).mu_det
    return None
