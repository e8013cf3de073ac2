"""
バウンディングボックスの表現と、重なり・中心の計算
全モジュールが利用する幾何の基本部品
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import GeometryError

# 静止とみなす変位のしきい値（ピクセル）
STATIONARY_EPS = 1e-9


@dataclass(frozen=True)
class BBox:
    """左上基準の軸平行ボックス（ピクセル単位）"""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"ボックスの幅と高さは正である必要があります: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def to_array(self) -> np.ndarray:
        """[x, y, w, h] の配列を返す"""
        return np.array([self.x, self.y, self.w, self.h], dtype=float)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class CenterState:
    """中心・面積・アスペクト比による表現 (cx, cy, s, r)"""
    cx: float
    cy: float
    s: float
    r: float

    def __post_init__(self):
        if not (self.s > 0 and self.r > 0):
            raise GeometryError(f"面積とアスペクト比は正である必要があります: s={self.s}, r={self.r}")

    @classmethod
    def from_bbox(cls, box: BBox) -> "CenterState":
        cx, cy = box.center
        return cls(cx, cy, box.w * box.h, box.w / box.h)

    def to_bbox(self) -> BBox:
        w = math.sqrt(self.s * self.r)
        h = self.s / w
        return BBox(self.cx - w / 2.0, self.cy - h / 2.0, w, h)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.s, self.r], dtype=float)


def iou(a: BBox, b: BBox) -> float:
    """2つのボックスのIoU（辺が接するだけの場合は0）"""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.area + b.area - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[x, y, w, h] 配列同士のIoU行列 (N×M)

    幅や高さが0以下の行は他のどのボックスともIoU 0 になる。
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))

    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]

    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2:3], 0.0, None) * np.clip(a[:, 3:4], 0.0, None)
    area_b = np.clip(b[:, 2], 0.0, None) * np.clip(b[:, 3], 0.0, None)
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.to_array() for b in boxes])


def expand(box: BBox, factor: float) -> BBox:
    """中心を保ったまま幅と高さを factor 倍する"""
    if not factor > 0:
        raise GeometryError(f"拡大率は正である必要があります: {factor}")
    cx, cy = box.center
    w = box.w * factor
    h = box.h * factor
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def center_direction(p: CenterState, q: CenterState) -> Optional[Tuple[float, float]]:
    """p から q への単位方向ベクトル。静止している場合は None"""
    dx = q.cx - p.cx
    dy = q.cy - p.cy
    norm = math.hypot(dx, dy)
    if norm < STATIONARY_EPS:
        return None
    return (dx / norm, dy / norm)
