"""
トラックごとの等速カルマンフィルタ

状態は [u, v, s, r, u̇, v̇, ṡ]（中心x, 中心y, 面積, アスペクト比と各速度）。
遮蔽区間の観測中心再更新と、予測の不確かさに応じて箱を広げる
Kalman++ の補正ボックスもここで扱う。
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from errors import ConfigurationError, NumericalError, SequenceError
from geometry import BBox, CenterState, expand

logger = logging.getLogger(__name__)

STATE_DIM = 7
MEAS_DIM = 4
# 予測面積・アスペクト比の下限
MIN_POSITIVE = 1e-6

# 等速遷移行列
F = np.eye(STATE_DIM)
F[0, 4] = F[1, 5] = F[2, 6] = 1.0

# 観測行列
H = np.eye(MEAS_DIM, STATE_DIM)


@dataclass(frozen=True)
class KalmanParams:
    """カルマンフィルタとKalman++のパラメータ

    ノイズは状態の大きさに比例する係数で与える。
    位置系は sqrt(s) 倍、面積系は s 倍、アスペクト比はそのまま使う。
    """
    # [u, v, s, r, u̇, v̇, ṡ] のプロセスノイズ標準偏差係数
    process_noise: Tuple[float, ...] = (0.05, 0.05, 0.05, 0.05, 0.0005, 0.0005, 0.0005)
    # [cx, cy, s, r] の観測ノイズ標準偏差係数
    measurement_noise: Tuple[float, ...] = (0.05, 0.05, 0.05, 0.05)
    # 初期共分散の標準偏差係数。速度成分は大きめにとる
    initial_noise: Tuple[float, ...] = (0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5)
    alpha: float = 1.0
    c_min: float = 1.0
    c_max: float = 1.5

    def __post_init__(self):
        if len(self.process_noise) != STATE_DIM:
            raise ConfigurationError(f"process_noise は{STATE_DIM}要素必要です: {self.process_noise}")
        if len(self.measurement_noise) != MEAS_DIM:
            raise ConfigurationError(f"measurement_noise は{MEAS_DIM}要素必要です: {self.measurement_noise}")
        if len(self.initial_noise) != STATE_DIM:
            raise ConfigurationError(f"initial_noise は{STATE_DIM}要素必要です: {self.initial_noise}")
        for name in ("process_noise", "measurement_noise", "initial_noise"):
            if any(v < 0 for v in getattr(self, name)):
                raise ConfigurationError(f"{name} に負の値は使えません")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha は0以上である必要があります: {self.alpha}")
        if not (0 < self.c_min <= 1 <= self.c_max):
            raise ConfigurationError(
                f"0 < c_min <= 1 <= c_max を満たす必要があります: c_min={self.c_min}, c_max={self.c_max}")


@dataclass(frozen=True)
class KalmanTrackState:
    """平均7次元ベクトルと7×7共分散"""
    mean: np.ndarray
    cov: np.ndarray = field(repr=False)

    @property
    def center_state(self) -> CenterState:
        return CenterState(float(self.mean[0]), float(self.mean[1]),
                           max(float(self.mean[2]), MIN_POSITIVE),
                           max(float(self.mean[3]), MIN_POSITIVE))

    def to_bbox(self) -> BBox:
        return self.center_state.to_bbox()

    @property
    def area_std(self) -> float:
        return float(np.sqrt(max(self.cov[2, 2], 0.0)))


def _scale_vector(s: float) -> np.ndarray:
    root = np.sqrt(s)
    return np.array([root, root, s, 1.0, root, root, s])


def _measurement_cov(s: float, params: KalmanParams) -> np.ndarray:
    std = np.asarray(params.measurement_noise) * _scale_vector(s)[:MEAS_DIM]
    return np.diag(std ** 2)


def _process_cov(s: float, params: KalmanParams) -> np.ndarray:
    std = np.asarray(params.process_noise) * _scale_vector(s)
    return np.diag(std ** 2)


def _clamp_mean(mean: np.ndarray) -> np.ndarray:
    mean[2] = max(mean[2], MIN_POSITIVE)
    mean[3] = max(mean[3], MIN_POSITIVE)
    return mean


def _clean_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    diag = np.clip(np.diag(cov), 0.0, None)
    np.fill_diagonal(cov, diag)
    return cov


def measurement_of(box: BBox) -> np.ndarray:
    """ボックスを観測ベクトル [cx, cy, s, r] に変換"""
    return CenterState.from_bbox(box).to_array()


def initiate(box: BBox, params: KalmanParams) -> KalmanTrackState:
    """最初の観測からトラック状態を作る（速度は0）"""
    z = measurement_of(box)
    mean = np.zeros(STATE_DIM)
    mean[:MEAS_DIM] = z
    std = np.asarray(params.initial_noise) * _scale_vector(z[2])
    return KalmanTrackState(mean, np.diag(std ** 2))


def predict(state: KalmanTrackState, params: KalmanParams) -> KalmanTrackState:
    """等速モデルで1フレーム先を予測する"""
    s = max(float(state.mean[2]), MIN_POSITIVE)
    mean = _clamp_mean(F @ state.mean)
    cov = F @ state.cov @ F.T + _process_cov(s, params)
    return KalmanTrackState(mean, _clean_cov(cov))


def _update_measurement(state: KalmanTrackState, z: np.ndarray,
                        params: KalmanParams) -> KalmanTrackState:
    s = max(float(state.mean[2]), MIN_POSITIVE)
    R = _measurement_cov(s, params)
    HP = H @ state.cov
    S = HP @ H.T + R
    try:
        gain = np.linalg.solve(S, HP).T
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"イノベーション共分散が特異です: {e}") from e
    if not np.all(np.isfinite(gain)):
        raise NumericalError("カルマンゲインに有限でない値が含まれます")

    innovation = z - H @ state.mean
    mean = _clamp_mean(state.mean + gain @ innovation)
    # Joseph形式
    I_KH = np.eye(STATE_DIM) - gain @ H
    cov = I_KH @ state.cov @ I_KH.T + gain @ R @ gain.T
    return KalmanTrackState(mean, _clean_cov(cov))


def update(state: KalmanTrackState, obs: BBox, params: KalmanParams) -> KalmanTrackState:
    """観測ボックスで状態を補正する"""
    return _update_measurement(state, measurement_of(obs), params)


def observation_centric_reupdate(track_history: Sequence[Tuple[int, BBox]],
                                 gap_end_obs: Tuple[int, BBox],
                                 state: KalmanTrackState,
                                 params: KalmanParams) -> KalmanTrackState:
    """遮蔽区間を仮想軌跡で埋めて状態を作り直す

    state は track_history の最後の観測時点（更新直後）の状態。
    最後の実観測と gap_end_obs の間を (cx, cy, s, r) ごとに線形補間した
    仮想観測で predict+update を繰り返し、最後に実観測で更新する。
    """
    if not track_history:
        raise SequenceError("観測履歴が空のトラックは再更新できません")
    last_frame, last_box = track_history[-1]
    end_frame, end_box = gap_end_obs
    gap = end_frame - last_frame - 1
    if gap < 0:
        raise SequenceError(
            f"再更新の終端フレーム {end_frame} は最後の観測フレーム {last_frame} より後である必要があります")

    z_start = measurement_of(last_box)
    z_end = measurement_of(end_box)
    steps = gap + 1
    for k in range(1, steps + 1):
        if k == steps:
            z = z_end
        else:
            z = z_start + (z_end - z_start) * (k / steps)
        state = _update_measurement(predict(state, params), z, params)
    if gap > 0:
        logger.debug(f"仮想軌跡で {gap} フレーム分を再更新しました")
    return state


def revision_factor(state: KalmanTrackState, params: KalmanParams) -> float:
    """面積の相対標準偏差から決まる面積倍率 f"""
    s = max(float(state.mean[2]), MIN_POSITIVE)
    sigma_rel = state.area_std / s
    return float(np.clip(1.0 + params.alpha * sigma_rel, params.c_min, params.c_max))


def revised_box(state: KalmanTrackState, params: KalmanParams) -> BBox:
    """予測ボックスを面積が f 倍になるよう広げた Kalman++ ボックス"""
    return expand(state.to_bbox(), float(np.sqrt(revision_factor(state, params))))
