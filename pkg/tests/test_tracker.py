"""
トラッカーのテスト
"""
from pathlib import Path

import numpy as np
import pytest

from errors import ConfigurationError, SequenceError
from geometry import BBox, iou
from kalman import KalmanTrackState
from metrics import evaluate
from mot_io import rows_from_tracks
from simulate import ScenarioSpec, generate
from tracker import (Detection, Track, Tracker, TrackerConfig, TrackStatus, kalman_pp_second_stage,
                     run_sequence)

CONFIG_DIR = Path(__file__).parent.parent / "configs"


@pytest.fixture
def rebound_scenario():
    """中心で折り返す2トラックの低類似度シーンのフィクスチャ"""
    spec = ScenarioSpec(seed=0, n_tracks=2, frames=41, motion="rebound", speed=4.0,
                        lateral_offset=4.0, embedding_similarity=0.087, embedding_dim=8,
                        embedding_noise_std=0.0)
    return generate(spec)


@pytest.fixture
def occlusion_scenario():
    """全トラックが5フレーム検出されない区間を持つシーンのフィクスチャ"""
    spec = ScenarioSpec(seed=1, n_tracks=3, frames=60, motion="linear", speed=4.0, gap=(20, 5))
    return generate(spec)


def _evaluate(scenario, mode):
    rows = run_sequence(scenario.detections, TrackerConfig(mode=mode))
    return evaluate(scenario.gt, rows_from_tracks(rows))


def _det(frame, x, y, size=40.0, embedding=None):
    return Detection(frame=frame, box=BBox(x, y, size, size), confidence=1.0, embedding=embedding)


def test_config_defaults_match_committed_yaml():
    """同梱の設定ファイルが既定値と一致するテスト"""
    assert TrackerConfig.from_yaml(CONFIG_DIR / "kamsort.yaml") == TrackerConfig()


def test_config_from_dict():
    """辞書からの設定作成テスト"""
    config = TrackerConfig.from_dict({"lambda": 0.5, "theta": 45.0, "mode": "ocsort"})
    assert config.lam == 0.5
    assert config.cos_theta == pytest.approx(np.cos(np.pi / 4))
    assert config.second_stage == "last_observation"
    assert not config.use_appearance


@pytest.mark.parametrize("data", [
    {"mode": "deepsort"},
    {"theta": 90.0},
    {"unknown_key": 1},
    {"c_min": 2.0},
    {"min_hits": 0},
])
def test_config_invalid(data):
    """不正な設定のエラーテスト"""
    with pytest.raises(ConfigurationError):
        TrackerConfig.from_dict(data)


def test_config_yaml_section(tmp_path):
    """YAMLの tracker セクション読み込みテスト"""
    path = tmp_path / "config.yaml"
    path.write_text("tracker:\n  mode: sort\n  max_age: 5\n", encoding="utf-8")
    config = TrackerConfig.from_yaml(path)
    assert config.mode == "sort"
    assert config.max_age == 5
    assert config.second_stage is None


def test_empty_frame_ages_tracks():
    """検出のないフレームでトラックが加齢するテスト"""
    tracker = Tracker(TrackerConfig())
    tracker.step(1, [_det(1, 100, 100)])
    result = tracker.step(2, [])
    assert result.emitted == []
    assert [t.age_since_update for t in result.tracks] == [1]
    assert result.tracks[0].status is TrackStatus.LOST


def test_non_monotonic_frame():
    """フレーム番号が増加しない場合のエラーテスト"""
    tracker = Tracker()
    tracker.step(3, [])
    with pytest.raises(SequenceError):
        tracker.step(3, [])
    with pytest.raises(SequenceError):
        tracker.step(5, [_det(4, 0, 0)])


def test_low_confidence_filtered():
    """信頼度しきい値未満の検出が無視されるテスト"""
    tracker = Tracker(TrackerConfig(det_conf_threshold=0.5))
    result = tracker.step(1, [Detection(1, BBox(0, 0, 10, 10), confidence=0.3)])
    assert result.tracks == []


def test_tentative_track_confirmation():
    """立ち上がり後に生成したトラックが min_hits で確定するテスト"""
    tracker = Tracker(TrackerConfig(min_hits=3))
    for frame in range(1, 5):
        tracker.step(frame, [_det(frame, 100, 100)])
    result = tracker.step(5, [_det(5, 100, 100), _det(5, 400, 300)])
    assert [r.track_id for r in result.emitted] == [1]
    new_track = [t for t in result.tracks if t.id == 2][0]
    assert new_track.status is TrackStatus.TENTATIVE

    result = tracker.step(6, [_det(6, 100, 100), _det(6, 400, 300)])
    assert [r.track_id for r in result.emitted] == [1]
    result = tracker.step(7, [_det(7, 100, 100), _det(7, 400, 300)])
    assert [r.track_id for r in result.emitted] == [1, 2]


def test_tentative_track_removed_on_miss():
    """未確定トラックが1回の見逃しで削除されるテスト"""
    tracker = Tracker(TrackerConfig(min_hits=3))
    for frame in range(1, 5):
        tracker.step(frame, [_det(frame, 100, 100)])
    tracker.step(5, [_det(5, 100, 100), _det(5, 400, 300)])
    result = tracker.step(6, [_det(6, 100, 100)])
    assert [t.id for t in result.tracks] == [1]
    result = tracker.step(7, [_det(7, 100, 100), _det(7, 400, 300)])
    assert sorted(t.id for t in result.tracks) == [1, 3]


def test_lost_track_removed_after_max_age():
    """max_age を超えたトラックが削除されるテスト"""
    tracker = Tracker(TrackerConfig(max_age=2))
    tracker.step(1, [_det(1, 100, 100)])
    tracker.step(2, [])
    result = tracker.step(3, [])
    assert len(result.tracks) == 1
    result = tracker.step(4, [])
    assert result.tracks == []


def test_missing_embeddings_fall_back_to_motion():
    """埋め込みのない検出で動きのみになるテスト"""
    tracker = Tracker(TrackerConfig(mode="kamsort"))
    result = tracker.step(1, [_det(1, 0, 0), _det(1, 200, 0, embedding=np.array([1.0, 0.0]))])
    assert result.weights.w_a == 0.0
    assert result.weights.w_m == 1.0


def test_kalman_pp_second_stage_rescues_match():
    """Kalman++ の補正ボックスでのみ対応付くテスト"""
    cov = np.eye(7)
    cov[2, 2] = 15625.0
    state = KalmanTrackState(np.array([5.0, 5.0, 100.0, 1.0, 0.0, 0.0, 0.0]), cov)
    track = Track(id=1, state=state, observations=[(1, BBox(0, 0, 10, 10))])
    det = Detection(frame=2, box=BBox(7, -1, 12, 12))

    assert iou(state.to_bbox(), det.box) < 0.2
    config = TrackerConfig(alpha=1.0, c_max=3.0, second_stage_iou_threshold=0.2)
    assert kalman_pp_second_stage([track], [det], config) == [(0, 0)]

    disabled = TrackerConfig(alpha=0.0, c_max=3.0, second_stage_iou_threshold=0.2)
    assert kalman_pp_second_stage([track], [det], disabled) == []


def test_kalman_pp_second_stage_no_detections():
    """未対応の検出がない場合のテスト"""
    state = KalmanTrackState(np.array([5.0, 5.0, 100.0, 1.0, 0.0, 0.0, 0.0]), np.eye(7))
    track = Track(id=1, state=state, observations=[(1, BBox(0, 0, 10, 10))])
    assert kalman_pp_second_stage([track], [], TrackerConfig()) == []


def test_single_linear_track():
    """1本の等速トラックが単一idで追跡されるテスト"""
    scenario = generate(ScenarioSpec(seed=4, n_tracks=1, frames=100, speed=4.0, embedding_dim=4))
    rows = run_sequence(scenario.detections, TrackerConfig())
    assert {r.track_id for r in rows} == {1}
    assert len(rows) == 100
    assert evaluate(scenario.gt, rows_from_tracks(rows)).idsw == 0


def test_run_sequence_deterministic(occlusion_scenario):
    """同じ入力で同じ出力になるテスト"""
    first = run_sequence(occlusion_scenario.detections, TrackerConfig())
    second = run_sequence(occlusion_scenario.detections, TrackerConfig())
    assert first == second


def test_identity_conservation(lanes_spec):
    """出力idが生成済みかつフレーム内で重複しないテスト"""
    scenario = generate(lanes_spec)
    tracker = Tracker(TrackerConfig())
    by_frame = {}
    for det in scenario.detections:
        by_frame.setdefault(det.frame, []).append(det)
    for frame in range(1, lanes_spec.frames + 1):
        result = tracker.step(frame, by_frame.get(frame, []))
        ids = [r.track_id for r in result.emitted]
        assert len(ids) == len(set(ids))
        assert all(1 <= i <= tracker.created for i in ids)
        track_ids = [t for t, _ in result.assignments]
        det_ids = [d for _, d in result.assignments]
        assert len(track_ids) == len(set(track_ids))
        assert len(det_ids) == len(set(det_ids))


def test_appearance_preserves_identity_on_rebound(rebound_scenario):
    """外観の重みで折り返しの id 入れ替わりを防ぐテスト"""
    assert _evaluate(rebound_scenario, "kamsort").idsw == 0
    assert _evaluate(rebound_scenario, "sort").idsw >= 1
    assert _evaluate(rebound_scenario, "ocsort").idsw >= 1


def test_kalman_pp_never_hurts_on_occlusion(occlusion_scenario):
    """遮蔽シーンで Kalman++ が IDSW を増やさないテスト"""
    with_kpp = _evaluate(occlusion_scenario, "kamsort")
    without_kpp = _evaluate(occlusion_scenario, "kamsort_no_kpp")
    assert with_kpp.idsw == 0
    assert with_kpp.idsw <= without_kpp.idsw
    assert with_kpp.idf1 >= without_kpp.idf1


def test_ground_truth_as_detections(lanes_spec):
    """正解を検出として与えると IDF1 = 1 になるテスト"""
    scenario = generate(lanes_spec)
    detections = [Detection(frame=r.frame, box=r.box, confidence=1.0,
                            embedding=scenario.prototypes[r.id - 1] / np.linalg.norm(scenario.prototypes[r.id - 1]))
                  for r in scenario.gt]
    rows = run_sequence(detections, TrackerConfig())
    report = evaluate(scenario.gt, rows_from_tracks(rows))
    assert report.idf1 == 1.0
    assert report.idsw == 0
