"""
合成シーン生成のテスト
"""
import json

import numpy as np
import pytest

from association import homogeneity
from errors import ScenarioError
from simulate import ScenarioSpec, generate, measured_similarity


def test_deterministic(lanes_spec):
    """同じシードで同じシーンになるテスト"""
    first, second = generate(lanes_spec), generate(lanes_spec)
    assert first.gt == second.gt
    assert first.detections == second.detections
    for a, b in zip(first.detections, second.detections):
        assert np.array_equal(a.embedding, b.embedding)


def test_different_seed_changes_scene(lanes_spec):
    """シードを変えると軌跡が変わるテスト"""
    other = ScenarioSpec(**{**lanes_spec.to_dict(), "seed": lanes_spec.seed + 1})
    assert generate(lanes_spec).gt != generate(other).gt


def test_noiseless_detections_equal_ground_truth(lanes_spec):
    """ノイズなしで検出が正解と一致するテスト"""
    scenario = generate(lanes_spec)
    assert [(d.frame, d.box) for d in scenario.detections] == [(r.frame, r.box) for r in scenario.gt]


def test_gap_drops_detections():
    """欠落区間の検出がないテスト"""
    spec = ScenarioSpec(seed=1, n_tracks=3, frames=40, gap=(10, 4))
    scenario = generate(spec)
    frames = {d.frame for d in scenario.detections}
    assert frames.isdisjoint({10, 11, 12, 13})
    assert len(scenario.gt) == 3 * 40
    assert len(scenario.detections) == 3 * 36


def test_clutter_and_noise():
    """誤検出と位置ノイズのテスト"""
    spec = ScenarioSpec(seed=5, n_tracks=2, frames=50, det_noise_std=2.0, fp_rate=1.0)
    scenario = generate(spec)
    assert len(scenario.detections) > 2 * 50
    assert all(0.4 <= d.confidence <= 1.0 for d in scenario.detections)
    assert all(np.linalg.norm(d.embedding) == pytest.approx(1.0) for d in scenario.detections)


@pytest.mark.parametrize("target", [0.2, 0.5, 0.8])
def test_embedding_similarity_target(target):
    """埋め込みの均質性が目標値に近いテスト"""
    spec = ScenarioSpec(seed=0, n_tracks=4, frames=5, embedding_similarity=target)
    measured = measured_similarity(generate(spec))
    assert measured == pytest.approx(target, abs=0.05)


def test_embedding_similarity_one():
    """類似度1で全埋め込みが一致するテスト"""
    spec = ScenarioSpec(seed=0, n_tracks=3, frames=3, embedding_similarity=1.0, embedding_noise_std=0.0)
    scenario = generate(spec)
    frame_embs = [d.embedding for d in scenario.detections if d.frame == 1]
    assert homogeneity(frame_embs).mu_det == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("motion", ["linear", "crossing", "circular", "rebound"])
def test_motion_models_fit_frame(motion):
    """各動きモデルでボックスがフレーム内に収まるテスト"""
    spec = ScenarioSpec(seed=0, n_tracks=3, frames=40, motion=motion, speed=3.0)
    width, height = spec.frame_size
    for r in generate(spec).gt:
        assert r.x >= 0 and r.y >= 0
        assert r.x + r.w <= width and r.y + r.h <= height


def test_crossing_tracks_meet_at_midpoint():
    """すれ違いシーンで中間フレームに中心が一致するテスト"""
    spec = ScenarioSpec(seed=0, n_tracks=2, frames=21, motion="crossing", speed=5.0)
    mid = [r for r in generate(spec).gt if r.frame == 11]
    assert mid[0].box.center == pytest.approx(mid[1].box.center, abs=1e-9)


def test_rebound_reverses_direction():
    """折り返しシーンで中間フレーム後に向きが反転するテスト"""
    spec = ScenarioSpec(seed=0, n_tracks=2, frames=21, motion="rebound", speed=4.0)
    track = {r.frame: r.box.center[0] for r in generate(spec).gt if r.id == 1}
    assert track[11] - track[10] == pytest.approx(4.0)
    assert track[12] - track[11] == pytest.approx(-4.0)


@pytest.mark.parametrize("kwargs", [
    {"speed": 50.0},
    {"n_tracks": 20},
    {"motion": "zigzag"},
    {"gap": (95, 10)},
    {"embedding_dim": 5},
    {"embedding_similarity": 1.5},
    {"frames": 0},
])
def test_infeasible_spec(kwargs):
    """実現不可能な仕様のエラーテスト"""
    with pytest.raises(ScenarioError):
        generate(ScenarioSpec(**{"n_tracks": 5, "frames": 100, **kwargs}))


def test_spec_from_file(tmp_path, lanes_spec):
    """JSONとYAMLの仕様読み込みテスト"""
    json_path = tmp_path / "scenario.json"
    json_path.write_text(json.dumps(lanes_spec.to_dict()), encoding="utf-8")
    assert ScenarioSpec.from_file(json_path) == lanes_spec

    yaml_path = tmp_path / "scenario.yaml"
    yaml_path.write_text("scenario:\n  seed: 3\n  n_tracks: 2\n  motion: crossing\n", encoding="utf-8")
    spec = ScenarioSpec.from_file(yaml_path)
    assert (spec.seed, spec.n_tracks, spec.motion) == (3, 2, "crossing")


def test_spec_unknown_key():
    """不明なキーのエラーテスト"""
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"n_tracks": 2, "colour": "red"})
