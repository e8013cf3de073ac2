"""
FileManagerクラスのテスト
"""
import csv
import json

import pytest

from metrics import REPORT_KEYS, evaluate
from mot_io import MotRow, read_detections, read_embedding_rows, read_mot
from simulate import ScenarioSpec, generate
from tracking_pipeline import SWEEP_COLUMNS, FileManager


@pytest.fixture
def temp_dir(tmp_path):
    """一時ディレクトリのフィクスチャ"""
    return tmp_path


@pytest.fixture
def file_manager(temp_dir):
    """FileManagerのフィクスチャ"""
    return FileManager(str(temp_dir))


@pytest.fixture
def report(single_track_gt):
    """評価レポートのフィクスチャ"""
    pred = single_track_gt[:9] + [MotRow(1, 2, 200.0, 200.0, 20.0, 20.0)]
    return evaluate(single_track_gt, pred)


def test_init(file_manager, temp_dir):
    """初期化テスト"""
    assert file_manager.output_dir == temp_dir
    assert temp_dir.exists()


def test_init_nested(temp_dir):
    """ネストした出力ディレクトリの作成テスト"""
    manager = FileManager(str(temp_dir / "a" / "b"))
    assert (temp_dir / "a" / "b").is_dir()
    assert manager.resolve("x.txt") == temp_dir / "a" / "b" / "x.txt"


def test_save_report(file_manager, report, temp_dir):
    """評価レポート保存テスト"""
    json_path, text_path = file_manager.save_report(report, "report.json")
    assert json_path == temp_dir / "report.json"
    assert text_path == temp_dir / "report.txt"

    with open(json_path, "r", encoding="utf-8") as f:
        data = json.load(f)
        assert tuple(data) == REPORT_KEYS
        assert data["mota"] == pytest.approx(0.8)

    lines = text_path.read_text(encoding="utf-8").splitlines()
    assert "mota: 0.800000" in lines
    assert "idsw: 0" in lines


def test_save_scenario(file_manager, temp_dir):
    """シナリオ保存テスト"""
    spec = ScenarioSpec(seed=2, n_tracks=2, frames=10, embedding_dim=4)
    scenario = generate(spec)
    out_dir = file_manager.save_scenario(scenario, "scene")

    assert out_dir == temp_dir / "scene"
    for name in ("gt.txt", "det.txt", "emb.csv", "scenario.json"):
        assert (out_dir / name).is_file()
    assert len(read_mot(out_dir / "gt.txt")) == 20
    assert len(read_detections(out_dir / "det.txt")) == 20
    assert sum(len(v) for v in read_embedding_rows(out_dir / "emb.csv").values()) == 20

    with open(out_dir / "scenario.json", "r", encoding="utf-8") as f:
        assert ScenarioSpec.from_dict(json.load(f)) == spec


def test_save_sweep(file_manager, temp_dir):
    """スイープ結果保存テスト"""
    rows = [
        {"mode": "kamsort", "theta": 80.0, "alpha": 1.0, "hota": 0.9, "mota": 0.8,
         "idf1": 0.95, "deta": 0.85, "assa": 0.92, "error": ""},
        {"mode": "kamsort", "theta": 45.0, "alpha": 1.0, "hota": "", "mota": "",
         "idf1": "", "deta": "", "assa": "", "error": "ConfigurationError: bad"},
    ]
    path = file_manager.save_sweep(rows, "sweep/sweep.csv")
    with open(path, "r", encoding="utf-8", newline="") as f:
        records = list(csv.DictReader(f))
    assert list(records[0]) == SWEEP_COLUMNS
    assert records[0]["idf1"] == "0.95"
    assert records[1]["error"] == "ConfigurationError: bad"
