"""
テストの共通設定
"""
import pytest
from pathlib import Path

from mot_io import MotRow
from simulate import ScenarioSpec


@pytest.fixture(autouse=True)
def setup_test_env():
    """テスト環境のセットアップ"""
    # テスト用の一時ディレクトリを作成
    test_dir = Path("test_output")
    test_dir.mkdir(exist_ok=True)

    yield

    # テスト後のクリーンアップ
    if test_dir.exists():
        for file in test_dir.glob("*"):
            if file.is_file():
                file.unlink()
        test_dir.rmdir()


@pytest.fixture
def lanes_spec():
    """重なりのないレーン移動シーンのフィクスチャ"""
    return ScenarioSpec(seed=3, n_tracks=5, frames=50, motion="linear", speed=4.0,
                        embedding_similarity=0.5, embedding_dim=16)


@pytest.fixture
def single_track_gt():
    """10フレームの静止トラック1本の正解フィクスチャ"""
    return [MotRow(t, 1, 10.0, 10.0, 20.0, 20.0) for t in range(1, 11)]
