"""
コスト行列と割り当てのテスト
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pytest

from association import (FORBIDDEN, AdaptiveWeights, CostMode, adaptive_weights, appearance_cost,
                         build_cost_matrix, homogeneity, normalize_embedding, solve_assignment,
                         velocity_cost)
from errors import ConfigurationError, EmbeddingFormatError
from geometry import BBox, CenterState


@dataclass
class FakeTrack:
    predicted_box: BBox
    embedding: Optional[np.ndarray] = None
    observations: List[Tuple[int, BBox]] = field(default_factory=list)


@dataclass
class FakeDetection:
    box: BBox
    embedding: Optional[np.ndarray] = None


def _brute_force_min(costs):
    n, m = costs.shape
    if n <= m:
        return min(sum(costs[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(costs[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def test_homogeneity_identical():
    """同一埋め込みの均質性テスト"""
    e = normalize_embedding([1.0, 2.0, 3.0])
    assert homogeneity([e, e, e]).mu_det == pytest.approx(1.0, abs=1e-9)


def test_homogeneity_orthonormal_pair():
    """直交する2埋め込みの均質性テスト"""
    mu = homogeneity([np.array([1.0, 0.0]), np.array([0.0, 1.0])]).mu_det
    assert mu == pytest.approx(1 / math.sqrt(2), abs=1e-5)


def test_homogeneity_single():
    """1埋め込みの均質性テスト"""
    assert homogeneity([np.array([0.6, 0.8])]).mu_det == pytest.approx(1.0)


def test_homogeneity_antipodal_is_degenerate():
    """正反対の埋め込みで退化するテスト"""
    result = homogeneity([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])
    assert result.degenerate
    assert result.mu_det == 0.0


def test_homogeneity_duplication_invariant():
    """埋め込みを複製しても均質性が変わらないテスト"""
    rng = np.random.default_rng(5)
    embs = [normalize_embedding(rng.standard_normal(8)) for _ in range(4)]
    mu = homogeneity(embs).mu_det
    assert homogeneity(embs + embs).mu_det == pytest.approx(mu, abs=1e-12)
    assert homogeneity(embs[::-1]).mu_det == pytest.approx(mu, abs=1e-12)


def test_homogeneity_empty():
    """空入力のエラーテスト"""
    with pytest.raises(ValueError):
        homogeneity([])


@pytest.mark.parametrize("mu_det,theta,w_a", [
    (1.0, 80.0, 0.0),
    (math.cos(math.radians(80.0)), 80.0, 1.0),
    (0.586824, 80.0, 0.5),
])
def test_adaptive_weights_examples(mu_det, theta, w_a):
    """適応重みの代表値テスト"""
    weights = adaptive_weights(mu_det, theta)
    assert weights.w_a == pytest.approx(w_a, abs=1e-5)
    assert weights.w_m == pytest.approx(2.0 - w_a, abs=1e-5)


def test_adaptive_weights_boundaries_exact():
    """境界での適応重みの厳密値テスト"""
    assert abs(adaptive_weights(1.0, 45.0).w_a) <= 1e-12
    theta = 67.5
    assert adaptive_weights(math.cos(math.radians(theta)), theta).w_a == pytest.approx(1.0, abs=1e-12)


def test_adaptive_weights_sum_to_two():
    """w_a + w_m = 2 のテスト"""
    rng = np.random.default_rng(0)
    for mu, theta in zip(rng.uniform(-1, 1, 100000), rng.uniform(1e-3, 90 - 1e-3, 100000)):
        weights = adaptive_weights(float(mu), float(theta))
        assert abs(weights.w_a + weights.w_m - 2.0) <= 1e-12 * max(1.0, abs(weights.w_a))


def test_adaptive_weights_can_exceed_one():
    """μ_det < cos θ で w_a が1を超えるテスト"""
    weights = adaptive_weights(0.0, 80.0)
    assert weights.w_a > 1.0
    assert weights.w_m < 1.0


@pytest.mark.parametrize("theta", [0.0, 90.0, -5.0, 120.0])
def test_adaptive_weights_invalid_theta(theta):
    """範囲外の θ のエラーテスト"""
    with pytest.raises(ConfigurationError):
        adaptive_weights(0.5, theta)


def test_velocity_cost():
    """速度方向コストのテスト"""
    p2, p1 = CenterState(0, 0, 1, 1), CenterState(1, 0, 1, 1)
    assert velocity_cost(p2, p1, CenterState(2, 0, 1, 1)) == pytest.approx(0.0)
    assert velocity_cost(p2, p1, CenterState(0, 0, 1, 1)) == pytest.approx(1.0)
    assert velocity_cost(p2, p1, CenterState(1, 1, 1, 1)) == pytest.approx(0.5)
    # 静止している場合はペナルティなし
    assert velocity_cost(p1, p1, CenterState(5, 5, 1, 1)) == 0.0


def test_appearance_cost():
    """外観コストのテスト"""
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert appearance_cost(e1, e1) == pytest.approx(0.0)
    assert appearance_cost(e1, e2) == pytest.approx(1.0)
    assert appearance_cost(e1, -e1) == pytest.approx(2.0)


def test_normalize_embedding():
    """埋め込みの正規化テスト"""
    assert normalize_embedding([3.0, 4.0]) == pytest.approx([0.6, 0.8])
    with pytest.raises(EmbeddingFormatError):
        normalize_embedding([0.0, 0.0])


def test_cost_matrix_perfect_match():
    """完全一致でコスト0のテスト"""
    emb = np.array([1.0, 0.0])
    box = BBox(10, 10, 20, 20)
    track = FakeTrack(box, emb, [(1, box.translate(-2, 0)), (2, box.translate(-1, 0))])
    costs = build_cost_matrix([track], [FakeDetection(box, emb)], AdaptiveWeights(1.0, 1.0), 0.2)
    assert costs[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_cost_matrix_ignores_embeddings_without_appearance_weight():
    """w_a = 0 で埋め込みに依存しないテスト"""
    rng = np.random.default_rng(2)
    tracks = [FakeTrack(BBox(10 * i, 0, 20, 20), normalize_embedding(rng.standard_normal(4)))
              for i in range(3)]
    dets = [FakeDetection(BBox(10 * j + 1, 1, 20, 20), normalize_embedding(rng.standard_normal(4)))
            for j in range(3)]
    weights = AdaptiveWeights(w_a=0.0, w_m=2.0)
    costs = build_cost_matrix(tracks, dets, weights, 0.2)
    shuffled = [FakeDetection(d.box, dets[(j + 1) % 3].embedding) for j, d in enumerate(dets)]
    assert np.array_equal(costs, build_cost_matrix(tracks, shuffled, weights, 0.2))


def test_cost_matrix_appearance_overrides_motion():
    """外観が動きの割り当てを覆すテスト"""
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    tracks = [FakeTrack(BBox(0, 0, 20, 20), e1), FakeTrack(BBox(10, 0, 20, 20), e2)]
    # 動きだけなら交差した割り当てが有利になる配置
    dets = [FakeDetection(BBox(11, 0, 20, 20), e1), FakeDetection(BBox(1, 0, 20, 20), e2)]
    mode = CostMode(use_velocity=False)

    motion = solve_assignment(build_cost_matrix(tracks, dets, adaptive_weights(1.0, 80.0), 0.0, mode))
    assert sorted(motion.matches) == [(0, 1), (1, 0)]

    mu = homogeneity([e1, e2]).mu_det
    assert mu < math.cos(math.radians(40.0))
    appearance = solve_assignment(build_cost_matrix(tracks, dets, adaptive_weights(mu, 40.0), 0.0, mode))
    assert sorted(appearance.matches) == [(0, 0), (1, 1)]


def test_cost_matrix_gate():
    """離れたペアが除外されるテスト"""
    tracks = [FakeTrack(BBox(0, 0, 10, 10))]
    dets = [FakeDetection(BBox(500, 500, 10, 10)), FakeDetection(BBox(2, 0, 10, 10))]
    costs = build_cost_matrix(tracks, dets, AdaptiveWeights.motion_only(), 0.2, CostMode(use_appearance=False))
    assert costs[0, 0] == FORBIDDEN
    assert costs[0, 1] < FORBIDDEN
    assert solve_assignment(costs).matches == [(0, 1)]


def test_cost_matrix_dimension_mismatch():
    """埋め込み次元の不一致のエラーテスト"""
    tracks = [FakeTrack(BBox(0, 0, 10, 10), np.array([1.0, 0.0]))]
    dets = [FakeDetection(BBox(0, 0, 10, 10), np.array([1.0, 0.0, 0.0]))]
    with pytest.raises(EmbeddingFormatError):
        build_cost_matrix(tracks, dets, AdaptiveWeights(1.0, 1.0), 0.2)


def test_cost_matrix_fixed_weights():
    """固定重みモードのテスト"""
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    box = BBox(0, 0, 10, 10)
    costs = build_cost_matrix([FakeTrack(box, e1)], [FakeDetection(box, e2)], AdaptiveWeights(0.0, 2.0),
                              0.0, CostMode(adaptive=False, gamma=0.5))
    assert costs[0, 0] == pytest.approx(0.5)


def test_solve_assignment_example():
    """2×2 の割り当てテスト"""
    costs = np.array([[1.0, 2.0], [2.0, 4.0]])
    result = solve_assignment(costs)
    assert sorted(result.matches) == [(0, 1), (1, 0)]
    assert result.total_cost(costs) == 4.0


def test_solve_assignment_forbidden_demoted():
    """番兵値のペアが未割り当てになるテスト"""
    costs = np.array([[FORBIDDEN, FORBIDDEN], [0.1, FORBIDDEN]])
    result = solve_assignment(costs)
    assert result.matches == [(1, 0)]
    assert result.unmatched_rows == [0]
    assert result.unmatched_cols == [1]


def test_solve_assignment_empty():
    """空行列の割り当てテスト"""
    result = solve_assignment(np.zeros((0, 3)))
    assert result.matches == []
    assert result.unmatched_cols == [0, 1, 2]


def test_solve_assignment_brute_force_oracle():
    """全列挙との総コスト一致テスト"""
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n, m = rng.integers(1, 6, size=2)
        costs = rng.uniform(0.0, 10.0, size=(n, m))
        result = solve_assignment(costs)
        assert len(result.matches) == min(n, m)
        assert result.total_cost(costs) == pytest.approx(_brute_force_min(costs), abs=1e-9)


def test_solve_assignment_brute_force_oracle_large():
    """7×7 までの全列挙との一致テスト"""
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, m = rng.integers(6, 8, size=2)
        costs = rng.uniform(0.0, 10.0, size=(n, m))
        assert solve_assignment(costs).total_cost(costs) == pytest.approx(_brute_force_min(costs), abs=1e-9)


def test_solve_assignment_shift_invariant():
    """定数を足しても割り当てが変わらないテスト"""
    rng = np.random.default_rng(11)
    costs = rng.uniform(0.0, 1.0, size=(4, 6))
    assert solve_assignment(costs).matches == solve_assignment(costs + 3.5).matches
