import numpy as np
import pytest

from src.modules.fisher import (
    NoiseModel,
    crlb_unconstrained,
    fim,
    fim_block_derivative,
    fim_from_rigidity,
    fim_partial,
    tag_fim,
)
from src.modules.geometry_graph import build_graph, euclidean_motion_basis, rigidity_matrix
from src.utils.exceptions import SingularGeometryError


def _numeric_partial(graph, positions, noise, node, coord, h=1e-6):
    plus = positions.copy()
    minus = positions.copy()
    plus[node, coord] += h
    minus[node, coord] -= h
    return (tag_fim(graph, plus, noise) - tag_fim(graph, minus, noise)) / (2 * h)


def test_single_edge_block():
    """F_ij のブロック値を手計算と照合"""
    graph = build_graph(2, 1, 2, [(0, 1)])
    positions = np.array([[0.0, 0.0], [3.0, 4.0], [10.0, 0.0]])
    matrix = fim(graph, positions, NoiseModel("additive", 1.0))
    expected = -np.array([[9.0, 12.0], [12.0, 16.0]]) / 25.0
    assert np.allclose(matrix.full[0:2, 2:4], expected), "F_01 が不正です"
    assert np.allclose(matrix.tag_block, -expected), "F_00 が行和性質を満たしません"
    assert matrix.cross_block.shape == (2, 4), "F_UK の形状が不正です"


@pytest.mark.parametrize("kind", ["additive", "lognormal"])
def test_fim_matches_rigidity_product(kind, rng):
    """ブロック組み立てと RᵀQR が一致することを確認"""
    noise = NoiseModel(kind, 0.2)
    graph = build_graph(2, 3, 3, [(0, 1), (0, 3), (1, 4), (2, 5), (1, 2)])
    for _ in range(10):
        positions = rng.uniform(-5.0, 5.0, (6, 2))
        full = fim(graph, positions, noise).full
        oracle = fim_from_rigidity(graph, positions, noise)
        error = np.linalg.norm(full - oracle) / np.linalg.norm(oracle)
        assert error < 1e-12, f"FIM が RᵀQR と一致しません: {error}"


def test_fim_is_symmetric_psd_and_annihilates_motions(square_network, additive_noise):
    """FIM が対称半正定値でユークリッド運動を核に持つことを確認"""
    graph, positions = square_network
    full = fim(graph, positions, additive_noise).full
    assert np.allclose(full, full.T), "FIM が対称ではありません"
    assert np.linalg.eigvalsh(full)[0] > -1e-9 * np.linalg.norm(full), "FIM が半正定値ではありません"
    basis = euclidean_motion_basis(positions)
    for column in basis.T:
        assert np.linalg.norm(full @ column) <= 1e-10 * np.linalg.norm(full) * np.linalg.norm(column), \
            "FIM がユークリッド運動を消しません"


def test_kernel_matches_rigidity_kernel(square_network, additive_noise):
    """rank F = rank R を確認"""
    graph, positions = square_network
    full = fim(graph, positions, additive_noise).full
    assert np.linalg.matrix_rank(full) == np.linalg.matrix_rank(rigidity_matrix(graph, positions)), "核が一致しません"


def test_single_edge_fim_is_rank_one():
    """単一エッジの RᵀQR がランク 1 であることを確認"""
    graph = build_graph(2, 1, 2, [])
    positions = np.array([[1.0, 1.0], [0.0, 0.0], [2.0, 1.0]])
    assert np.linalg.matrix_rank(fim_from_rigidity(graph, positions, NoiseModel())) == 1, "ランクが 1 ではありません"


def test_additive_trace_identity(square_network):
    """加法モデルで trace F_U = Σ|N_i|/σ² になることを確認"""
    graph, positions = square_network
    noise = NoiseModel("additive", 0.3)
    expected = sum(graph.degree(i) for i in graph.tags) / noise.sigma ** 2
    assert np.trace(tag_fim(graph, positions, noise)) == pytest.approx(expected, rel=1e-12), "トレース恒等式が成り立ちません"
    moved = positions.copy()
    moved[0] += [0.7, -0.4]
    assert np.trace(tag_fim(graph, moved, noise)) == pytest.approx(expected, rel=1e-12), "トレースが位置に依存しています"


def test_lognormal_trace_identity(square_network, lognormal_noise):
    """対数正規モデルで trace F_U = ΣΣ d^{-2}/σ² になることを確認"""
    graph, positions = square_network
    expected = sum(
        1.0 / np.sum((positions[i] - positions[j]) ** 2)
        for i in graph.tags
        for j in graph.neighbors(i)
    ) / lognormal_noise.sigma ** 2
    assert np.trace(tag_fim(graph, positions, lognormal_noise)) == pytest.approx(expected, rel=1e-12), \
        "対数正規のトレース恒等式が成り立ちません"


def test_zero_distance_edge_raises():
    """距離 0 のエッジでエラーになることを確認"""
    graph = build_graph(2, 1, 2, [(0, 1)])
    positions = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(SingularGeometryError):
        fim(graph, positions, NoiseModel())


@pytest.mark.parametrize("kind", ["additive", "lognormal"])
@pytest.mark.parametrize("dim", [2, 3])
def test_block_derivative_matches_finite_differences(kind, dim, rng):
    """∂F_ij/∂ξ_i が数値微分と一致し、ξ_j では符号反転になることを確認"""
    noise = NoiseModel(kind, 0.5)
    p_i = rng.uniform(-2.0, 2.0, dim)
    p_j = rng.uniform(-2.0, 2.0, dim) + 3.0

    def block(a, b):
        diff = a - b
        return -np.outer(diff, diff) / (np.dot(diff, diff) ** noise.kappa * noise.sigma ** 2)

    h = 1e-6
    for k in range(dim):
        step = np.zeros(dim)
        step[k] = h
        numeric = (block(p_i + step, p_j) - block(p_i - step, p_j)) / (2 * h)
        analytic = fim_block_derivative(p_i, p_j, k, noise)
        error = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic)
        assert error < 1e-6, f"座標 {k} の微分が一致しません: {error}"
        assert np.allclose(analytic, analytic.T), "微分ブロックが対称ではありません"
        assert np.allclose(fim_block_derivative(p_j, p_i, k, noise), -analytic), "反対称性が成り立ちません"


def test_block_derivative_named_coordinate():
    """座標名 'x' と整数 0 が同じ結果になることを確認"""
    noise = NoiseModel()
    assert np.allclose(
        fim_block_derivative([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], "x", noise),
        fim_block_derivative([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0, noise),
    ), "座標名の解決が不正です"


@pytest.mark.parametrize("kind", ["additive", "lognormal"])
def test_fim_partial_matches_finite_differences(kind, rng):
    """∂F_U/∂ξ がタグ・アンカーとも数値微分と一致することを確認"""
    noise = NoiseModel(kind, 0.2)
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)])
    for _ in range(5):
        positions = rng.uniform(0.0, 6.0, (5, 2))
        for node in range(graph.node_count):
            for coord in range(2):
                analytic = fim_partial(graph, positions, noise, node, coord)
                numeric = _numeric_partial(graph, positions, noise, node, coord)
                error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
                assert error < 1e-5, f"ノード {node} 座標 {coord} の偏微分が一致しません: {error}"


def test_fim_partial_sparsity(additive_noise):
    """アンカーでは隣接タグの対角ブロックのみ、タグに隣接しないアンカーでは 0 になることを確認"""
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)])
    positions = np.array([[1.0, 1.2], [3.1, 2.3], [0.0, 0.0], [4.0, 0.5], [1.5, 4.0]])
    assert not np.any(fim_partial(graph, positions, additive_noise, 4, "x")), "タグ非隣接ノードの偏微分が 0 ではありません"

    partial = fim_partial(graph, positions, additive_noise, 2, "y")
    assert not np.any(partial[0:2, 2:4]), "アンカーの偏微分に非対角ブロックがあります"
    assert np.any(partial[0:2, 0:2]) and np.any(partial[2:4, 2:4]), "隣接タグの対角ブロックが 0 です"


def test_crlb_inverse_and_pseudo_inverse():
    """正則なら逆行列、特異なら擬似逆行列になることを確認"""
    bound = crlb_unconstrained(2.0 * np.eye(2))
    assert np.allclose(bound.matrix, 0.5 * np.eye(2)), "2I の逆行列が 0.5I ではありません"
    assert not bound.pseudo_inverse, "正則行列で擬似逆行列フラグが立ちました"

    singular = crlb_unconstrained(np.diag([1.0, 0.0]))
    assert singular.pseudo_inverse, "特異行列で擬似逆行列フラグが立ちません"
    assert np.allclose(singular.matrix, np.diag([1.0, 0.0])), "擬似逆行列が不正です"


def test_triangulation_bound_is_psd(triangulation, additive_noise):
    """三角形分割の CRLB が対称正定値であることを確認"""
    graph, positions = triangulation
    block = tag_fim(graph, positions, additive_noise)
    assert np.linalg.eigvalsh(block)[0] > 0.0, "F_U が正定値ではありません"
    bound = crlb_unconstrained(block)
    assert bound.trace > 0.0, "CRLB のトレースが正ではありません"
    assert np.allclose(bound.matrix, bound.matrix.T), "CRLB が対称ではありません"
    assert np.linalg.eigvalsh(bound.matrix)[0] > 0.0, "CRLB が正定値ではありません"
