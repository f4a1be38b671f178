import numpy as np
import pytest

from src.modules.fisher import NoiseModel, tag_fim
from src.modules.geometry_graph import (
    build_graph,
    build_triangulation,
    euclidean_motion_basis,
    graph_from_dict,
    graph_to_dict,
    incidence_matrix,
    is_infinitesimally_rigid,
    rigidity_function,
    rigidity_matrix,
)
from src.utils.exceptions import DegenerateConfigurationError, GraphDefinitionError, TriangulationError

ANCHOR_PAIRS = [(0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)]


def test_edge_count_and_order():
    """アンカー同士のエッジが補われ、辞書式に並ぶことを確認"""
    graph = build_graph(2, 2, 3, reversed(ANCHOR_PAIRS))
    assert graph.edge_count == 9, "E = P + K(K−1)/2 になっていません"
    assert graph.edges == ((0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)), "エッジ順が不正です"
    assert graph.neighbors(0) == frozenset({2, 3, 4}), "近傍が不正です"
    assert graph.ranging_edges == tuple(ANCHOR_PAIRS), "測距エッジが不正です"


def test_tag_pairs_come_first():
    """タグ同士のエッジがタグ-アンカーより先に並ぶことを確認"""
    graph = build_graph(2, 2, 2, [(1, 2), (0, 1), (0, 3)])
    assert graph.edges == ((0, 1), (0, 3), (1, 2), (2, 3)), "タグ-タグのエッジが先頭にありません"


def test_builds_are_deterministic():
    """同じ入力から同一のグラフが得られることを確認"""
    first = build_graph(2, 2, 3, ANCHOR_PAIRS)
    second = build_graph(2, 2, 3, list(ANCHOR_PAIRS))
    assert first == second, "同じ入力で異なるグラフになりました"


@pytest.mark.parametrize(
    "tags, anchors, pairs",
    [
        (1, 0, []),
        (2, 3, [(0, 0)]),
        (2, 3, [(0, 2), (2, 0)]),
        (2, 3, [(2, 3)]),
        (2, 3, [(0, 7)]),
    ],
)
def test_invalid_graphs(tags, anchors, pairs):
    """不正なグラフ定義がエラーになることを確認"""
    with pytest.raises(GraphDefinitionError):
        build_graph(2, tags, anchors, pairs)


def test_incidence_matrix():
    """接続行列の行和が 0 で、連結グラフのランクが N−1 であることを確認"""
    single = build_graph(2, 1, 2, [])
    assert np.array_equal(incidence_matrix(single), [[0.0, 1.0, -1.0]]), "単一エッジの接続行列が不正です"

    matrix = incidence_matrix(build_graph(2, 2, 3, ANCHOR_PAIRS))
    assert matrix.shape == (9, 5), "接続行列の形状が不正です"
    assert np.allclose(matrix.sum(axis=1), 0.0), "行和が 0 ではありません"
    assert np.linalg.matrix_rank(matrix) == 4, "ランクが N−1 ではありません"


def test_rigidity_function_values():
    """剛性関数が ½‖p_ij‖² を返し、並進で変わらないことを確認"""
    graph = build_graph(2, 1, 2, [(0, 1)])
    positions = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
    values = rigidity_function(graph, positions)
    assert values[0] == pytest.approx(12.5), "½·5² になっていません"
    assert values[1] == pytest.approx(12.5), "アンカー間の値が不正です"
    assert np.allclose(rigidity_function(graph, positions + [2.0, -7.0]), values), "並進で値が変わりました"


def test_rigidity_matrix_single_edge():
    """単一エッジの剛性行列を確認"""
    graph = build_graph(2, 1, 2, [])
    positions = np.array([[5.0, 5.0], [1.0, 0.0], [0.0, 0.0]])
    assert np.allclose(rigidity_matrix(graph, positions), [[0, 0, 1, 0, -1, 0]]), "剛性行列が不正です"
    assert not np.any(rigidity_matrix(graph, np.zeros((3, 2)))), "一致した配置で 0 行列になりません"


def test_rigidity_matrix_is_jacobian(square_network):
    """剛性行列が剛性関数の数値ヤコビアンと一致することを確認"""
    graph, positions = square_network
    analytic = rigidity_matrix(graph, positions)
    flat = positions.reshape(-1)
    h = 1e-6
    numeric = np.zeros_like(analytic)
    for k in range(flat.size):
        step = np.zeros_like(flat)
        step[k] = h
        plus = rigidity_function(graph, (flat + step).reshape(positions.shape))
        minus = rigidity_function(graph, (flat - step).reshape(positions.shape))
        numeric[:, k] = (plus - minus) / (2 * h)
    error = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic)
    assert error < 1e-6, f"ヤコビアンの相対誤差が大きすぎます: {error}"


def test_motion_basis_in_kernel(square_network):
    """ユークリッド運動の基底が剛性行列の核に含まれることを確認"""
    graph, positions = square_network
    basis = euclidean_motion_basis(positions)
    matrix = rigidity_matrix(graph, positions)
    assert basis.shape == (10, 3), "2次元の基底は 3 列です"
    residual = np.linalg.norm(matrix @ basis) / (np.linalg.norm(matrix) * np.linalg.norm(basis))
    assert residual < 1e-12, f"基底が核に含まれません: {residual}"


def test_motion_basis_rotation_column():
    """2次元の回転列が各ノードで [−y, x] になることを確認"""
    basis = euclidean_motion_basis([[0.0, 0.0], [1.0, 0.0]])
    assert np.allclose(basis[:, 2], [0.0, 0.0, 0.0, 1.0]), "回転列が不正です"


def test_motion_basis_3d():
    """3次元で 6 列の独立な基底になり、共線配置はエラーになることを確認"""
    basis = euclidean_motion_basis([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert basis.shape == (9, 6), "3次元の基底は 6 列です"
    assert np.linalg.matrix_rank(basis) == 6, "基底が一次独立ではありません"
    with pytest.raises(DegenerateConfigurationError):
        euclidean_motion_basis([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    with pytest.raises(DegenerateConfigurationError):
        euclidean_motion_basis([[1.0, 1.0], [1.0, 1.0]])


def test_infinitesimal_rigidity_examples():
    """三角形・パス・3次元完全グラフの剛性判定を確認"""
    triangle = build_graph(2, 1, 2, [(0, 1), (0, 2)])
    assert is_infinitesimally_rigid(triangle, [[0.3, 0.8], [0.0, 0.0], [1.0, 0.1]]), "三角形は剛です"

    path = build_graph(2, 2, 2, [(0, 1), (1, 2)])
    assert not is_infinitesimally_rigid(path, [[0.0, 1.0], [1.0, 2.0], [2.0, 0.5], [3.0, 1.7]]), "パスは剛ではありません"

    complete = build_graph(3, 1, 3, [(0, 1), (0, 2), (0, 3)])
    positions = [[0.2, 0.3, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    assert is_infinitesimally_rigid(complete, positions), "3次元の完全グラフ K4 は剛です"


def test_triangulation_is_rigid(triangulation, rng):
    """三角形分割が無限小剛で、摂動後も剛性を保つことを確認"""
    graph, positions = triangulation
    assert positions.shape == (8, 2), "配置の形状が不正です"
    assert is_infinitesimally_rigid(graph, positions), "三角形分割が剛ではありません"
    for tag in graph.tags:
        assert graph.degree(tag) >= 3, f"タグ {tag} の接続数が不足しています"
    perturbed = positions + rng.uniform(-1e-3, 1e-3, positions.shape)
    assert is_infinitesimally_rigid(graph, perturbed), "摂動で剛性が失われました"


def test_triangulation_single_tag(rng):
    """単一タグの三角形分割で F_U が正定値になることを確認"""
    anchors = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    graph, positions = build_triangulation(2, anchors, 1, [[0.05, 0.05], [0.95, 0.95]], rng)
    assert graph.degree(0) == 3, "タグは 3 台に接続されるはずです"
    block = tag_fim(graph, positions, NoiseModel("additive", 1.0))
    assert np.linalg.eigvalsh(block)[0] > 0.0, "F_U が正定値ではありません"


def test_triangulation_3d(rng):
    """3次元の三角形分割が剛であることを確認"""
    anchors = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]])
    graph, positions = build_triangulation(3, anchors, 5, [[0.5, 0.5, 0.5], [3.5, 3.5, 3.5]], rng)
    assert is_infinitesimally_rigid(graph, positions), "3次元の三角形分割が剛ではありません"


def test_triangulation_rejects_collinear_anchors(rng):
    """共線なアンカーで三角形分割がエラーになることを確認"""
    anchors = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(TriangulationError):
        build_triangulation(2, anchors, 2, [[0.0, 0.0], [2.0, 2.0]], rng)


def test_graph_dict_round_trip(square_network):
    """辞書形式への変換と復元で同じグラフと配置が得られることを確認"""
    graph, positions = square_network
    restored, restored_positions = graph_from_dict(graph_to_dict(graph, positions))
    assert restored == graph, "グラフが復元されません"
    assert np.array_equal(restored_positions, positions), "配置が復元されません"
