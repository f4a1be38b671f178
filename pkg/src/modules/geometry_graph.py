"""
測距グラフと剛性

タグを先に、アンカーを後に番号付けした測距グラフの構築、接続行列・剛性行列、
ユークリッド運動の基底、無限小剛性の判定、三角形分割グラフによる初期配置を提供します。
配置（Configuration）は形状 (N, dim) の numpy 配列で表し、行の順序はノード番号と一致します。
"""

from dataclasses import dataclass, field
from itertools import combinations
from math import factorial
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.exceptions import DegenerateConfigurationError, GraphDefinitionError, TriangulationError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

Edge = Tuple[int, int]

# 一般位置とみなす三角形の面積 / 四面体の体積の下限
GENERAL_POSITION_MEASURE = {2: 1e-6, 3: 1e-9}
MAX_PLACEMENT_ATTEMPTS = 1000
RIGIDITY_TOL = 1e-9


@dataclass(frozen=True)
class RangingGraph:
    """
    測距グラフ

    ノード 0..U-1 がタグ、U..N-1 がアンカー。アンカー同士のエッジは暗黙に全て含まれ、
    エッジはタグ-タグ、タグ-アンカー、アンカー-アンカーの順に (min, max) の辞書式で並びます。
    """

    dim: int
    tag_count: int
    anchor_count: int
    edges: Tuple[Edge, ...]
    neighborhoods: Dict[int, FrozenSet[int]] = field(compare=False, repr=False)

    @property
    def node_count(self) -> int:
        return self.tag_count + self.anchor_count

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def ranging_edges(self) -> Tuple[Edge, ...]:
        """実際に測距されるエッジ（少なくとも一端がタグ）"""
        return tuple(e for e in self.edges if e[0] < self.tag_count)

    @property
    def tags(self) -> range:
        return range(self.tag_count)

    @property
    def anchors(self) -> range:
        return range(self.tag_count, self.node_count)

    def is_tag(self, node: int) -> bool:
        return 0 <= node < self.tag_count

    def is_anchor(self, node: int) -> bool:
        return self.tag_count <= node < self.node_count

    def neighbors(self, node: int) -> FrozenSet[int]:
        return self.neighborhoods[node]

    def degree(self, node: int) -> int:
        return len(self.neighborhoods[node])

    def tag_neighbors(self, node: int) -> Tuple[int, ...]:
        return tuple(sorted(j for j in self.neighborhoods[node] if j < self.tag_count))

    def anchor_neighbors(self, node: int) -> Tuple[int, ...]:
        return tuple(sorted(j for j in self.neighborhoods[node] if j >= self.tag_count))

    def edge_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """エッジ両端のインデックス配列 (i, j) を返します（i < j）。"""
        if not self.edges:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        ends = np.asarray(self.edges, dtype=int)
        return ends[:, 0], ends[:, 1]


def _edge_category(edge: Edge, tag_count: int) -> int:
    i, j = edge
    if j < tag_count:
        return 0
    if i < tag_count:
        return 1
    return 2


def build_graph(dim: int, tag_count: int, anchor_count: int, ranging_pairs: Iterable[Sequence[int]]) -> RangingGraph:
    """
    測距グラフを構築します。

    Args:
        dim (int): 空間次元（2 または 3）
        tag_count (int): タグ数 U（1 以上）
        anchor_count (int): アンカー数 K（2 以上）
        ranging_pairs (Iterable[Sequence[int]]): 測距ペア（少なくとも一方がタグ）

    Returns:
        RangingGraph: アンカー同士のエッジを補った測距グラフ

    Raises:
        GraphDefinitionError: 自己ループ、重複、アンカーのみのペア、範囲外の番号など
    """
    if dim not in (2, 3):
        raise GraphDefinitionError(f"dim は 2 または 3 です: {dim}")
    if tag_count < 1:
        raise GraphDefinitionError("タグは 1 台以上必要です")
    if anchor_count < 2:
        raise GraphDefinitionError("アンカーは 2 台以上必要です (1 < K < N)")

    node_count = tag_count + anchor_count
    measured = set()
    for pair in ranging_pairs:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise GraphDefinitionError(f"自己ループは指定できません: ({i}, {j})")
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise GraphDefinitionError(f"ノード番号が範囲外です: ({i}, {j})")
        if i >= tag_count and j >= tag_count:
            raise GraphDefinitionError(f"アンカー同士のペアは暗黙に含まれるため指定できません: ({i}, {j})")
        key = (min(i, j), max(i, j))
        if key in measured:
            raise GraphDefinitionError(f"重複したペアです: {key}")
        measured.add(key)

    anchor_pairs = set(combinations(range(tag_count, node_count), 2))
    edges = sorted(measured | anchor_pairs, key=lambda e: (_edge_category(e, tag_count), e))

    neighborhoods: Dict[int, set] = {k: set() for k in range(node_count)}
    for i, j in edges:
        neighborhoods[i].add(j)
        neighborhoods[j].add(i)

    return RangingGraph(
        dim=dim,
        tag_count=tag_count,
        anchor_count=anchor_count,
        edges=tuple(edges),
        neighborhoods={k: frozenset(v) for k, v in neighborhoods.items()},
    )


def as_configuration(graph: RangingGraph, positions: Any) -> np.ndarray:
    """
    位置列をグラフに整合した (N, dim) の float 配列に変換します。

    Raises:
        ValueError: 形状が一致しない、または有限でない座標を含む場合
    """
    config = np.asarray(positions, dtype=float)
    if config.shape != (graph.node_count, graph.dim):
        raise ValueError(f"配置の形状 {config.shape} がグラフ ({graph.node_count}, {graph.dim}) と一致しません")
    if not np.all(np.isfinite(config)):
        raise ValueError("配置に有限でない座標が含まれています")
    return config


def incidence_matrix(graph: RangingGraph) -> np.ndarray:
    """エッジ i→j (i<j) の行に i で +1、j で −1 を持つ E × N 行列"""
    matrix = np.zeros((graph.edge_count, graph.node_count))
    heads, tails = graph.edge_arrays()
    rows = np.arange(graph.edge_count)
    matrix[rows, heads] = 1.0
    matrix[rows, tails] = -1.0
    return matrix


def rigidity_function(graph: RangingGraph, positions: Any) -> np.ndarray:
    """各エッジについて ½‖p_i − p_j‖² を並べたベクトル"""
    config = as_configuration(graph, positions)
    heads, tails = graph.edge_arrays()
    diffs = config[heads] - config[tails]
    return 0.5 * np.sum(diffs ** 2, axis=1)


def rigidity_matrix(graph: RangingGraph, positions: Any) -> np.ndarray:
    """
    剛性行列 R（rigidity_function のヤコビアン）を返します。

    行 i→j はブロック i に p_ijᵀ、ブロック j に −p_ijᵀ を持ちます。
    """
    config = as_configuration(graph, positions)
    dim = graph.dim
    heads, tails = graph.edge_arrays()
    diffs = config[heads] - config[tails]

    matrix = np.zeros((graph.edge_count, dim * graph.node_count))
    rows = np.arange(graph.edge_count)
    for k in range(dim):
        matrix[rows, heads * dim + k] = diffs[:, k]
        matrix[rows, tails * dim + k] = -diffs[:, k]
    return matrix


def euclidean_motion_basis(positions: Any) -> np.ndarray:
    """
    ユークリッド運動（並進・回転）の明示的な基底を列に持つ行列を返します。

    2次元: (v_Tx, v_Ty, v_Rz)、3次元: (v_Tx, v_Ty, v_Tz, v_Rx, v_Ry, v_Rz)。
    回転列はノードごとに e_ξ × p_i（2次元では [−y_i, x_i]）。

    Args:
        positions: 形状 (N, dim) の配置

    Returns:
        np.ndarray: (dim·N) × m の基底行列（m = 3 または 6）

    Raises:
        DegenerateConfigurationError: 2次元で全点一致、3次元で全点共線の場合
    """
    config = np.asarray(positions, dtype=float)
    if config.ndim != 2 or config.shape[1] not in (2, 3):
        raise ValueError(f"配置の形状が不正です: {config.shape}")
    count, dim = config.shape
    scale = max(1.0, float(np.max(np.abs(config)))) if count else 1.0

    if dim == 2:
        spread = float(np.max(np.linalg.norm(config - config[0], axis=1))) if count else 0.0
        if count < 2 or spread <= 1e-12 * scale:
            raise DegenerateConfigurationError("2次元の基底には異なる位置のノードが 2 つ以上必要です")
        columns = [
            np.tile([1.0, 0.0], count),
            np.tile([0.0, 1.0], count),
            np.column_stack([-config[:, 1], config[:, 0]]).reshape(-1),
        ]
        return np.column_stack(columns)

    centered = config - config.mean(axis=0)
    singular_values = np.linalg.svd(centered, compute_uv=False) if count else np.zeros(0)
    if count < 3 or singular_values[1] <= 1e-10 * max(singular_values[0], 1e-300):
        raise DegenerateConfigurationError("3次元の基底には同一直線上にないノードが 3 つ以上必要です")

    identity = np.eye(3)
    translations = [np.tile(identity[k], count) for k in range(3)]
    rotations = [np.cross(identity[k], config).reshape(-1) for k in range(3)]
    return np.column_stack(translations + rotations)


def is_infinitesimally_rigid(graph: RangingGraph, positions: Any, tol: float = RIGIDITY_TOL) -> bool:
    """
    フレームワークが無限小剛かを判定します。

    rank R = dim·N − m（m = 3 または 6）のとき True。ランクは σ > tol·σ_max の特異値の個数。
    """
    config = as_configuration(graph, positions)
    motions = euclidean_motion_basis(config).shape[1]
    singular_values = np.linalg.svd(rigidity_matrix(graph, config), compute_uv=False)
    if singular_values.size == 0 or singular_values[0] <= 0.0:
        rank = 0
    else:
        rank = int(np.sum(singular_values > tol * singular_values[0]))
    return rank == graph.dim * graph.node_count - motions


def simplex_measure(points: Any) -> float:
    """dim+1 点が張る単体の面積（2次元）または体積（3次元）"""
    pts = np.asarray(points, dtype=float)
    dim = pts.shape[1]
    edges = pts[1:] - pts[0]
    return abs(float(np.linalg.det(edges))) / factorial(dim)


def _has_general_position_subset(points: np.ndarray, dim: int) -> bool:
    threshold = GENERAL_POSITION_MEASURE[dim]
    return any(
        simplex_measure(points[list(subset)]) > threshold
        for subset in combinations(range(len(points)), dim + 1)
    )


def _select_links(candidate: np.ndarray, placed: np.ndarray, dim: int, min_separation: float) -> Optional[List[int]]:
    distances = np.linalg.norm(placed - candidate, axis=1)
    if float(np.min(distances)) <= min_separation:
        return None

    threshold = GENERAL_POSITION_MEASURE[dim]
    nearest = np.argsort(distances, kind="stable")[: dim + 4]
    for subset in combinations(nearest.tolist(), dim + 1):
        linked = placed[list(subset)]
        if simplex_measure(linked) <= threshold:
            continue
        spread = np.linalg.svd(linked - candidate, compute_uv=False)
        if spread[dim - 1] <= 1e-6 * spread[0]:
            continue
        return [int(i) for i in subset]
    return None


def build_triangulation(
    dim: int,
    anchor_positions: Any,
    tag_count: int,
    region: Any,
    rng: np.random.Generator,
    max_attempts: int = MAX_PLACEMENT_ATTEMPTS,
) -> Tuple[RangingGraph, np.ndarray]:
    """
    三角形分割グラフを構築し、初期配置を返します。

    タグを 1 台ずつ領域内に一様サンプリングし、既に配置済みのノードのうち近い順に
    一般位置にある dim+1 台へ接続します。

    Args:
        dim (int): 空間次元
        anchor_positions: 形状 (K, dim) のアンカー位置
        tag_count (int): 追加するタグ数
        region: [[下限...], [上限...]] の軸平行領域
        rng (np.random.Generator): 乱数生成器
        max_attempts (int): タグ 1 台あたりの棄却サンプリング上限

    Returns:
        Tuple[RangingGraph, np.ndarray]: グラフと (U+K, dim) の配置

    Raises:
        TriangulationError: アンカーが一般位置にない、または配置に失敗した場合
    """
    anchors = np.asarray(anchor_positions, dtype=float)
    if anchors.ndim != 2 or anchors.shape[1] != dim:
        raise TriangulationError(f"アンカー位置の形状が不正です: {anchors.shape}")
    if len(anchors) < dim + 1 or not _has_general_position_subset(anchors, dim):
        raise TriangulationError("アンカーが一般位置にありません")

    bounds = np.asarray(region, dtype=float)
    if bounds.shape != (2, dim) or np.any(bounds[1] <= bounds[0]):
        raise TriangulationError(f"領域の指定が不正です: {bounds.tolist()}")
    min_separation = 1e-3 * float(np.linalg.norm(bounds[1] - bounds[0]))

    anchor_count = len(anchors)
    placed = [row for row in anchors]
    placed_ids = [tag_count + a for a in range(anchor_count)]
    tags: List[np.ndarray] = []
    pairs: List[Edge] = []

    for tag in range(tag_count):
        links = None
        for _ in range(max_attempts):
            candidate = rng.uniform(bounds[0], bounds[1])
            links = _select_links(candidate, np.asarray(placed), dim, min_separation)
            if links is not None:
                break
        if links is None:
            raise TriangulationError(f"タグ {tag} を一般位置に配置できませんでした", attempts=max_attempts)

        pairs.extend((tag, placed_ids[index]) for index in links)
        placed.append(candidate)
        placed_ids.append(tag)
        tags.append(candidate)

    graph = build_graph(dim, tag_count, anchor_count, pairs)
    positions = np.vstack([np.asarray(tags).reshape(tag_count, dim), anchors])
    logger.debug("三角形分割グラフを構築しました (U=%d, K=%d, E=%d)", tag_count, anchor_count, graph.edge_count)
    return graph, positions


def graph_to_dict(graph: RangingGraph, positions: Optional[Any] = None) -> Dict[str, Any]:
    """グラフ（と配置）をシナリオ設定形式の辞書に変換します。"""
    data: Dict[str, Any] = {
        "dim": graph.dim,
        "tag_count": graph.tag_count,
        "anchor_count": graph.anchor_count,
        "ranging_pairs": [list(edge) for edge in graph.ranging_edges],
    }
    if positions is not None:
        data["positions"] = as_configuration(graph, positions).tolist()
    return data


def graph_from_dict(data: Dict[str, Any]) -> Tuple[RangingGraph, Optional[np.ndarray]]:
    """graph_to_dict の逆変換"""
    graph = build_graph(int(data["dim"]), int(data["tag_count"]), int(data["anchor_count"]), data["ranging_pairs"])
    positions = data.get("positions")
    return graph, (None if positions is None else as_configuration(graph, positions))
