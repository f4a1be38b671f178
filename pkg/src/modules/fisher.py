"""
フィッシャー情報行列（FIM）

2 種類の測距ノイズモデル（加法ガウス / 乗法対数正規）に対する FIM の組み立て、
タグ・アンカーへの分割、ブロック微分、制約なし CRLB を扱います。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Union

import numpy as np

from src.modules.geometry_graph import RangingGraph, as_configuration, rigidity_matrix
from src.utils.exceptions import SingularGeometryError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

PINV_TOL = 1e-10
_MIN_DISTANCE = 1e-12
_COORDINATES = {"x": 0, "y": 1, "z": 2}


class NoiseKind(str, Enum):
    ADDITIVE = "additive"
    LOG_NORMAL = "lognormal"


@dataclass(frozen=True)
class NoiseModel:
    """
    測距ノイズモデル

    sigma は加法モデルでは標準偏差 [m]、対数正規モデルでは無次元の分散パラメータです。
    kappa は加法で 1、対数正規で 2。
    """

    kind: NoiseKind = NoiseKind.ADDITIVE
    sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not np.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ValueError(f"sigma は正の値である必要があります: {self.sigma}")

    @property
    def kappa(self) -> int:
        return 1 if self.kind is NoiseKind.ADDITIVE else 2

    def edge_weights(self, distances: Any) -> np.ndarray:
        """各エッジの重み 1/(d^{2κ} σ²)"""
        d = np.asarray(distances, dtype=float)
        return 1.0 / (d ** (2 * self.kappa) * self.sigma ** 2)


@dataclass(frozen=True)
class FisherMatrix:
    """(dim·N) 正方の FIM と、タグ先頭の分割 F_U / F_UK / F_K"""

    full: np.ndarray
    tag_count: int
    dim: int

    @property
    def split(self) -> int:
        return self.tag_count * self.dim

    @property
    def tag_block(self) -> np.ndarray:
        return self.full[: self.split, : self.split]

    @property
    def cross_block(self) -> np.ndarray:
        return self.full[: self.split, self.split:]

    @property
    def anchor_block(self) -> np.ndarray:
        return self.full[self.split:, self.split:]


@dataclass(frozen=True)
class CramerRaoBound:
    matrix: np.ndarray
    pseudo_inverse: bool

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def coordinate_index(coord: Union[int, str], dim: int) -> int:
    """'x' / 'y' / 'z' または整数を座標インデックスへ変換します。"""
    index = _COORDINATES[coord] if isinstance(coord, str) else int(coord)
    if not 0 <= index < dim:
        raise ValueError(f"座標 {coord} は次元 {dim} で無効です")
    return index


def _edge_geometry(graph: RangingGraph, config: np.ndarray):
    heads, tails = graph.edge_arrays()
    diffs = config[heads] - config[tails]
    distances = np.linalg.norm(diffs, axis=1)
    if distances.size and float(np.min(distances)) < _MIN_DISTANCE:
        index = int(np.argmin(distances))
        edge = graph.edges[index]
        raise SingularGeometryError(f"エッジ {edge} の両端が一致しています", edge=edge)
    return diffs, distances


def fim(graph: RangingGraph, positions: Any, noise: NoiseModel) -> FisherMatrix:
    """
    FIM をブロックごとに組み立てます。

    F_ij = −p_ij p_ijᵀ/(d_ij^{2κ}σ²)（エッジのとき）、F_ii = −Σ_j F_ij。

    Raises:
        SingularGeometryError: 距離 0 のエッジがある場合
    """
    config = as_configuration(graph, positions)
    dim = graph.dim
    diffs, distances = _edge_geometry(graph, config)
    weights = noise.edge_weights(distances)

    full = np.zeros((dim * graph.node_count, dim * graph.node_count))
    for (i, j), diff, weight in zip(graph.edges, diffs, weights):
        block = -weight * np.outer(diff, diff)
        si = slice(dim * i, dim * (i + 1))
        sj = slice(dim * j, dim * (j + 1))
        full[si, sj] += block
        full[sj, si] += block
        full[si, si] -= block
        full[sj, sj] -= block
    return FisherMatrix(full=full, tag_count=graph.tag_count, dim=dim)


def tag_fim(graph: RangingGraph, positions: Any, noise: NoiseModel) -> np.ndarray:
    """F_U のみを返す簡易関数"""
    return fim(graph, positions, noise).tag_block


def fim_from_rigidity(graph: RangingGraph, positions: Any, noise: NoiseModel) -> np.ndarray:
    """RᵀQR（Q = diag(1/(d^{2κ}σ²))）による FIM。fim の照合用。"""
    config = as_configuration(graph, positions)
    _, distances = _edge_geometry(graph, config)
    rigidity = rigidity_matrix(graph, config)
    weights = noise.edge_weights(distances)
    return rigidity.T @ (weights[:, None] * rigidity)


def fim_block_derivative(p_i: Any, p_j: Any, coord: Union[int, str], noise: NoiseModel, dim: Optional[int] = None) -> np.ndarray:
    """
    ∂F_ij/∂ξ_i（ξ はノード i の座標）を返します。

    γ = κ/(σ² d^{2(κ+1)}) として γ·[2ξ_ij p_ij p_ijᵀ − (d²/κ)(e_ξ p_ijᵀ + p_ij e_ξᵀ)]。
    ノード j の座標での微分はこの符号反転です。

    Raises:
        SingularGeometryError: d_ij = 0 の場合
    """
    diff = np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)
    dim = dim or diff.size
    index = coordinate_index(coord, dim)
    squared = float(diff @ diff)
    if squared < _MIN_DISTANCE ** 2:
        raise SingularGeometryError("距離 0 のエッジは微分できません")

    kappa = noise.kappa
    gamma = kappa / (noise.sigma ** 2 * squared ** (kappa + 1))
    unit = np.zeros(dim)
    unit[index] = 1.0
    cross = np.outer(unit, diff) + np.outer(diff, unit)
    return gamma * (2.0 * diff[index] * np.outer(diff, diff) - (squared / kappa) * cross)


def edge_derivatives(p_i: Any, p_j: Any, noise: NoiseModel) -> np.ndarray:
    """全座標についての ∂F_ij/∂ξ_i を (dim, dim, dim) に積み重ねて返します。"""
    dim = np.asarray(p_i).size
    return np.stack([fim_block_derivative(p_i, p_j, k, noise, dim) for k in range(dim)])


def fim_partial(graph: RangingGraph, positions: Any, noise: NoiseModel, node: int, coord: Union[int, str]) -> np.ndarray:
    """
    ∂F_U/∂ξ_node を (dim·U) 正方行列として組み立てます。

    ノード自身と隣接タグの対角ブロック、および両端がタグのエッジの非対角ブロックのみ非零です。
    アンカーの場合は隣接タグの対角ブロックだけが変化します。
    """
    config = as_configuration(graph, positions)
    dim = graph.dim
    tag_count = graph.tag_count
    index = coordinate_index(coord, dim)
    partial = np.zeros((dim * tag_count, dim * tag_count))

    own = slice(dim * node, dim * (node + 1))
    node_is_tag = graph.is_tag(node)
    for j in sorted(graph.neighbors(node)):
        other_is_tag = graph.is_tag(j)
        if not (node_is_tag or other_is_tag):
            continue
        block = fim_block_derivative(config[node], config[j], index, noise, dim)
        other = slice(dim * j, dim * (j + 1))
        if node_is_tag:
            partial[own, own] -= block
        if other_is_tag:
            partial[other, other] -= block
        if node_is_tag and other_is_tag:
            partial[own, other] += block
            partial[other, own] += block
    return partial


def crlb_unconstrained(tag_block: Any, tol: float = PINV_TOL) -> CramerRaoBound:
    """
    制約なし CRLB（F_U の逆行列、特異なら擬似逆行列）を返します。

    λ_min > tol·λ_max のとき逆行列、それ以外は特異値カットオフ tol·σ_max の擬似逆行列を使い、
    どちらを使ったかを pseudo_inverse に記録します。
    """
    matrix = np.asarray(tag_block, dtype=float)
    matrix = 0.5 * (matrix + matrix.T)
    eigenvalues = np.linalg.eigvalsh(matrix)
    largest = float(eigenvalues[-1]) if eigenvalues.size else 0.0
    if largest > 0.0 and float(eigenvalues[0]) > tol * largest:
        return CramerRaoBound(matrix=np.linalg.inv(matrix), pseudo_inverse=False)

    logger.warning("F_U が特異のため擬似逆行列を使用します (λ_min=%.3e)", eigenvalues[0] if eigenvalues.size else 0.0)
    return CramerRaoBound(matrix=np.linalg.pinv(matrix, rcond=tol, hermitian=True), pseudo_inverse=True)
