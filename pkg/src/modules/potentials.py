"""
ローカライザビリティポテンシャル

F_U に基づく A / D / E 最適ポテンシャルとその解析勾配、T ポテンシャル（診断用）、
およびステップ幅を制限した勾配降下を提供します。
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from src.modules.fisher import PINV_TOL, NoiseModel, fim_partial, tag_fim
from src.modules.geometry_graph import RangingGraph, as_configuration
from src.utils.exceptions import EigenvalueMultiplicityError, SingularFisherError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

EIGEN_GAP_TOL = 1e-8


class PotentialKind(str, Enum):
    A_OPT = "A"
    D_OPT = "D"
    E_OPT = "E"


@dataclass
class GradientField:
    """
    可動ノードごとの勾配ベクトルとポテンシャル値

    分散計算で値を求めない場合 value は None です。
    """

    gradients: Dict[int, np.ndarray] = field(default_factory=dict)
    value: Optional[float] = None

    def __getitem__(self, node: int) -> np.ndarray:
        return self.gradients[node]

    @property
    def nodes(self) -> Tuple[int, ...]:
        return tuple(sorted(self.gradients))

    def norm(self) -> float:
        if not self.gradients:
            return 0.0
        return float(np.sqrt(sum(float(g @ g) for g in self.gradients.values())))

    def scaled(self, factor: float) -> "GradientField":
        value = None if self.value is None else factor * self.value
        return GradientField({k: factor * g for k, g in self.gradients.items()}, value)

    def combine(self, other: "GradientField", weight: float = 1.0) -> "GradientField":
        """self + weight·other（値は両方が既知のときのみ合算）"""
        merged = {k: g.copy() for k, g in self.gradients.items()}
        for node, gradient in other.gradients.items():
            if node in merged:
                merged[node] = merged[node] + weight * gradient
            else:
                merged[node] = weight * gradient
        value = None
        if self.value is not None and other.value is not None:
            value = self.value + weight * other.value
        return GradientField(merged, value)

    def as_array(self, node_count: int, dim: int) -> np.ndarray:
        """(N, dim) 配列に展開します（可動でないノードは 0）。"""
        array = np.zeros((node_count, dim))
        for node, gradient in self.gradients.items():
            array[node] = gradient
        return array


def _symmetric(matrix: Any) -> np.ndarray:
    array = np.asarray(matrix, dtype=float)
    return 0.5 * (array + array.T)


def _require_positive_definite(eigenvalues: np.ndarray, tol: float) -> None:
    largest = float(eigenvalues[-1]) if eigenvalues.size else 0.0
    smallest = float(eigenvalues[0]) if eigenvalues.size else 0.0
    if largest <= 0.0 or smallest <= tol * largest:
        raise SingularFisherError(f"F_U が正定値ではありません (λ_min={smallest:.3e})", lambda_min=smallest)


def potential_value(kind: Union[PotentialKind, str], tag_block: Any, tol: float = PINV_TOL) -> float:
    """
    ポテンシャル値を返します。

    A: trace F_U⁻¹、D: −ln det F_U、E: −λ_min(F_U)。

    Raises:
        SingularFisherError: A / D で F_U が特異な場合
    """
    kind = PotentialKind(kind)
    eigenvalues = np.linalg.eigvalsh(_symmetric(tag_block))
    if kind is PotentialKind.E_OPT:
        return -float(eigenvalues[0])
    _require_positive_definite(eigenvalues, tol)
    if kind is PotentialKind.A_OPT:
        return float(np.sum(1.0 / eigenvalues))
    return -float(np.sum(np.log(eigenvalues)))


def min_eigenpair(tag_block: Any, gap_tol: float = EIGEN_GAP_TOL) -> Tuple[float, np.ndarray]:
    """
    F_U の最小固有値と単位固有ベクトルを返します。

    固有ベクトルの符号は絶対値最大の成分が正になるよう固定します。

    Raises:
        EigenvalueMultiplicityError: 最小固有値が重複（相対ギャップ ≤ gap_tol）している場合
    """
    eigenvalues, eigenvectors = np.linalg.eigh(_symmetric(tag_block))
    if eigenvalues.size > 1:
        gap = float(eigenvalues[1] - eigenvalues[0])
        scale = max(abs(float(eigenvalues[-1])), np.finfo(float).tiny)
        if gap <= gap_tol * scale:
            raise EigenvalueMultiplicityError(f"λ_min が重複しています (gap={gap:.3e})", gap=gap)
    vector = eigenvectors[:, 0]
    if vector[int(np.argmax(np.abs(vector)))] < 0.0:
        vector = -vector
    return float(eigenvalues[0]), vector


def _mobile_nodes(graph: RangingGraph, mobile: Optional[Iterable[int]]) -> Tuple[int, ...]:
    if mobile is None:
        return tuple(range(graph.node_count))
    nodes = tuple(sorted(set(int(n) for n in mobile)))
    for node in nodes:
        if not 0 <= node < graph.node_count:
            raise ValueError(f"可動ノード {node} はグラフに存在しません")
    return nodes


def _quadratic_contraction(vector: np.ndarray) -> Callable[[np.ndarray], float]:
    return lambda partial: -float(vector @ partial @ vector)


def _trace_contraction(weight: np.ndarray) -> Callable[[np.ndarray], float]:
    return lambda partial: -float(np.sum(weight * partial))


def potential_gradient(
    kind: Union[PotentialKind, str],
    graph: RangingGraph,
    positions: Any,
    noise: NoiseModel,
    mobile: Optional[Iterable[int]] = None,
    tol: float = PINV_TOL,
    gap_tol: float = EIGEN_GAP_TOL,
) -> GradientField:
    """
    可動ノードごとの解析勾配を計算します。

    A: −trace(F_U⁻² ∂F_U/∂ξ)、D: −trace(F_U⁻¹ ∂F_U/∂ξ)、E: −vᵀ(∂F_U/∂ξ)v。

    Args:
        kind: ポテンシャルの種類
        graph (RangingGraph): 測距グラフ
        positions: 配置
        noise (NoiseModel): ノイズモデル
        mobile: 可動ノード（省略時は全ノード）

    Returns:
        GradientField: 勾配とポテンシャル値

    Raises:
        SingularFisherError: F_U が特異な場合
        EigenvalueMultiplicityError: E で最小固有値が重複している場合
    """
    kind = PotentialKind(kind)
    config = as_configuration(graph, positions)
    tag_block = _symmetric(tag_fim(graph, config, noise))

    contraction: Callable[[np.ndarray], float]
    if kind is PotentialKind.E_OPT:
        smallest, vector = min_eigenpair(tag_block, gap_tol)
        value = -smallest
        contraction = _quadratic_contraction(vector)
    else:
        eigenvalues, eigenvectors = np.linalg.eigh(tag_block)
        _require_positive_definite(eigenvalues, tol)
        power = 2 if kind is PotentialKind.A_OPT else 1
        weight = (eigenvectors / eigenvalues ** power) @ eigenvectors.T
        if kind is PotentialKind.A_OPT:
            value = float(np.sum(1.0 / eigenvalues))
        else:
            value = -float(np.sum(np.log(eigenvalues)))
        contraction = _trace_contraction(weight)

    gradients = {}
    for node in _mobile_nodes(graph, mobile):
        gradients[node] = np.array(
            [contraction(fim_partial(graph, config, noise, node, k)) for k in range(graph.dim)]
        )
    return GradientField(gradients, value)


def t_potential(graph: RangingGraph, positions: Any, noise: NoiseModel) -> float:
    """−trace(F_U)。加法モデルでは配置に依存しない定数（診断専用）。"""
    return -float(np.trace(tag_fim(graph, positions, noise)))


def descent_step(positions: Any, gradient_field: GradientField, gain: float, step_cap: float) -> np.ndarray:
    """
    ステップ幅を制限した勾配降下を 1 回行います。

    可動ノード i ごとに p_i ← p_i − g_i·min(gain, step_cap/‖g_i‖)。勾配 0 のノードは動きません。
    """
    if gain <= 0.0 or step_cap <= 0.0:
        raise ValueError(f"gain と step_cap は正の値である必要があります: gain={gain}, step_cap={step_cap}")

    updated = np.array(positions, dtype=float, copy=True)
    for node, gradient in gradient_field.gradients.items():
        magnitude = float(np.linalg.norm(gradient))
        if magnitude == 0.0:
            continue
        updated[node] = updated[node] - gradient * min(gain, step_cap / magnitude)
    return updated


def localizability_report(graph: RangingGraph, positions: Any, noise: NoiseModel, tol: float = PINV_TOL) -> Dict[str, float]:
    """
    配置の局在性指標をまとめて返します。

    J_A, J_D, J_E, J_T, λ_min, λ_max と GDOP = sqrt(trace F_U⁻¹)/σ。
    F_U が特異な場合、J_A / J_D / GDOP は inf です。
    """
    tag_block = _symmetric(tag_fim(graph, positions, noise))
    eigenvalues = np.linalg.eigvalsh(tag_block)
    report = {
        "J_E": -float(eigenvalues[0]),
        "J_T": -float(np.trace(tag_block)),
        "lambda_min": float(eigenvalues[0]),
        "lambda_max": float(eigenvalues[-1]),
    }
    try:
        _require_positive_definite(eigenvalues, tol)
    except SingularFisherError:
        report.update({"J_A": float("inf"), "J_D": float("inf"), "GDOP": float("inf")})
        return report

    trace_inverse = float(np.sum(1.0 / eigenvalues))
    report.update({
        "J_A": trace_inverse,
        "J_D": -float(np.sum(np.log(eigenvalues))),
        "GDOP": float(np.sqrt(trace_inverse)) / noise.sigma,
    })
    return report
