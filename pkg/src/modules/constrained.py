"""
剛体制約付きの局在性

複数タグを搭載したロボットの剛体制約（距離制約 / 相対位置制約）に対する制約付き CRLB、
そのトレースをポテンシャルとした解析勾配、主双対法による降下、剛体姿勢への射影を提供します。

タグ座標は (dim·U) のベクトル（タグ番号順）、相対位置制約ではさらに各ロボットの姿勢パラメータ θ
（2次元で 1 個、3次元で 3 個）を後ろに並べた拡張パラメータ (p_U, θ) を使います。
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from src.modules.fisher import PINV_TOL, NoiseModel, fim_partial, tag_fim
from src.modules.geometry_graph import RangingGraph, as_configuration, euclidean_motion_basis
from src.modules.potentials import GradientField
from src.utils.exceptions import DegenerateConfigurationError, LocalizabilityError, SingularFisherError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

ARMIJO_INITIAL_STEP = 1.0
ARMIJO_CONTRACTION = 0.5
ARMIJO_SUFFICIENT_DECREASE = 1e-4
ARMIJO_MAX_BACKTRACKS = 30
DEFAULT_DUAL_STEP = 0.5
PENALTY_RATIO = 2.0

_PLANAR_GENERATOR = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class RigidGroup:
    """
    1 台のロボットに搭載されたタグの組

    tags の先頭が基準タグです。body_offsets はロボット座標系でのタグ位置。
    """

    robot: int
    tags: Tuple[int, ...]
    body_offsets: Mapping[int, Any] = field(compare=False)
    theta: Optional[Any] = None

    def __post_init__(self):
        tags = tuple(int(t) for t in self.tags)
        object.__setattr__(self, "tags", tags)
        if len(tags) < 2:
            raise ValueError(f"ロボット {self.robot}: 剛体グループには 2 つ以上のタグが必要です")
        if len(set(tags)) != len(tags):
            raise ValueError(f"ロボット {self.robot}: タグが重複しています {tags}")
        missing = [t for t in tags if t not in self.body_offsets]
        if missing:
            raise ValueError(f"ロボット {self.robot}: タグ {missing} の搭載位置がありません")
        offsets = {t: np.asarray(self.body_offsets[t], dtype=float) for t in tags}
        object.__setattr__(self, "body_offsets", offsets)

    @property
    def reference(self) -> int:
        return self.tags[0]

    @property
    def dim(self) -> int:
        return int(self.body_offsets[self.reference].size)

    def relative_offset(self, tag: int) -> np.ndarray:
        """基準タグから見た搭載位置 p^r_{j1}"""
        return self.body_offsets[tag] - self.body_offsets[self.reference]

    def target_distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.body_offsets[a] - self.body_offsets[b]))


def _validate_groups(groups: Sequence[RigidGroup], tag_count: int) -> None:
    seen: Dict[int, int] = {}
    for group in groups:
        for tag in group.tags:
            if not 0 <= tag < tag_count:
                raise ValueError(f"ロボット {group.robot}: タグ {tag} は存在しません (U={tag_count})")
            if tag in seen:
                raise ValueError(f"タグ {tag} がロボット {seen[tag]} と {group.robot} の両方に属しています")
            seen[tag] = group.robot


def _ungrouped_tags(groups: Sequence[RigidGroup], tag_count: int) -> List[int]:
    grouped = {t for g in groups for t in g.tags}
    return [t for t in range(tag_count) if t not in grouped]


def _tag_rows(config: Any, tag_count: int) -> np.ndarray:
    array = np.asarray(config, dtype=float)
    if array.ndim != 2 or array.shape[0] < tag_count:
        raise ValueError(f"配置の形状 {array.shape} にタグ {tag_count} 個分の行がありません")
    return array[:tag_count]


def rotation_exp(theta: Any, dim: int) -> np.ndarray:
    """
    指数座標 θ から回転行列を返します。

    2次元は閉形式、3次元は scipy の回転ベクトル変換（Rodrigues の公式）を使います。
    """
    if dim == 2:
        angle = float(np.asarray(theta, dtype=float).reshape(-1)[0])
        c, s = np.cos(angle), np.sin(angle)
        return np.array([[c, -s], [s, c]])
    if dim == 3:
        return Rotation.from_rotvec(np.asarray(theta, dtype=float).reshape(3)).as_matrix()
    raise ValueError(f"次元は 2 または 3 です: {dim}")


def rotation_log(rotation: np.ndarray) -> Union[float, np.ndarray]:
    """rotation_exp の逆（2次元は角度、3次元は回転ベクトル）"""
    if rotation.shape == (2, 2):
        return float(np.arctan2(rotation[1, 0], rotation[0, 0]))
    return Rotation.from_matrix(rotation).as_rotvec()


def _generators(dim: int) -> List[np.ndarray]:
    """θ の各成分に対応する無限小回転 W_k"""
    if dim == 2:
        return [_PLANAR_GENERATOR]
    identity = np.eye(3)
    return [np.cross(identity[k], identity) * -1.0 for k in range(3)]


def orientation_size(dim: int) -> int:
    return 1 if dim == 2 else 3


def rigid_tag_positions(group: RigidGroup, position: Any, theta: Any) -> Dict[int, np.ndarray]:
    """基準タグ位置と姿勢から各タグの位置 p_1 + exp([θ]×)p^r_{j1} を返します。"""
    rotation = rotation_exp(theta, group.dim)
    origin = np.asarray(position, dtype=float)
    return {t: origin + rotation @ group.relative_offset(t) for t in group.tags}


# ---------------------------------------------------------------------------
# 距離制約
# ---------------------------------------------------------------------------

def _group_pairs(groups: Sequence[RigidGroup]) -> List[Tuple[RigidGroup, int, int]]:
    return [(g, a, b) for g in groups for a, b in combinations(g.tags, 2)]


def distance_constraints(groups: Sequence[RigidGroup], config: Any, tag_count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    グループ内の全タグ対について ‖p_ab‖² − d_ab² とそのヤコビアンを返します。

    行はグループ順、グループ内は (a, b) の組み合わせ順です。ヤコビアンの列は (dim·U) のタグ座標。

    Args:
        groups: 剛体グループ
        config: タグを先頭に持つ配置（(U, dim) または (N, dim)）
        tag_count: U（省略時は config の行数）
    """
    tag_count = tag_count if tag_count is not None else len(config)
    positions = _tag_rows(config, tag_count)
    _validate_groups(groups, tag_count)
    dim = positions.shape[1]

    pairs = _group_pairs(groups)
    residual = np.zeros(len(pairs))
    jacobian = np.zeros((len(pairs), dim * tag_count))
    for row, (group, a, b) in enumerate(pairs):
        diff = positions[a] - positions[b]
        residual[row] = float(diff @ diff) - group.target_distance(a, b) ** 2
        jacobian[row, dim * a: dim * (a + 1)] = 2.0 * diff
        jacobian[row, dim * b: dim * (b + 1)] = -2.0 * diff
    return residual, jacobian


def _distance_layout(groups: Sequence[RigidGroup], tag_count: int, dim: int) -> Tuple[List[int], int]:
    motions = 3 if dim == 2 else 6
    starts = [motions * r for r in range(len(groups))]
    total = motions * len(groups) + dim * len(_ungrouped_tags(groups, tag_count))
    return starts, total


def distance_nullspace(groups: Sequence[RigidGroup], config: Any, tag_count: Optional[int] = None) -> np.ndarray:
    """
    距離制約のヤコビアンの零空間の基底 A_U を返します。

    各グループのユークリッド運動の基底をそのタグの行に埋め込み、
    どのグループにも属さないタグには単位行列の列を加えます。

    Raises:
        DegenerateConfigurationError: グループのタグ配置が退化している場合
    """
    tag_count = tag_count if tag_count is not None else len(config)
    positions = _tag_rows(config, tag_count)
    _validate_groups(groups, tag_count)
    dim = positions.shape[1]
    starts, total = _distance_layout(groups, tag_count, dim)

    basis = np.zeros((dim * tag_count, total))
    for group, start in zip(groups, starts):
        try:
            local = euclidean_motion_basis(positions[list(group.tags)])
        except DegenerateConfigurationError as e:
            raise DegenerateConfigurationError(f"ロボット {group.robot}: {e}") from e
        for index, tag in enumerate(group.tags):
            basis[dim * tag: dim * (tag + 1), start: start + local.shape[1]] = local[dim * index: dim * (index + 1)]

    column = starts[-1] + (3 if dim == 2 else 6) if groups else 0
    for tag in _ungrouped_tags(groups, tag_count):
        basis[dim * tag: dim * (tag + 1), column: column + dim] = np.eye(dim)
        column += dim
    return basis


def _distance_nullspace_partial(groups: Sequence[RigidGroup], tag_count: int, dim: int, node: int, coord: int) -> np.ndarray:
    """∂A_U/∂ξ_node。回転の列のうち node の行だけが非零です。"""
    starts, total = _distance_layout(groups, tag_count, dim)
    partial = np.zeros((dim * tag_count, total))
    unit = np.zeros(dim)
    unit[coord] = 1.0
    for group, start in zip(groups, starts):
        if node not in group.tags:
            continue
        rows = slice(dim * node, dim * (node + 1))
        if dim == 2:
            partial[rows, start + 2] = [-unit[1], unit[0]]
        else:
            identity = np.eye(3)
            for k in range(3):
                partial[rows, start + 3 + k] = np.cross(identity[k], unit)
    return partial


@dataclass(frozen=True)
class ConstrainedBound:
    """制約付き CRLB B = A (AᵀFA)⁻¹ Aᵀ"""

    matrix: np.ndarray
    reduced_fisher: np.ndarray
    pseudo_inverse: bool

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def _reduced_inverse(reduced: np.ndarray, tol: float) -> Tuple[np.ndarray, bool]:
    reduced = 0.5 * (reduced + reduced.T)
    eigenvalues = np.linalg.eigvalsh(reduced)
    largest = float(eigenvalues[-1]) if eigenvalues.size else 0.0
    if largest > 0.0 and float(eigenvalues[0]) > tol * largest:
        return np.linalg.inv(reduced), False
    logger.warning("制約付き FIM が特異のため擬似逆行列を使用します (λ_min=%.3e)", eigenvalues[0] if eigenvalues.size else 0.0)
    return np.linalg.pinv(reduced, rcond=tol, hermitian=True), True


def constrained_crlb(tag_block: Any, basis: Any, tol: float = PINV_TOL) -> ConstrainedBound:
    """
    制約付き CRLB を返します。

    F_c = AᵀF_U A が正則なら逆行列、そうでなければ fisher と同じカットオフの擬似逆行列を使います。
    """
    fisher = np.asarray(tag_block, dtype=float)
    nullspace = np.asarray(basis, dtype=float)
    reduced = nullspace.T @ fisher @ nullspace
    inverse, pseudo = _reduced_inverse(reduced, tol)
    matrix = nullspace @ inverse @ nullspace.T
    return ConstrainedBound(0.5 * (matrix + matrix.T), reduced, pseudo)


def _mobile(graph: RangingGraph, mobile: Optional[Iterable[int]]) -> Tuple[int, ...]:
    if mobile is None:
        return tuple(range(graph.node_count))
    return tuple(sorted(set(int(n) for n in mobile)))


def distance_constrained_potential_gradient(
    groups: Sequence[RigidGroup],
    graph: RangingGraph,
    positions: Any,
    noise: NoiseModel,
    mobile: Optional[Iterable[int]] = None,
) -> Tuple[float, GradientField]:
    """
    J_c = trace(B_U) とその解析勾配
    2·trace(F_c⁻¹A_Uᵀ(I − B_U F_U)∂A_U/∂ξ) − trace(B_U² ∂F_U/∂ξ) を返します。

    Raises:
        SingularFisherError: F_c が特異な場合
    """
    config = as_configuration(graph, positions)
    dim, tag_count = graph.dim, graph.tag_count
    fisher = tag_fim(graph, config, noise)
    basis = distance_nullspace(groups, config, tag_count)
    bound = constrained_crlb(fisher, basis)
    if bound.pseudo_inverse:
        raise SingularFisherError("距離制約付き FIM F_c が特異です", lambda_min=float(np.linalg.eigvalsh(bound.reduced_fisher)[0]))

    inverse = np.linalg.inv(bound.reduced_fisher)
    b_matrix = bound.matrix
    left = inverse @ basis.T @ (np.eye(dim * tag_count) - b_matrix @ fisher)
    b_squared = b_matrix @ b_matrix

    gradients = {}
    for node in _mobile(graph, mobile):
        values = np.zeros(dim)
        for k in range(dim):
            partial_fisher = fim_partial(graph, config, noise, node, k)
            values[k] = -float(np.sum(b_squared * partial_fisher))
            if graph.is_tag(node):
                partial_basis = _distance_nullspace_partial(groups, tag_count, dim, node, k)
                values[k] += 2.0 * float(np.sum(left.T * partial_basis))
        gradients[node] = values
    return bound.trace, GradientField(gradients, bound.trace)


# ---------------------------------------------------------------------------
# 相対位置（RP）制約
# ---------------------------------------------------------------------------

class RPConstraintEvaluation(NamedTuple):
    """
    相対位置制約の評価結果

    residual: 非基準タグごとの p_j − p_1 − exp([θ]×)p^r_{j1}
    n_matrix: (p_1, θ) についての微分（ロボット順、N^{(r,j)} = −[I, N_θ]）
    nullspace: 自然な並び (p_U, θ) での零空間の基底 A_RP
    jacobian: 自然な並び (p_U, θ) でのヤコビアン
    """

    residual: np.ndarray
    n_matrix: np.ndarray
    nullspace: np.ndarray
    jacobian: np.ndarray


def _rotated_offsets(groups: Sequence[RigidGroup], positions: np.ndarray, thetas: Optional[Sequence[Any]]) -> List[Dict[int, np.ndarray]]:
    """
    Φ_j = exp([θ_r]×)p^r_{j1}。θ が与えられない場合は制約面上の置換 Φ_j = p_j − p_1 を使います。
    """
    phis = []
    for r, group in enumerate(groups):
        if thetas is None:
            origin = positions[group.reference]
            phis.append({t: positions[t] - origin for t in group.tags[1:]})
        else:
            rotation = rotation_exp(thetas[r], group.dim)
            phis.append({t: rotation @ group.relative_offset(t) for t in group.tags[1:]})
    return phis


def _rp_layout(groups: Sequence[RigidGroup], tag_count: int, dim: int) -> Tuple[int, int, List[int]]:
    q = orientation_size(dim)
    parameters = dim * tag_count + q * len(groups)
    starts = [(dim + q) * r for r in range(len(groups))]
    columns = (dim + q) * len(groups) + dim * len(_ungrouped_tags(groups, tag_count))
    return parameters, columns, starts


def _rp_nullspace(groups: Sequence[RigidGroup], tag_count: int, dim: int, phis: List[Dict[int, np.ndarray]]) -> np.ndarray:
    q = orientation_size(dim)
    parameters, columns, starts = _rp_layout(groups, tag_count, dim)
    generators = _generators(dim)
    basis = np.zeros((parameters, columns))
    for r, (group, start) in enumerate(zip(groups, starts)):
        theta_row = dim * tag_count + q * r
        for c in range(dim):
            for tag in group.tags:
                basis[dim * tag + c, start + c] = 1.0
        for k, generator in enumerate(generators):
            column = start + dim + k
            for tag in group.tags[1:]:
                basis[dim * tag: dim * (tag + 1), column] = generator @ phis[r][tag]
            basis[theta_row + k, column] = 1.0

    column = (dim + q) * len(groups)
    for tag in _ungrouped_tags(groups, tag_count):
        basis[dim * tag: dim * (tag + 1), column: column + dim] = np.eye(dim)
        column += dim
    return basis


def rp_constraints(
    groups: Sequence[RigidGroup],
    config: Any,
    thetas: Sequence[Any],
    tag_count: Optional[int] = None,
) -> RPConstraintEvaluation:
    """
    相対位置制約の残差、N 行列、零空間の基底 A_RP とヤコビアンを返します。

    N_θ は 2次元で W·Φ、3次元で [W_xΦ, W_yΦ, W_zΦ]（Φ = exp([θ]×)p^r_{j1}）です。
    """
    tag_count = tag_count if tag_count is not None else len(config)
    positions = _tag_rows(config, tag_count)
    _validate_groups(groups, tag_count)
    dim = positions.shape[1]
    q = orientation_size(dim)
    generators = _generators(dim)
    phis = _rotated_offsets(groups, positions, thetas)
    parameters, _, _ = _rp_layout(groups, tag_count, dim)

    rows = dim * sum(len(g.tags) - 1 for g in groups)
    residual = np.zeros(rows)
    n_matrix = np.zeros((rows, (dim + q) * len(groups)))
    jacobian = np.zeros((rows, parameters))
    row = 0
    for r, group in enumerate(groups):
        reference = group.reference
        theta_column = dim * tag_count + q * r
        for tag in group.tags[1:]:
            block = slice(row, row + dim)
            residual[block] = positions[tag] - positions[reference] - phis[r][tag]
            n_theta = np.column_stack([generator @ phis[r][tag] for generator in generators])
            n_matrix[block, (dim + q) * r: (dim + q) * r + dim] = -np.eye(dim)
            n_matrix[block, (dim + q) * r + dim: (dim + q) * (r + 1)] = -n_theta
            jacobian[block, dim * tag: dim * (tag + 1)] = np.eye(dim)
            jacobian[block, dim * reference: dim * (reference + 1)] = -np.eye(dim)
            jacobian[block, theta_column: theta_column + q] = -n_theta
            row += dim

    nullspace = _rp_nullspace(groups, tag_count, dim, phis)
    return RPConstraintEvaluation(residual, n_matrix, nullspace, jacobian)


@dataclass(frozen=True)
class RelativePositionBound:
    """
    拡張パラメータ (p_U, θ) 上の制約付き CRLB B_RP

    trace は位置ブロックのトレース J_c = trace(C B_RP Cᵀ) です。
    """

    matrix: np.ndarray
    position_size: int
    reduced_fisher: np.ndarray
    pseudo_inverse: bool

    @property
    def position_block(self) -> np.ndarray:
        return self.matrix[: self.position_size, : self.position_size]

    @property
    def orientation_block(self) -> np.ndarray:
        """姿勢 θ の不確かさ（診断用）"""
        return self.matrix[self.position_size:, self.position_size:]

    @property
    def trace(self) -> float:
        return float(np.trace(self.position_block))


def _extended_fisher(tag_block: np.ndarray, orientation_params: int) -> np.ndarray:
    size = tag_block.shape[0]
    extended = np.zeros((size + orientation_params, size + orientation_params))
    extended[:size, :size] = tag_block
    return extended


def rp_constrained_crlb(
    graph: RangingGraph,
    positions: Any,
    noise: NoiseModel,
    groups: Sequence[RigidGroup],
    thetas: Optional[Sequence[Any]] = None,
    tol: float = PINV_TOL,
) -> RelativePositionBound:
    """
    相対位置制約付き CRLB を返します。

    θ を省略した場合は制約面上の置換 Φ_j = p_j − p_1 で A_RP を評価します
    （実現可能な配置では θ を与えた場合と一致します）。F_c が特異なら擬似逆行列を使い pseudo_inverse を立てます。
    """
    config = as_configuration(graph, positions)
    dim, tag_count = graph.dim, graph.tag_count
    _validate_groups(groups, tag_count)
    phis = _rotated_offsets(groups, config[:tag_count], thetas)
    basis = _rp_nullspace(groups, tag_count, dim, phis)
    extended = _extended_fisher(tag_fim(graph, config, noise), orientation_size(dim) * len(groups))
    reduced = basis.T @ extended @ basis
    inverse, pseudo = _reduced_inverse(reduced, tol)
    matrix = basis @ inverse @ basis.T
    return RelativePositionBound(0.5 * (matrix + matrix.T), dim * tag_count, 0.5 * (reduced + reduced.T), pseudo)


def _rp_nullspace_partial(groups: Sequence[RigidGroup], tag_count: int, dim: int, node: int, coord: int) -> np.ndarray:
    """
    置換 Φ_j = p_j − p_1 による ∂A_RP/∂ξ_node（∂Φ/∂ξ_j = e_ξ、∂Φ/∂ξ_1 = −e_ξ）
    """
    parameters, columns, starts = _rp_layout(groups, tag_count, dim)
    partial = np.zeros((parameters, columns))
    unit = np.zeros(dim)
    unit[coord] = 1.0
    for group, start in zip(groups, starts):
        if node not in group.tags:
            continue
        for k, generator in enumerate(_generators(dim)):
            column = start + dim + k
            direction = generator @ unit
            if node == group.reference:
                for tag in group.tags[1:]:
                    partial[dim * tag: dim * (tag + 1), column] -= direction
            else:
                partial[dim * node: dim * (node + 1), column] += direction
    return partial


def rp_potential_gradient(
    graph: RangingGraph,
    positions: Any,
    noise: NoiseModel,
    groups: Sequence[RigidGroup],
    thetas: Optional[Sequence[Any]] = None,
    mobile: Optional[Iterable[int]] = None,
) -> GradientField:
    """
    J_c(RP) の解析勾配 2·trace(C ∂A_RP Dᵀ) − trace(D ∂F_c Dᵀ)（D = C A_RP F_c⁻¹）を返します。

    Raises:
        SingularFisherError: F_c が特異な場合
    """
    config = as_configuration(graph, positions)
    dim, tag_count = graph.dim, graph.tag_count
    q_total = orientation_size(dim) * len(groups)
    bound = rp_constrained_crlb(graph, config, noise, groups, thetas)
    if bound.pseudo_inverse:
        raise SingularFisherError("相対位置制約付き FIM F_c が特異です", lambda_min=float(np.linalg.eigvalsh(bound.reduced_fisher)[0]))

    phis = _rotated_offsets(groups, config[:tag_count], thetas)
    basis = _rp_nullspace(groups, tag_count, dim, phis)
    extended = _extended_fisher(tag_fim(graph, config, noise), q_total)
    inverse = np.linalg.inv(bound.reduced_fisher)
    selector = np.hstack([np.eye(dim * tag_count), np.zeros((dim * tag_count, q_total))])
    d_matrix = selector @ basis @ inverse

    gradients = {}
    for node in _mobile(graph, mobile):
        values = np.zeros(dim)
        for k in range(dim):
            partial_extended = _extended_fisher(fim_partial(graph, config, noise, node, k), q_total)
            if graph.is_tag(node):
                partial_basis = _rp_nullspace_partial(groups, tag_count, dim, node, k)
            else:
                partial_basis = np.zeros_like(basis)
            partial_reduced = (
                partial_basis.T @ extended @ basis
                + basis.T @ extended @ partial_basis
                + basis.T @ partial_extended @ basis
            )
            values[k] = 2.0 * float(np.trace(selector @ partial_basis @ d_matrix.T))
            values[k] -= float(np.trace(d_matrix @ partial_reduced @ d_matrix.T))
        gradients[node] = values
    return GradientField(gradients, bound.trace)


def constrained_potential_gradient(
    groups: Sequence[RigidGroup],
    graph: RangingGraph,
    positions: Any,
    noise: NoiseModel,
    kind: str = "D",
    mobile: Optional[Iterable[int]] = None,
    thetas: Optional[Sequence[Any]] = None,
) -> Tuple[float, GradientField]:
    """制約の種類（"D": 距離のみ、"RP": 相対位置）に応じて J_c と勾配を返します。"""
    if kind == "D":
        return distance_constrained_potential_gradient(groups, graph, positions, noise, mobile)
    if kind == "RP":
        field_ = rp_potential_gradient(graph, positions, noise, groups, thetas, mobile)
        return float(field_.value or 0.0), field_
    raise ValueError(f"未知の制約の種類です: {kind}")


# ---------------------------------------------------------------------------
# 剛体姿勢への射影
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    position: np.ndarray
    theta: Union[float, np.ndarray]
    rotation: np.ndarray
    tag_positions: Dict[int, np.ndarray]
    residual: float


def project_to_rigid_pose(group: RigidGroup, desired_tag_positions: Any) -> RigidPose:
    """
    希望するタグ位置に最小二乗の意味で最も近い剛体姿勢を返します。

    相互共分散行列の SVD による直交 Procrustes 解（行列式の補正で反射を除外）。

    Args:
        group (RigidGroup): 剛体グループ
        desired_tag_positions: group.tags の順に並んだ (m, dim) 配列、またはタグ → 位置の辞書

    Returns:
        RigidPose: 基準タグ位置、姿勢、実現可能なタグ位置、残差二乗和

    Raises:
        DegenerateConfigurationError: 搭載位置が姿勢を一意に決めない場合
    """
    if isinstance(desired_tag_positions, Mapping):
        desired = np.array([desired_tag_positions[t] for t in group.tags], dtype=float)
    else:
        desired = np.asarray(desired_tag_positions, dtype=float).reshape(len(group.tags), -1)
    dim = group.dim
    body = np.array([group.relative_offset(t) for t in group.tags])

    body_center = body.mean(axis=0)
    desired_center = desired.mean(axis=0)
    centered_body = body - body_center
    singular = np.linalg.svd(centered_body, compute_uv=False)
    needed = 1 if dim == 2 else 2
    if singular[0] <= 1e-12 or singular[needed - 1] <= 1e-9 * singular[0]:
        raise DegenerateConfigurationError(f"ロボット {group.robot}: 搭載位置から姿勢が一意に定まりません")

    covariance = centered_body.T @ (desired - desired_center)
    u, _, vt = np.linalg.svd(covariance)
    correction = np.eye(dim)
    correction[-1, -1] = float(np.sign(np.linalg.det(vt.T @ u.T))) or 1.0
    rotation = vt.T @ correction @ u.T
    origin = desired_center - rotation @ body_center

    fitted = {t: origin + rotation @ body[i] for i, t in enumerate(group.tags)}
    residual = float(sum(np.sum((desired[i] - fitted[t]) ** 2) for i, t in enumerate(group.tags)))
    return RigidPose(origin, rotation_log(rotation), rotation, fitted, residual)


# ---------------------------------------------------------------------------
# 主双対法
# ---------------------------------------------------------------------------

class ConstraintSystem(ABC):
    """
    主双対法が使う制約 f_c = 0 とその制約付きポテンシャル

    主変数はタグ座標と、制約が必要とする追加の変数 extra（相対位置制約では各ロボットの θ）です。
    """

    kind = ""

    def __init__(self, groups: Sequence[RigidGroup], tag_count: int):
        _validate_groups(groups, tag_count)
        self.groups = list(groups)
        self.tag_count = tag_count

    def initial_extra(self, config: Any) -> np.ndarray:
        return np.zeros(0)

    def extra_tags(self) -> List[Tuple[int, ...]]:
        """追加の変数ごとに、その変数を持つロボットのタグ"""
        return []

    @abstractmethod
    def residual(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        ...

    @abstractmethod
    def jacobian(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        """タグ座標 (dim·U) と追加の変数についてのヤコビアン"""

    @abstractmethod
    def potential(self, graph: RangingGraph, config: Any, noise: NoiseModel,
                  mobile: Optional[Iterable[int]] = None) -> Tuple[float, GradientField]:
        ...

    def violation(self, config: Any, extra: Optional[np.ndarray] = None) -> float:
        return float(np.linalg.norm(self.residual(config, extra)))


class DistanceConstraintSystem(ConstraintSystem):
    kind = "D"

    def residual(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        return distance_constraints(self.groups, config, self.tag_count)[0]

    def jacobian(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        return distance_constraints(self.groups, config, self.tag_count)[1]

    def potential(self, graph, config, noise, mobile=None):
        return distance_constrained_potential_gradient(self.groups, graph, config, noise, mobile)


class RelativePositionConstraintSystem(ConstraintSystem):
    """
    θ を主変数に含める相対位置制約

    extra を与えない評価では、θ を現在の配置の剛体姿勢への射影から求めます。
    """

    kind = "RP"

    def orientations(self, config: Any) -> List[Any]:
        positions = _tag_rows(config, self.tag_count)
        return [project_to_rigid_pose(g, positions[list(g.tags)]).theta for g in self.groups]

    def _thetas(self, config: Any, extra: Optional[np.ndarray]) -> List[Any]:
        if extra is None or len(extra) == 0:
            return self.orientations(config)
        q = orientation_size(self.groups[0].dim)
        values = np.asarray(extra, dtype=float).reshape(len(self.groups), q)
        return [float(v[0]) if q == 1 else v for v in values]

    def initial_extra(self, config: Any) -> np.ndarray:
        return np.concatenate([np.atleast_1d(np.asarray(t, dtype=float)) for t in self.orientations(config)])

    def extra_tags(self) -> List[Tuple[int, ...]]:
        return [g.tags for g in self.groups for _ in range(orientation_size(g.dim))]

    def residual(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        return rp_constraints(self.groups, config, self._thetas(config, extra), self.tag_count).residual

    def jacobian(self, config: Any, extra: Optional[np.ndarray] = None) -> np.ndarray:
        return rp_constraints(self.groups, config, self._thetas(config, extra), self.tag_count).jacobian

    def potential(self, graph, config, noise, mobile=None):
        field_ = rp_potential_gradient(graph, config, noise, self.groups, None, mobile)
        return float(field_.value or 0.0), field_


def constraint_system(kind: str, groups: Sequence[RigidGroup], tag_count: int) -> ConstraintSystem:
    if kind == "D":
        return DistanceConstraintSystem(groups, tag_count)
    if kind == "RP":
        return RelativePositionConstraintSystem(groups, tag_count)
    raise ValueError(f"未知の制約の種類です: {kind}")


@dataclass
class PrimalDualState:
    """
    主双対法の状態

    penalty は拡張ラグランジアンの ρ（0 なら J_c + λᵀf_c そのもの）、extra は追加の主変数です。
    """

    config: np.ndarray
    lam: np.ndarray
    delta: float = DEFAULT_DUAL_STEP
    step: float = 0.0
    rejected: bool = False
    iteration: int = 0
    value: Optional[float] = None
    extra: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalty: float = 0.0


@dataclass(frozen=True)
class ArmijoRule:
    initial_step: float = ARMIJO_INITIAL_STEP
    contraction: float = ARMIJO_CONTRACTION
    sufficient_decrease: float = ARMIJO_SUFFICIENT_DECREASE
    max_backtracks: int = ARMIJO_MAX_BACKTRACKS


PotentialEvaluator = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def primal_dual_step(
    state: PrimalDualState,
    potential_and_gradient: PotentialEvaluator,
    constraints: ConstraintSystem,
    mobile: Optional[Iterable[int]] = None,
    armijo: ArmijoRule = ArmijoRule(),
) -> PrimalDualState:
    """
    主双対法を 1 ステップ進めます。

    p_{k+1} = p_k − η_k(∂J_c/∂p + (λ + ρf_c)ᵀ∂f_c/∂p)ᵀ、λ_{k+1} = λ_k + δ f_c(p_k)。
    追加の主変数（θ）も同じ η_k で動かします。ρ = 0 では拡張項が消えます。
    η_k は拡張ラグランジアン J_c + λᵀf_c + (ρ/2)‖f_c‖² に対する Armijo のバックトラッキングで決め、
    max_backtracks 回で十分減少が得られなければ主変数を動かさず rejected を立てます。

    Args:
        state (PrimalDualState): 現在の状態
        potential_and_gradient: 配置 → (J_c, (N, dim) の勾配配列)
        constraints (ConstraintSystem): 制約
        mobile: 動かすノード（省略時は全ノード）
        armijo (ArmijoRule): 直線探索のパラメータ
    """
    config = np.array(state.config, dtype=float, copy=True)
    extra = np.array(state.extra, dtype=float, copy=True)
    count, dim = config.shape
    tag_count = constraints.tag_count
    columns = dim * tag_count

    value, gradient = potential_and_gradient(config)
    residual = constraints.residual(config, extra)
    if state.lam.shape != residual.shape:
        raise ValueError(f"双対変数の長さ {state.lam.shape} が制約の数 {residual.shape} と一致しません")
    jacobian = constraints.jacobian(config, extra)
    weights = state.lam + state.penalty * residual

    direction = np.array(gradient, dtype=float, copy=True).reshape(count, dim)
    direction[:tag_count] += (weights @ jacobian[:, :columns]).reshape(tag_count, dim)
    extra_direction = weights @ jacobian[:, columns:]
    if mobile is not None:
        moving = {int(n) for n in mobile}
        frozen = np.ones(count, dtype=bool)
        frozen[list(moving)] = False
        direction[frozen] = 0.0
        for index, tags in enumerate(constraints.extra_tags()):
            if not set(tags) <= moving:
                extra_direction[index] = 0.0

    def merit(candidate: np.ndarray, candidate_extra: np.ndarray) -> float:
        r = constraints.residual(candidate, candidate_extra)
        return potential_and_gradient(candidate)[0] + float(state.lam @ r) + 0.5 * state.penalty * float(r @ r)

    current = value + float(state.lam @ residual) + 0.5 * state.penalty * float(residual @ residual)
    slope = float(np.sum(direction ** 2) + np.sum(extra_direction ** 2))
    step = armijo.initial_step
    accepted: Optional[Tuple[np.ndarray, np.ndarray]] = None
    for _ in range(armijo.max_backtracks + 1):
        candidate = config - step * direction
        candidate_extra = extra - step * extra_direction
        try:
            candidate_value = merit(candidate, candidate_extra)
        except (LocalizabilityError, np.linalg.LinAlgError):
            candidate_value = np.inf
        if candidate_value <= current - armijo.sufficient_decrease * step * slope:
            accepted = (candidate, candidate_extra)
            break
        step *= armijo.contraction

    lam = state.lam + state.delta * residual
    if accepted is None:
        logger.warning("主双対法: Armijo 条件を満たすステップが見つかりません (反復 %d)", state.iteration)
        return PrimalDualState(config, lam, state.delta, 0.0, True, state.iteration + 1, value, extra, state.penalty)
    return PrimalDualState(accepted[0], lam, state.delta, step, False, state.iteration + 1, value, accepted[1],
                           state.penalty)


def initial_primal_dual_state(
    config: Any,
    constraints: ConstraintSystem,
    delta: float = DEFAULT_DUAL_STEP,
    penalty: Optional[float] = None,
) -> PrimalDualState:
    """
    λ = 0 の初期状態を返します。

    penalty を省略すると ρ = PENALTY_RATIO·δ です（δ < ρ の範囲で双対更新が減衰します）。
    追加の主変数は constraints.initial_extra から求めます。
    """
    extra = constraints.initial_extra(config)
    residual = constraints.residual(config, extra)
    rho = PENALTY_RATIO * delta if penalty is None else penalty
    return PrimalDualState(np.array(config, dtype=float, copy=True), np.zeros_like(residual), delta,
                           extra=extra, penalty=rho)
