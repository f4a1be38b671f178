"""
測距シミュレーションと最小二乗推定

測距値のサンプリング、（制約付き）非線形最小二乗による位置推定、
モンテカルロ法による MSE の評価を提供します。
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import least_squares
from tqdm import tqdm

from src.modules.constrained import RigidGroup, project_to_rigid_pose, rotation_exp
from src.modules.fisher import NoiseKind, NoiseModel
from src.modules.geometry_graph import RangingGraph, as_configuration
from src.utils.environment import EnvironmentUtils as env
from src.utils.exceptions import (
    ConvergenceError,
    EstimationFailureError,
    LocalizabilityError,
    SingularGeometryError,
)
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

TRIAL_STATS_COLUMNS = ["step", "tag", "mse", "var", "b_minus", "b_plus", "logdet_cov"]
NETWORK_MSE_COLUMNS = ["step", "mse", "var", "b_minus", "b_plus", "trials", "failures"]
MAX_FAILURE_RATE = 0.05
CONFIDENCE_FACTOR = 3.0

# 仕上げのステップで許す Q の相対的な増加幅
COST_SLACK = 1e-12
MIN_POLISH_SCALE = 1.0 / 1024.0


@dataclass(frozen=True)
class MeasurementSet:
    """測距エッジ（グラフのエッジ順、アンカー同士を除く）ごとの測距値"""

    edges: Tuple[Tuple[int, int], ...]
    distances: np.ndarray
    seed: Optional[Any] = None

    def __len__(self) -> int:
        return len(self.edges)


def sample_measurements(graph: RangingGraph, positions: Any, noise: NoiseModel, rng: np.random.Generator, seed: Optional[Any] = None) -> MeasurementSet:
    """
    測距値を 1 回サンプリングします。

    加法モデル: d̃ = d + ν（ν ∼ N(0, σ²)）、対数正規モデル: d̃ = d·e^ν。

    Raises:
        SingularGeometryError: 測距エッジの距離が 0 の場合
    """
    config = as_configuration(graph, positions)
    edges = graph.ranging_edges
    heads = np.array([e[0] for e in edges], dtype=int)
    tails = np.array([e[1] for e in edges], dtype=int)
    distances = np.linalg.norm(config[heads] - config[tails], axis=1)
    if distances.size and float(np.min(distances)) < 1e-12:
        raise SingularGeometryError("距離 0 の測距エッジがあります", edge=edges[int(np.argmin(distances))])

    draws = rng.standard_normal(len(edges)) * noise.sigma
    if noise.kind is NoiseKind.ADDITIVE:
        measured = distances + draws
    else:
        measured = distances * np.exp(draws)
    return MeasurementSet(tuple(edges), measured, seed)


@dataclass(frozen=True)
class SolverOptions:
    gtol: float = 1e-10
    xtol: float = 1e-12
    max_iterations: int = 200
    polish_iterations: int = 50


@dataclass
class LSResult:
    """最小二乗推定の結果。gradient_norm は（制約付きでは射影後の）勾配 ‖∇Q‖。"""

    positions: np.ndarray
    cost: float
    gradient_norm: float
    constraint_residual: float = 0.0
    iterations: int = 0


class Parameterization(NamedTuple):
    """
    推定変数 z からタグ位置への写像

    curvature(z, g) はタグ座標の勾配 g に対する Σ gᵀ∂²p/∂z² です（線形な写像では 0）。
    """

    to_positions: Callable[[np.ndarray], np.ndarray]
    position_jacobian: Callable[[np.ndarray], np.ndarray]
    curvature: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _check_measurements(graph: RangingGraph, measurements: MeasurementSet) -> None:
    if tuple(measurements.edges) != tuple(graph.ranging_edges):
        raise ValueError("測距値のエッジがグラフの測距エッジと一致しません")


def _full_positions(tag_positions: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    return np.vstack([tag_positions, anchors])


def _add_pair_block(matrix: np.ndarray, block: np.ndarray, dim: int, i: int, j: Optional[int]) -> None:
    """ノード対 (i, j) の距離の曲率 block を対称に足し込みます（j が None ならアンカー）。"""
    rows_i = slice(dim * i, dim * (i + 1))
    matrix[rows_i, rows_i] += block
    if j is None:
        return
    rows_j = slice(dim * j, dim * (j + 1))
    matrix[rows_j, rows_j] += block
    matrix[rows_i, rows_j] -= block
    matrix[rows_j, rows_i] -= block


def range_residuals(graph: RangingGraph, anchors: Any, measurements: MeasurementSet, tag_positions: Any) -> np.ndarray:
    """r_ij = ‖p̂_i − p̂_j‖ − d̃_ij"""
    config = _full_positions(np.asarray(tag_positions, dtype=float).reshape(graph.tag_count, graph.dim),
                             np.asarray(anchors, dtype=float))
    heads = np.array([e[0] for e in measurements.edges], dtype=int)
    tails = np.array([e[1] for e in measurements.edges], dtype=int)
    return np.linalg.norm(config[heads] - config[tails], axis=1) - measurements.distances


def range_jacobian(graph: RangingGraph, anchors: Any, measurements: MeasurementSet, tag_positions: Any) -> np.ndarray:
    """r のタグ座標 (dim·U) についてのヤコビアン（行は単位差分ベクトル）"""
    dim = graph.dim
    config = _full_positions(np.asarray(tag_positions, dtype=float).reshape(graph.tag_count, dim),
                             np.asarray(anchors, dtype=float))
    jacobian = np.zeros((len(measurements.edges), dim * graph.tag_count))
    for row, (i, j) in enumerate(measurements.edges):
        diff = config[i] - config[j]
        distance = float(np.linalg.norm(diff))
        if distance < 1e-12:
            continue
        unit = diff / distance
        jacobian[row, dim * i: dim * (i + 1)] = unit
        if graph.is_tag(j):
            jacobian[row, dim * j: dim * (j + 1)] = -unit
    return jacobian


def range_hessian(graph: RangingGraph, anchors: Any, measurements: MeasurementSet, tag_positions: Any) -> np.ndarray:
    """
    Q のタグ座標についての厳密なヘッセ行列 2(JᵀJ + Σ r_ij ∇²r_ij)

    ∇²r_ij は (I − u uᵀ)/d_ij のブロック（u は単位差分ベクトル）です。
    """
    dim = graph.dim
    positions = np.asarray(tag_positions, dtype=float).reshape(graph.tag_count, dim)
    config = _full_positions(positions, np.asarray(anchors, dtype=float))
    residuals = range_residuals(graph, anchors, measurements, positions)
    jacobian = range_jacobian(graph, anchors, measurements, positions)
    curvature = np.zeros((jacobian.shape[1], jacobian.shape[1]))
    for residual, (i, j) in zip(residuals, measurements.edges):
        diff = config[i] - config[j]
        distance = float(np.linalg.norm(diff))
        if distance < 1e-12:
            continue
        unit = diff / distance
        block = residual * (np.eye(dim) - np.outer(unit, unit)) / distance
        _add_pair_block(curvature, block, dim, i, j if graph.is_tag(j) else None)
    return 2.0 * (jacobian.T @ jacobian + curvature)


def _newton_step(hessian: np.ndarray, gradient: np.ndarray, jacobian: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """ヘッセ行列が正定値ならニュートン方向、そうでなければ Gauss–Newton 方向"""
    try:
        np.linalg.cholesky(hessian)
        return np.linalg.solve(hessian, -gradient)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(jacobian, -residuals, rcond=None)[0]


def _polish(
    graph: RangingGraph,
    anchors: np.ndarray,
    measurements: MeasurementSet,
    parameterization: Parameterization,
    z: np.ndarray,
    options: SolverOptions,
) -> Tuple[np.ndarray, float, int]:
    """
    ニュートン法で ‖∇Q‖ < gtol まで仕上げ、勾配ノルムが最小の反復を返します。
    """
    best, best_norm = z, np.inf
    iterations = 0
    while True:
        positions = parameterization.to_positions(z)
        r = range_residuals(graph, anchors, measurements, positions)
        jac = range_jacobian(graph, anchors, measurements, positions)
        position_gradient = 2.0 * jac.T @ r
        lift = parameterization.position_jacobian(z)
        gradient = lift.T @ position_gradient
        norm = float(np.linalg.norm(gradient))
        if norm < best_norm:
            best, best_norm = z, norm
        if norm < options.gtol or iterations >= options.polish_iterations:
            break

        hessian = lift.T @ range_hessian(graph, anchors, measurements, positions) @ lift
        hessian = hessian + parameterization.curvature(z, position_gradient)
        step = _newton_step(hessian, gradient, jac @ lift, r)
        cost = float(r @ r)
        limit = cost + COST_SLACK * max(cost, 1.0)
        scale = 1.0
        accepted = None
        while scale >= MIN_POLISH_SCALE:
            trial = z + scale * step
            trial_r = range_residuals(graph, anchors, measurements, parameterization.to_positions(trial))
            if float(trial_r @ trial_r) <= limit:
                accepted = trial
                break
            scale *= 0.5
        if accepted is None:
            break
        z = accepted
        iterations += 1
    return best, best_norm, iterations


def _solve_parameterized(
    graph: RangingGraph,
    anchors: np.ndarray,
    measurements: MeasurementSet,
    parameterization: Parameterization,
    start: np.ndarray,
    options: SolverOptions,
) -> Tuple[np.ndarray, float, int]:
    """Levenberg–Marquardt の後にニュートン法で仕上げ、(z, 勾配ノルム, 反復数) を返します。"""
    to_positions, position_jacobian, _ = parameterization

    def residuals(z: np.ndarray) -> np.ndarray:
        return range_residuals(graph, anchors, measurements, to_positions(z))

    def jacobian(z: np.ndarray) -> np.ndarray:
        return range_jacobian(graph, anchors, measurements, to_positions(z)) @ position_jacobian(z)

    result = least_squares(
        residuals, start, jac=jacobian, method="lm",
        xtol=options.xtol, ftol=1e-15, gtol=1e-15, max_nfev=options.max_iterations * (start.size + 1),
    )
    z, gradient_norm, polished = _polish(graph, anchors, measurements, parameterization, result.x, options)
    return z, gradient_norm, int(result.nfev) + polished


def _free_parameterization(graph: RangingGraph) -> Parameterization:
    shape = (graph.tag_count, graph.dim)
    size = graph.dim * graph.tag_count
    identity = np.eye(size)
    return Parameterization(lambda z: z.reshape(shape), lambda z: identity, lambda z, g: np.zeros((size, size)))


def _finish(graph, anchors, measurements, positions, gradient_norm, iterations, constraint_residual=0.0) -> LSResult:
    r = range_residuals(graph, anchors, measurements, positions)
    return LSResult(positions.reshape(graph.tag_count, graph.dim), float(r @ r), gradient_norm, constraint_residual, iterations)


def _prepare(graph: RangingGraph, anchors: Any, measurements: MeasurementSet, initial_guess: Any) -> Tuple[np.ndarray, np.ndarray]:
    _check_measurements(graph, measurements)
    anchors = np.asarray(anchors, dtype=float).reshape(graph.anchor_count, graph.dim)
    guess = np.asarray(initial_guess, dtype=float).reshape(graph.tag_count, graph.dim)
    if not (np.all(np.isfinite(anchors)) and np.all(np.isfinite(guess))):
        raise ValueError("アンカー位置または初期値に有限でない値が含まれています")
    return anchors, guess


def _require_optimal(gradient_norm: float, options: SolverOptions, label: str, iterations: int) -> None:
    if not np.isfinite(gradient_norm) or gradient_norm >= options.gtol:
        raise ConvergenceError(f"{label}: 勾配ノルム {gradient_norm:.3e} が gtol に達しませんでした", [gradient_norm], iterations)


def ls_localize(
    graph: RangingGraph,
    anchors: Any,
    measurements: MeasurementSet,
    initial_guess: Any,
    options: SolverOptions = SolverOptions(),
) -> LSResult:
    """
    Q(p_U) = Σ(‖p̂_i − p̂_j‖ − d̃_ij)² の局所最小解を求めます。

    scipy の Levenberg–Marquardt で解いた後、厳密なヘッセ行列を使うニュートン法で
    勾配ノルムが gtol 未満になるまで仕上げます。

    Args:
        graph (RangingGraph): 測距グラフ
        anchors: (K, dim) のアンカー位置
        measurements (MeasurementSet): 測距値
        initial_guess: (U, dim) の初期値
        options (SolverOptions): 収束判定

    Returns:
        LSResult: 推定位置、Q、勾配ノルム

    Raises:
        ConvergenceError: 勾配ノルムが gtol 未満にならない場合
    """
    anchors, guess = _prepare(graph, anchors, measurements, initial_guess)
    z, gradient_norm, iterations = _solve_parameterized(
        graph, anchors, measurements, _free_parameterization(graph), guess.reshape(-1), options)
    _require_optimal(gradient_norm, options, "ls_localize", iterations)
    return _finish(graph, anchors, measurements, z, gradient_norm, iterations)


def _constraint_pairs(groups: Sequence[RigidGroup]) -> List[Tuple[RigidGroup, int, int]]:
    return [(g, a, b) for g in groups for ia, a in enumerate(g.tags) for b in g.tags[ia + 1:]]


def _pair_constraints(groups: Sequence[RigidGroup], positions: np.ndarray, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """c_ab = ‖p_a − p_b‖ − d_ab とそのヤコビアン"""
    pairs = _constraint_pairs(groups)
    values = np.zeros(len(pairs))
    jacobian = np.zeros((len(pairs), positions.size))
    for row, (group, a, b) in enumerate(pairs):
        diff = positions[a] - positions[b]
        distance = float(np.linalg.norm(diff))
        values[row] = distance - group.target_distance(a, b)
        if distance > 1e-12:
            unit = diff / distance
            jacobian[row, dim * a: dim * (a + 1)] = unit
            jacobian[row, dim * b: dim * (b + 1)] = -unit
    return values, jacobian


def _pair_curvature(groups: Sequence[RigidGroup], positions: np.ndarray, multipliers: np.ndarray, dim: int) -> np.ndarray:
    """Σ μ_ab ∇²c_ab"""
    matrix = np.zeros((positions.size, positions.size))
    for multiplier, (_, a, b) in zip(multipliers, _constraint_pairs(groups)):
        diff = positions[a] - positions[b]
        distance = float(np.linalg.norm(diff))
        if distance <= 1e-12:
            continue
        unit = diff / distance
        _add_pair_block(matrix, multiplier * (np.eye(dim) - np.outer(unit, unit)) / distance, dim, a, b)
    return matrix


def ls_localize_distance_constrained(
    graph: RangingGraph,
    anchors: Any,
    measurements: MeasurementSet,
    groups: Sequence[RigidGroup],
    initial_guess: Any,
    options: SolverOptions = SolverOptions(),
    ctol: float = 1e-8,
    penalty: float = 10.0,
    penalty_growth: float = 10.0,
    outer_rounds: int = 5,
) -> LSResult:
    """
    グループ内の距離制約 ‖p̂_a − p̂_b‖ = d_ab の下で Q を最小化します。

    拡張ラグランジュ法（ペナルティ 10 から ×10、5 回）で制約を近似的に満たした後、
    ラグランジアンの厳密なヘッセ行列を使う KKT 系のニュートン反復（SQP）で
    |c| < ctol と射影勾配ノルム < gtol まで仕上げます。

    Raises:
        ConvergenceError: 制約または射影勾配が許容値に達しない場合
    """
    anchors, guess = _prepare(graph, anchors, measurements, initial_guess)
    dim, shape = graph.dim, (graph.tag_count, graph.dim)
    multipliers = np.zeros(len(_constraint_pairs(groups)))
    z = guess.reshape(-1)
    iterations = 0
    rho = penalty

    for _ in range(outer_rounds):
        def residuals(x: np.ndarray, rho=rho, multipliers=multipliers) -> np.ndarray:
            c, _ = _pair_constraints(groups, x.reshape(shape), dim)
            r = range_residuals(graph, anchors, measurements, x)
            return np.concatenate([r, np.sqrt(rho / 2.0) * (c + multipliers / rho)])

        def jacobian(x: np.ndarray, rho=rho) -> np.ndarray:
            _, c_jac = _pair_constraints(groups, x.reshape(shape), dim)
            return np.vstack([range_jacobian(graph, anchors, measurements, x), np.sqrt(rho / 2.0) * c_jac])

        result = least_squares(residuals, z, jac=jacobian, method="lm", xtol=options.xtol, ftol=1e-15, gtol=1e-15,
                               max_nfev=options.max_iterations * (z.size + 1))
        z = result.x
        iterations += int(result.nfev)
        c, _ = _pair_constraints(groups, z.reshape(shape), dim)
        multipliers = multipliers + rho * c
        rho *= penalty_growth

    # ラグランジアン Q + μᵀc の KKT 系をニュートン法で解く
    projected_norm = np.inf
    c_norm = np.inf
    size = z.size
    for _ in range(options.polish_iterations + 1):
        positions = z.reshape(shape)
        r = range_residuals(graph, anchors, measurements, z)
        jac = range_jacobian(graph, anchors, measurements, z)
        c, c_jac = _pair_constraints(groups, positions, dim)
        gradient = 2.0 * jac.T @ r
        projector = np.eye(size) - np.linalg.pinv(c_jac) @ c_jac
        projected_norm = float(np.linalg.norm(projector @ gradient))
        c_norm = float(np.max(np.abs(c))) if c.size else 0.0
        if projected_norm < options.gtol and c_norm < ctol:
            break
        hessian = range_hessian(graph, anchors, measurements, z) + _pair_curvature(groups, positions, multipliers, dim)
        kkt = np.block([[hessian, c_jac.T], [c_jac, np.zeros((c.size, c.size))]])
        solution = np.linalg.lstsq(kkt, np.concatenate([-gradient, -c]), rcond=None)[0]
        z = z + solution[:size]
        multipliers = solution[size:]
        iterations += 1

    if not (projected_norm < options.gtol and c_norm < ctol):
        raise ConvergenceError(
            f"距離制約付き推定: 射影勾配 {projected_norm:.3e}、制約残差 {c_norm:.3e} が許容値に達しませんでした",
            [projected_norm, c_norm], iterations,
        )
    return _finish(graph, anchors, measurements, z, projected_norm, iterations, c_norm)


def _rp_parameterization(graph: RangingGraph, groups: Sequence[RigidGroup]) -> Tuple[Parameterization, int]:
    """
    各ロボットを (基準タグ位置, θ) で、グループ外のタグを位置そのもので表します。
    """
    dim, tag_count = graph.dim, graph.tag_count
    grouped = {t for g in groups for t in g.tags}
    free_tags = [t for t in range(tag_count) if t not in grouped]
    size = 3 * len(groups) + dim * len(free_tags)
    generator = np.array([[0.0, -1.0], [1.0, 0.0]])

    def to_positions(z: np.ndarray) -> np.ndarray:
        positions = np.zeros((tag_count, dim))
        for r, group in enumerate(groups):
            origin, theta = z[3 * r: 3 * r + 2], z[3 * r + 2]
            rotation = rotation_exp(theta, 2)
            for tag in group.tags:
                positions[tag] = origin + rotation @ group.relative_offset(tag)
        offset = 3 * len(groups)
        for index, tag in enumerate(free_tags):
            positions[tag] = z[offset + dim * index: offset + dim * (index + 1)]
        return positions

    def position_jacobian(z: np.ndarray) -> np.ndarray:
        jacobian = np.zeros((dim * tag_count, size))
        for r, group in enumerate(groups):
            rotation = rotation_exp(z[3 * r + 2], 2)
            for tag in group.tags:
                rows = slice(dim * tag, dim * (tag + 1))
                jacobian[rows, 3 * r: 3 * r + 2] = np.eye(2)
                jacobian[rows, 3 * r + 2] = generator @ rotation @ group.relative_offset(tag)
        offset = 3 * len(groups)
        for index, tag in enumerate(free_tags):
            jacobian[dim * tag: dim * (tag + 1), offset + dim * index: offset + dim * (index + 1)] = np.eye(dim)
        return jacobian

    def curvature(z: np.ndarray, position_gradient: np.ndarray) -> np.ndarray:
        # ∂²p/∂θ² = −exp([θ]×)p^r、それ以外の 2 階微分は 0
        gradient = position_gradient.reshape(tag_count, dim)
        matrix = np.zeros((size, size))
        for r, group in enumerate(groups):
            rotation = rotation_exp(z[3 * r + 2], 2)
            matrix[3 * r + 2, 3 * r + 2] = -sum(
                float(gradient[tag] @ (rotation @ group.relative_offset(tag))) for tag in group.tags)
        return matrix

    return Parameterization(to_positions, position_jacobian, curvature), size


def ls_localize_rp_constrained(
    graph: RangingGraph,
    anchors: Any,
    measurements: MeasurementSet,
    groups: Sequence[RigidGroup],
    initial_guess: Any,
    options: SolverOptions = SolverOptions(),
) -> LSResult:
    """
    相対位置制約 p̂_j − p̂_1 = exp([θ̂]×)p^r_{j1} の下で Q を最小化します（2次元のみ）。

    各ロボットを (基準タグ位置, θ) で表すため、制約はパラメータ化により厳密に満たされます。
    初期の θ は初期値を剛体姿勢へ射影して求めます。

    Raises:
        ValueError: 3次元の場合
        ConvergenceError: 縮約変数での勾配ノルムが gtol に達しない場合
    """
    if graph.dim != 2:
        raise ValueError("相対位置制約付きの推定は 2次元のみ対応しています")
    anchors, guess = _prepare(graph, anchors, measurements, initial_guess)
    parameterization, size = _rp_parameterization(graph, groups)

    start = np.zeros(size)
    for r, group in enumerate(groups):
        pose = project_to_rigid_pose(group, guess[list(group.tags)])
        start[3 * r: 3 * r + 2] = pose.position
        start[3 * r + 2] = float(pose.theta)
    grouped = {t for g in groups for t in g.tags}
    free_tags = [t for t in range(graph.tag_count) if t not in grouped]
    offset = 3 * len(groups)
    for index, tag in enumerate(free_tags):
        start[offset + 2 * index: offset + 2 * (index + 1)] = guess[tag]

    z, gradient_norm, iterations = _solve_parameterized(graph, anchors, measurements, parameterization, start, options)
    _require_optimal(gradient_norm, options, "ls_localize_rp_constrained", iterations)
    positions = parameterization.to_positions(z)
    return _finish(graph, anchors, measurements, positions.reshape(-1), gradient_norm, iterations, 0.0)


Estimator = Callable[[RangingGraph, np.ndarray, MeasurementSet, np.ndarray], LSResult]


def make_estimator(kind: str = "free", groups: Optional[Sequence[RigidGroup]] = None, options: SolverOptions = SolverOptions()) -> Estimator:
    """"free" / "D" / "RP" の推定器を返します。"""
    if kind == "free":
        return lambda graph, anchors, measurements, guess: ls_localize(graph, anchors, measurements, guess, options)
    if groups is None:
        raise ValueError(f"推定器 {kind} には剛体グループが必要です")
    if kind == "D":
        return lambda graph, anchors, measurements, guess: ls_localize_distance_constrained(
            graph, anchors, measurements, groups, guess, options)
    if kind == "RP":
        return lambda graph, anchors, measurements, guess: ls_localize_rp_constrained(
            graph, anchors, measurements, groups, guess, options)
    raise ValueError(f"未知の推定器です: {kind}")


# ---------------------------------------------------------------------------
# モンテカルロ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloStep:
    step: int
    graph: RangingGraph
    positions: np.ndarray


@dataclass
class TrialStats:
    """
    ステップ・タグごとの経験 MSE と 3σ 信頼限界

    errors はステップごとの (成功試行数, U) の二乗誤差 ε = ‖p̂_i − p_i‖²。
    """

    frame: pd.DataFrame
    errors: Dict[int, np.ndarray] = field(default_factory=dict)
    failures: Dict[int, int] = field(default_factory=dict)
    trials: int = 0

    def tag_mse(self, step: int, tag: int) -> float:
        rows = self.frame[(self.frame["step"] == step) & (self.frame["tag"] == tag)]
        return float(rows["mse"].iloc[0])


def _initial_scale(noise: NoiseModel, graph: RangingGraph, positions: np.ndarray) -> float:
    if noise.kind is NoiseKind.ADDITIVE:
        return noise.sigma
    distances = [float(np.linalg.norm(positions[i] - positions[j])) for i, j in graph.ranging_edges]
    return noise.sigma * float(np.median(distances))


def _run_trial(step: MonteCarloStep, trial: int, seed: int, noise: NoiseModel, estimator: Estimator, scale: float):
    rng = np.random.default_rng([seed, step.step, trial])
    graph = step.graph
    measurements = sample_measurements(graph, step.positions, noise, rng, seed=(seed, step.step, trial))
    truth = step.positions[: graph.tag_count]
    guess = truth + rng.standard_normal(truth.shape) * scale
    try:
        result = estimator(graph, step.positions[graph.tag_count:], measurements, guess)
    except (LocalizabilityError, np.linalg.LinAlgError) as e:
        return None, str(e)
    if not np.all(np.isfinite(result.positions)):
        return None, "有限でない推定値"
    return result.positions, None


def _summarize(step: int, estimates: np.ndarray, truth: np.ndarray) -> Tuple[List[Dict[str, Any]], np.ndarray]:
    trials = estimates.shape[0]
    errors = np.sum((estimates - truth[None]) ** 2, axis=2)
    rows = []
    for tag in range(truth.shape[0]):
        mse = float(np.mean(errors[:, tag]))
        var = float(np.var(errors[:, tag], ddof=1)) if trials > 1 else 0.0
        half_width = CONFIDENCE_FACTOR * np.sqrt(var) / np.sqrt(trials)
        if trials > truth.shape[1]:
            sign, logdet = np.linalg.slogdet(np.cov(estimates[:, tag, :], rowvar=False))
            logdet_cov = float(logdet) if sign > 0 else float("-inf")
        else:
            logdet_cov = float("nan")
        rows.append({
            "step": step, "tag": tag, "mse": mse, "var": var,
            "b_minus": mse - half_width, "b_plus": mse + half_width, "logdet_cov": logdet_cov,
        })
    return rows, errors


def monte_carlo(
    steps: Sequence[MonteCarloStep],
    estimator: Estimator,
    trials: int,
    noise: NoiseModel,
    seed: int,
    threads: Optional[int] = None,
    progress: bool = False,
    max_failure_rate: float = MAX_FAILURE_RATE,
) -> TrialStats:
    """
    ステップごとに M 回の測距・推定を行い、タグごとの MSE を集計します。

    試行 (step, trial) の乱数は default_rng([seed, step, trial]) から生成するため、
    スレッド数や実行順序に依存しません。初期値は真値にスケール σ のノイズを加えたものです。

    Args:
        steps: 評価する配置
        estimator: 推定器（make_estimator）
        trials (int): M（2 以上）
        noise (NoiseModel): ノイズモデル
        seed (int): 乱数シード
        threads (Optional[int]): ワーカー数（省略時は環境変数）
        progress (bool): tqdm の進捗表示
        max_failure_rate (float): これを超える失敗率で中断

    Returns:
        TrialStats: 集計結果

    Raises:
        EstimationFailureError: 推定の失敗率が max_failure_rate を超えた場合
    """
    if trials < 2:
        raise ValueError(f"試行回数は 2 以上である必要があります: {trials}")
    workers = threads if threads is not None else env.get_thread_count()
    rows: List[Dict[str, Any]] = []
    errors: Dict[int, np.ndarray] = {}
    failures: Dict[int, int] = {}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor, \
            tqdm(total=len(steps) * trials, desc="Monte Carlo", disable=not progress) as bar:
        for step in steps:
            positions = as_configuration(step.graph, step.positions)
            normalized = MonteCarloStep(step.step, step.graph, positions)
            scale = _initial_scale(noise, step.graph, positions)
            outcomes = []
            for outcome in executor.map(lambda t: _run_trial(normalized, t, seed, noise, estimator, scale), range(trials)):
                outcomes.append(outcome)
                bar.update(1)

            estimates = [estimate for estimate, _ in outcomes if estimate is not None]
            failed = trials - len(estimates)
            failures[step.step] = failed
            rate = failed / trials
            if rate > max_failure_rate:
                reasons = sorted({reason for _, reason in outcomes if reason})
                raise EstimationFailureError(
                    f"ステップ {step.step}: 推定の失敗率 {rate:.1%} が上限を超えました ({'; '.join(reasons[:3])})",
                    failures=failed, rate=rate,
                )
            if failed:
                logger.warning("ステップ %d: %d 試行の推定に失敗したため除外しました", step.step, failed)
            if len(estimates) < 2:
                raise EstimationFailureError(f"ステップ {step.step}: 成功した試行が 2 未満です", failures=failed, rate=rate)

            step_rows, step_errors = _summarize(step.step, np.stack(estimates), positions[: step.graph.tag_count])
            rows.extend(step_rows)
            errors[step.step] = step_errors
            logger.info("モンテカルロ: ステップ %d 完了 (試行 %d, 失敗 %d)", step.step, trials, failed)

    return TrialStats(pd.DataFrame(rows, columns=TRIAL_STATS_COLUMNS), errors, failures, trials)


def network_mse(stats: TrialStats) -> pd.DataFrame:
    """ネットワーク全体の MSE（試行ごとにタグ平均した ε の平均）と 3σ 信頼限界"""
    rows = []
    for step in sorted(stats.errors):
        per_trial = np.mean(stats.errors[step], axis=1)
        count = per_trial.size
        mse = float(np.mean(per_trial))
        var = float(np.var(per_trial, ddof=1)) if count > 1 else 0.0
        half_width = CONFIDENCE_FACTOR * np.sqrt(var) / np.sqrt(count)
        rows.append({
            "step": step, "mse": mse, "var": var, "b_minus": mse - half_width, "b_plus": mse + half_width,
            "trials": count, "failures": stats.failures.get(step, 0),
        })
    return pd.DataFrame(rows, columns=NETWORK_MSE_COLUMNS)
