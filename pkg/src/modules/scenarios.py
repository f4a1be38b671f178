"""
配備シナリオ

単輪車（モノサイクル）モデル、PI 速度制御、姿勢制御、矩形領域の反発ポテンシャルと、
それらを組み合わせた 2 つのシナリオ（構造物点検・剛体 UGV）を提供します。
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.modules.constrained import (
    ArmijoRule,
    RigidGroup,
    constraint_system,
    initial_primal_dual_state,
    primal_dual_step,
    project_to_rigid_pose,
    rotation_exp,
)
from src.modules.decentral import (
    RoundNetwork,
    distributed_aopt_gradient,
    distributed_dopt_gradient,
    distributed_eopt_gradient,
    power_iteration_eigvec,
)
from src.modules.estimation import (
    MAX_FAILURE_RATE,
    MonteCarloStep,
    TrialStats,
    ls_localize,
    make_estimator,
    monte_carlo,
    network_mse,
    sample_measurements,
)
from src.modules.fisher import NoiseModel, tag_fim
from src.modules.geometry_graph import RangingGraph, build_graph
from src.modules.potentials import (
    GradientField,
    PotentialKind,
    descent_step,
    localizability_report,
    potential_gradient,
    potential_value,
)
from src.utils.environment import EnvironmentUtils as env
from src.utils.exceptions import (
    BarrierViolationError,
    ConfigurationError,
    ConvergenceError,
    EigenvalueMultiplicityError,
    LocalizabilityError,
    SingularFisherError,
)
from src.utils.logging_config import get_logger
from src.utils.scenario_config import DistributedSection, ScenarioConfig

logger = get_logger(__name__)

TRACE_COLUMNS = ["step", "node", "role", "x", "y", "actual_x", "actual_y"]
POTENTIAL_COLUMNS = ["step", "J_loc", "J_con", "potential", "violation", "tracking_error", "skipped"]
BARRIER_BACKTRACKS = 30

# 計画の失敗として扱いステップを飛ばす例外
_PLANNING_ERRORS = (SingularFisherError, EigenvalueMultiplicityError, ConvergenceError)


# ---------------------------------------------------------------------------
# ロボットモデル
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobotState:
    """
    単輪車ロボットの状態

    x, y はロボット中心、theta は向き。offset は送受信機のロボット座標系での搭載位置 (α, β)。
    """

    x: float
    y: float
    theta: float
    offset: Tuple[float, float] = (0.0, 0.0)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def mounted(self, body_offset: Any) -> np.ndarray:
        """ロボット座標系の点 body_offset のワールド座標"""
        return self.center + rotation_exp(self.theta, 2) @ np.asarray(body_offset, dtype=float)

    def transceiver(self) -> np.ndarray:
        return self.mounted(self.offset)

    @classmethod
    def from_transceiver(cls, position: Any, theta: float, offset: Sequence[float]) -> "RobotState":
        """送受信機が position に来るようにロボット中心を決めます。"""
        center = np.asarray(position, dtype=float) - rotation_exp(theta, 2) @ np.asarray(offset, dtype=float)
        return cls(float(center[0]), float(center[1]), float(theta), (float(offset[0]), float(offset[1])))


def wrap_angle(angle: float) -> float:
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


def monocycle_step(state: RobotState, v: float, omega: float, dt: float, dt_max: float = 0.01) -> RobotState:
    """
    単輪車モデル ẋ = v cosθ, ẏ = v sinθ, θ̇ = ω を陽的 Euler 法で dt だけ積分します。

    各サブステップが dt_max 以下になるよう分割します。
    """
    if dt <= 0.0 or dt_max <= 0.0:
        raise ValueError(f"dt と dt_max は正の値である必要があります: dt={dt}, dt_max={dt_max}")
    substeps = max(1, int(math.ceil(dt / dt_max - 1e-12)))
    h = dt / substeps
    x, y, theta = state.x, state.y, state.theta
    for _ in range(substeps):
        x += h * v * math.cos(theta)
        y += h * v * math.sin(theta)
        theta += h * omega
    return RobotState(x, y, theta, state.offset)


# ---------------------------------------------------------------------------
# 速度制御
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerGains:
    kp: float = 3.0
    ki: float = 0.5

    def __post_init__(self):
        if self.kp <= 0.0 or self.ki <= 0.0:
            raise ConfigurationError(f"制御ゲインは正の値である必要があります: kp={self.kp}, ki={self.ki}", "scenario.kp")


def velocity_transform(theta: float, alpha: float, beta: float) -> np.ndarray:
    """
    送受信機の平面速度 ũ を (v, ω) に変換する行列 T(θ)

    T(θ) = (1/α)[[αc − βs, αs + βc], [−s, c]]

    Raises:
        ConfigurationError: α = 0 の場合
    """
    if alpha == 0.0:
        raise ConfigurationError("送受信機の搭載位置は α ≠ 0 である必要があります", "scenario.transceiver_offset")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[alpha * c - beta * s, alpha * s + beta * c], [-s, c]]) / alpha


@dataclass(frozen=True)
class PIOutput:
    velocity: np.ndarray
    integral: np.ndarray


def pi_velocity_controller(target: Any, measured_position: Any, gains: ControllerGains, dt: float,
                           integral: Optional[Any] = None) -> PIOutput:
    """
    PI 則 ũ = K_p(p_d − p) + K_i∫(p_d − p)。

    積分は陽的 Euler 法で、出力には更新前の積分値を使います。
    """
    error = np.asarray(target, dtype=float) - np.asarray(measured_position, dtype=float)
    accumulated = np.zeros_like(error) if integral is None else np.asarray(integral, dtype=float)
    velocity = gains.kp * error + gains.ki * accumulated
    return PIOutput(velocity, accumulated + error * dt)


class PIVelocityController:
    """1 台のロボットの送受信機位置を追従させる PI 制御器"""

    def __init__(self, gains: ControllerGains, offset: Sequence[float]):
        self.gains = gains
        self.alpha, self.beta = float(offset[0]), float(offset[1])
        velocity_transform(0.0, self.alpha, self.beta)
        self.integral = np.zeros(2)

    def reset(self) -> None:
        self.integral = np.zeros(2)

    def command(self, state: RobotState, target: Any, dt: float) -> Tuple[float, float]:
        output = pi_velocity_controller(target, state.transceiver(), self.gains, dt, self.integral)
        self.integral = output.integral
        v, omega = velocity_transform(state.theta, self.alpha, self.beta) @ output.velocity
        return float(v), float(omega)


@dataclass(frozen=True)
class PoseGains:
    position: float = 1.0
    heading: float = 2.0
    tolerance: float = 0.02


def pose_controller(state: RobotState, target_center: Any, target_heading: float, gains: PoseGains) -> Tuple[float, float]:
    """
    比例制御による姿勢追従

    目標から tolerance 以上離れている間は目標方向へ進み（方位差が π/2 を超える場合は後退）、
    近づいた後はその場で目標の向きへ回転します。
    """
    error = np.asarray(target_center, dtype=float) - state.center
    distance = float(np.linalg.norm(error))
    if distance > gains.tolerance:
        bearing = wrap_angle(math.atan2(error[1], error[0]) - state.theta)
        direction = 1.0
        if abs(bearing) > math.pi / 2:
            direction = -1.0
            bearing = wrap_angle(bearing + math.pi)
        return direction * gains.position * distance * math.cos(bearing), gains.heading * bearing
    return 0.0, gains.heading * wrap_angle(target_heading - state.theta)


# ---------------------------------------------------------------------------
# 反発ポテンシャル
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    influence: float = 1.5

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigurationError(f"箱の内部が空です: {self}", "scenario.boxes")
        if self.influence <= 0.0:
            raise ConfigurationError(f"影響距離は正の値である必要があります: {self.influence}", "scenario.influence_distance")

    def contains(self, position: Any) -> bool:
        x, y = float(position[0]), float(position[1])
        return self.x_min < x < self.x_max and self.y_min < y < self.y_max

    def edges(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        corners = [
            np.array([self.x_min, self.y_min]), np.array([self.x_max, self.y_min]),
            np.array([self.x_max, self.y_max]), np.array([self.x_min, self.y_max]),
        ]
        return [(corners[k], corners[(k + 1) % 4]) for k in range(4)]


def _nearest_on_segment(point: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    direction = end - start
    t = float(np.clip((point - start) @ direction / (direction @ direction), 0.0, 1.0))
    return start + t * direction


def repulsive_box_gradient(position: Any, boxes: Sequence[BoundingBox]) -> Tuple[float, np.ndarray]:
    """
    箱の各辺からの反発ポテンシャル Σ 0.5(1/d − 1/d_s)²（d < d_s の辺のみ）と勾配

    Raises:
        BarrierViolationError: 位置が箱の辺上または外側にある場合
    """
    point = np.asarray(position, dtype=float)
    value = 0.0
    gradient = np.zeros(2)
    for box in boxes:
        if not box.contains(point):
            raise BarrierViolationError(f"位置 {point.tolist()} が領域 {box} の外にあります", point.tolist())
        for start, end in box.edges():
            offset = point - _nearest_on_segment(point, start, end)
            distance = float(np.linalg.norm(offset))
            if distance >= box.influence:
                continue
            excess = 1.0 / distance - 1.0 / box.influence
            value += 0.5 * excess ** 2
            gradient += -excess / distance ** 2 * (offset / distance)
    return value, gradient


# ---------------------------------------------------------------------------
# ネットワークの組み立て
# ---------------------------------------------------------------------------

def complete_ranging_pairs(tag_count: int, anchor_count: int) -> List[Tuple[int, int]]:
    """タグを含むすべてのノード対"""
    node_count = tag_count + anchor_count
    return [(i, j) for i in range(tag_count) for j in range(i + 1, node_count)]


def build_network(config: ScenarioConfig) -> Tuple[RangingGraph, np.ndarray, NoiseModel]:
    network = config.network
    tag_count, anchor_count = len(network.tags), len(network.anchors)
    pairs = network.edges if network.edges is not None else complete_ranging_pairs(tag_count, anchor_count)
    graph = build_graph(network.dim, tag_count, anchor_count, pairs)
    positions = np.array(network.tags + network.anchors, dtype=float)
    return graph, positions, NoiseModel(config.noise.kind, config.noise.sigma)


def groups_from_config(config: ScenarioConfig) -> List[RigidGroup]:
    return [
        RigidGroup(g.robot, tuple(g.tags), {t: offset for t, offset in zip(g.tags, g.offsets)})
        for g in config.constraints.groups
    ]


def _require_planar(config: ScenarioConfig) -> None:
    if config.network.dim != 2:
        raise ConfigurationError("シナリオは 2 次元のみ対応しています", "network.dim")


# ---------------------------------------------------------------------------
# 結果
# ---------------------------------------------------------------------------

@dataclass
class ScenarioTrace:
    """
    シナリオ実行の記録

    frame はステップ・ノードごとの計画位置と実位置、potentials はステップごとのポテンシャル。
    """

    name: str
    frame: pd.DataFrame
    potentials: pd.DataFrame
    summary: Dict[str, Any]
    graph: RangingGraph
    final_positions: np.ndarray
    monte_carlo: Optional[TrialStats] = None
    network_mse: Optional[pd.DataFrame] = None
    mode: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def potential_at(self, step: int, column: str = "potential") -> float:
        rows = self.potentials[self.potentials["step"] == step]
        return float(rows[column].iloc[0])


def _node_rows(step: int, graph: RangingGraph, planned: np.ndarray, actual: np.ndarray) -> List[Dict[str, Any]]:
    return [
        {
            "step": step, "node": node, "role": "tag" if graph.is_tag(node) else "anchor",
            "x": float(planned[node, 0]), "y": float(planned[node, 1]),
            "actual_x": float(actual[node, 0]), "actual_y": float(actual[node, 1]),
        }
        for node in range(graph.node_count)
    ]


def _safe_potential(kind: str, graph: RangingGraph, positions: np.ndarray, noise: NoiseModel) -> float:
    try:
        return potential_value(kind, tag_fim(graph, positions, noise))
    except SingularFisherError:
        return float("inf")


def _run_monte_carlo(config: ScenarioConfig, steps: List[MonteCarloStep], kind: str,
                     groups: Optional[Sequence[RigidGroup]], noise: NoiseModel,
                     trials: Optional[int] = None) -> Tuple[Optional[TrialStats], Optional[pd.DataFrame]]:
    if not config.montecarlo.enabled or not steps:
        return None, None
    estimator = make_estimator(kind, groups)
    max_failure_rate = env.get_max_failure_rate(MAX_FAILURE_RATE)
    stats = monte_carlo(steps, estimator, trials or config.montecarlo.trials, noise, config.seed,
                        progress=config.montecarlo.progress, max_failure_rate=max_failure_rate)
    return stats, network_mse(stats)


# ---------------------------------------------------------------------------
# 点検シナリオ
# ---------------------------------------------------------------------------

def inspection_waypoint(tag: int, tag_count: int, step: int, config: ScenarioConfig) -> np.ndarray:
    """タグ tag の第 step 経由点 [(tag+1)L/(U+1), min(a·step, H)]"""
    scenario = config.scenario
    x = (tag + 1) * scenario.structure_length / (tag_count + 1)
    return np.array([x, min(scenario.waypoint_spacing * step, scenario.structure_height)])


def _boxes_by_anchor(config: ScenarioConfig, graph: RangingGraph) -> Dict[int, BoundingBox]:
    boxes = {}
    for i, box in enumerate(config.scenario.boxes):
        if not graph.is_anchor(box.anchor):
            raise ConfigurationError(f"ノード {box.anchor} はアンカーではありません", f"scenario.boxes[{i}].anchor")
        boxes[box.anchor] = BoundingBox(box.x_min, box.x_max, box.y_min, box.y_max, config.scenario.influence_distance)
    return boxes


def box_potential(positions: np.ndarray, boxes: Dict[int, BoundingBox]) -> GradientField:
    """J_con とアンカーごとの勾配"""
    total = 0.0
    gradients = {}
    for anchor, box in boxes.items():
        value, gradient = repulsive_box_gradient(positions[anchor], [box])
        total += value
        gradients[anchor] = gradient
    return GradientField(gradients, total)


def localization_gradient(kind: str, graph: RangingGraph, positions: np.ndarray, noise: NoiseModel,
                          mobile: Sequence[int], distributed: DistributedSection,
                          rng: Optional[np.random.Generator] = None) -> GradientField:
    """
    局在性ポテンシャルの勾配（distributed.enabled なら分散計算）

    分散計算では値を中央で補います。
    """
    if not distributed.enabled:
        return potential_gradient(kind, graph, positions, noise, mobile)

    network = RoundNetwork(graph, record=False)
    kind = PotentialKind(kind).value
    if kind == "E":
        estimate = power_iteration_eigvec(network, positions, noise, inner_rounds=distributed.inner_rounds,
                                          outer_iters=distributed.outer_iters, rng=rng)
        result = distributed_eopt_gradient(network, positions, noise, estimate, mobile)
    else:
        solve = distributed_dopt_gradient if kind == "D" else distributed_aopt_gradient
        result = solve(network, positions, noise, mobile, eta=distributed.eta, tol=distributed.tol,
                       max_rounds=distributed.max_rounds, settle_rounds=distributed.settle_rounds,
                       solver=distributed.solver)
    logger.debug("分散勾配 %s: %d ラウンド", kind, network.round)
    return GradientField(result.gradients, _safe_potential(kind, graph, positions, noise))


def _keep_inside(previous: np.ndarray, proposed: np.ndarray, boxes: Dict[int, BoundingBox]) -> np.ndarray:
    """箱を越える移動は内側に収まるまで半分に縮めます。"""
    updated = proposed.copy()
    for anchor, box in boxes.items():
        move = proposed[anchor] - previous[anchor]
        for _ in range(BARRIER_BACKTRACKS):
            if box.contains(previous[anchor] + move):
                break
            move = 0.5 * move
        else:
            move = np.zeros_like(move)
        updated[anchor] = previous[anchor] + move
    return updated


def _estimated_positions(graph: RangingGraph, positions: np.ndarray, noise: NoiseModel,
                         rng: np.random.Generator) -> np.ndarray:
    """タグ位置を 1 回の最小二乗推定で置き換えた配置（失敗時は真値）"""
    tag_count = graph.tag_count
    measurements = sample_measurements(graph, positions, noise, rng)
    try:
        result = ls_localize(graph, positions[tag_count:], measurements, positions[:tag_count])
    except LocalizabilityError as e:
        logger.warning("推定に失敗したため真の位置で計画します: %s", e)
        return positions
    planned = positions.copy()
    planned[:tag_count] = result.positions
    return planned


class _Fleet:
    """送受信機を 1 つ搭載したロボット群と PI 追従"""

    def __init__(self, positions: np.ndarray, config: ScenarioConfig):
        scenario = config.scenario
        gains = ControllerGains(scenario.kp, scenario.ki)
        self.dt, self.dt_max = scenario.dt, scenario.dt_max
        self.robots = [
            RobotState.from_transceiver(p, scenario.initial_heading, scenario.transceiver_offset) for p in positions
        ]
        self.controllers = [PIVelocityController(gains, scenario.transceiver_offset) for _ in positions]

    def positions(self) -> np.ndarray:
        return np.array([robot.transceiver() for robot in self.robots])

    def track(self, start: np.ndarray, goal: np.ndarray, duration: float) -> None:
        """start から goal へ線形補間した目標を duration の間追従します。"""
        ticks = max(1, int(round(duration / self.dt)))
        for tick in range(1, ticks + 1):
            target = start + (goal - start) * tick / ticks
            for k, (robot, controller) in enumerate(zip(self.robots, self.controllers)):
                v, omega = controller.command(robot, target[k], self.dt)
                self.robots[k] = monocycle_step(robot, v, omega, self.dt, self.dt_max)


def run_inspection_scenario(config: ScenarioConfig) -> ScenarioTrace:
    """
    構造物点検シナリオを実行します。

    タグは構造物に沿った経由点を進み、アンカーは K_l J + K_c J_con のステップ幅制限付き降下で
    移動します。各ロボットは単輪車モデル上の PI 制御で計画位置を追従します。
    F_U が特異になったステップはアンカーを動かさずに記録します。

    Args:
        config (ScenarioConfig): シナリオ設定

    Returns:
        ScenarioTrace: 実行記録

    Raises:
        BarrierViolationError: アンカーが箱の外にある場合
    """
    _require_planar(config)
    graph, positions, noise = build_network(config)
    potential, scenario = config.potential, config.scenario
    boxes = _boxes_by_anchor(config, graph)
    anchors = list(graph.anchors)
    tag_count = graph.tag_count

    planned = positions.copy()
    fleet = _Fleet(planned, config)
    rows = _node_rows(0, graph, planned, fleet.positions())
    records: List[Dict[str, Any]] = []
    mc_steps = [MonteCarloStep(0, graph, planned.copy())]
    skipped: List[int] = []

    def record(step: int, tracking_error: float, was_skipped: bool) -> None:
        j_loc = _safe_potential(potential.kind, graph, planned, noise)
        j_con = box_potential(planned, boxes).value or 0.0
        records.append({
            "step": step, "J_loc": j_loc, "J_con": j_con,
            "potential": potential.gain_localization * j_loc + potential.gain_constraint * j_con,
            "violation": 0.0, "tracking_error": tracking_error, "skipped": was_skipped,
        })

    record(0, 0.0, False)
    logger.info("点検シナリオ開始: タグ %d, アンカー %d, ステップ %d", tag_count, len(anchors), scenario.steps)

    for step in range(1, scenario.steps + 1):
        previous = planned.copy()
        basis = planned
        if scenario.plan_on_estimates:
            basis = _estimated_positions(graph, planned, noise, np.random.default_rng([config.seed, step, 0, 1]))

        was_skipped = False
        try:
            loc = localization_gradient(potential.kind, graph, basis, noise, anchors, config.distributed,
                                        np.random.default_rng([config.seed, step, 0, 2]))
            combined = loc.scaled(potential.gain_localization).combine(box_potential(planned, boxes),
                                                                       potential.gain_constraint)
            planned = _keep_inside(previous, descent_step(planned, combined, 1.0, potential.step_cap), boxes)
        except _PLANNING_ERRORS as e:
            logger.warning("ステップ %d: 計画を飛ばします (%s)", step, e)
            skipped.append(step)
            was_skipped = True

        for tag in range(tag_count):
            planned[tag] = inspection_waypoint(tag, tag_count, step, config)

        fleet.track(previous, planned, scenario.step_duration)
        actual = fleet.positions()
        tracking_error = float(np.max(np.linalg.norm(actual - planned, axis=1)))
        rows.extend(_node_rows(step, graph, planned, actual))
        record(step, tracking_error, was_skipped)
        if step % config.montecarlo.every == 0 or step == scenario.steps:
            mc_steps.append(MonteCarloStep(step, graph, planned.copy()))
        logger.debug("ステップ %d: J=%.6g, 追従誤差 %.3f", step, records[-1]["J_loc"], tracking_error)

    potentials = pd.DataFrame(records, columns=POTENTIAL_COLUMNS)
    stats, mse = _run_monte_carlo(config, mc_steps, "free", None, noise)

    transient = min(5, scenario.steps)
    summary: Dict[str, Any] = {
        "scenario": "inspection",
        "potential_kind": potential.kind,
        "steps": scenario.steps,
        "skipped_steps": skipped,
        "J_loc_initial": records[0]["J_loc"],
        "J_loc_final": records[-1]["J_loc"],
        "J_loc_decrease": records[0]["J_loc"] - records[-1]["J_loc"],
        "potential_initial": records[0]["potential"],
        "potential_final": records[-1]["potential"],
        "max_tracking_error": float(potentials["tracking_error"].iloc[transient + 1:].max())
        if scenario.steps > transient else 0.0,
        "final_report": localizability_report(graph, planned, noise),
    }
    if stats is not None:
        first, last = mc_steps[0].step, mc_steps[-1].step
        summary["tag_mse"] = {
            f"tag{tag}": {"initial": stats.tag_mse(first, tag), "final": stats.tag_mse(last, tag)}
            for tag in range(tag_count)
        }
    logger.info("点検シナリオ終了: J %.6g → %.6g", summary["J_loc_initial"], summary["J_loc_final"])

    return ScenarioTrace("inspection", pd.DataFrame(rows, columns=TRACE_COLUMNS), potentials, summary,
                         graph, planned, stats, mse)


# ---------------------------------------------------------------------------
# UGV シナリオ
# ---------------------------------------------------------------------------

class _RigidFleet:
    """剛体グループごとに 1 台の単輪車ロボット（タグはロボットに固定）"""

    def __init__(self, groups: Sequence[RigidGroup], positions: np.ndarray, config: ScenarioConfig):
        scenario = config.scenario
        self.groups = list(groups)
        self.dt, self.dt_max = scenario.dt, scenario.dt_max
        self.gains = PoseGains(scenario.pose_gain_position, scenario.pose_gain_heading, scenario.pose_tolerance)
        self.robots = []
        for index, group in enumerate(self.groups):
            if index == 0:
                robot = RobotState(float(scenario.robot_position[0]), float(scenario.robot_position[1]),
                                   float(scenario.robot_heading))
            else:
                pose = project_to_rigid_pose(group, positions[list(group.tags)])
                center = pose.position - pose.rotation @ group.body_offsets[group.reference]
                robot = RobotState(float(center[0]), float(center[1]), float(pose.theta))
            self.robots.append(robot)

    def place(self, positions: np.ndarray) -> np.ndarray:
        """タグの実位置をロボット姿勢から書き込んだ配置"""
        placed = positions.copy()
        for group, robot in zip(self.groups, self.robots):
            for tag in group.tags:
                placed[tag] = robot.mounted(group.body_offsets[tag])
        return placed

    def track(self, targets: Sequence[Tuple[np.ndarray, float]], duration: float) -> None:
        ticks = max(1, int(round(duration / self.dt)))
        for _ in range(ticks):
            for k, (robot, (center, heading)) in enumerate(zip(self.robots, targets)):
                v, omega = pose_controller(robot, center, heading, self.gains)
                self.robots[k] = monocycle_step(robot, v, omega, self.dt, self.dt_max)


def _pose_targets(groups: Sequence[RigidGroup], config: np.ndarray) -> List[Tuple[np.ndarray, float]]:
    """計画配置を剛体姿勢へ射影し、ロボット中心と向きの目標にします。"""
    targets = []
    for group in groups:
        pose = project_to_rigid_pose(group, config[list(group.tags)])
        center = pose.position - pose.rotation @ group.body_offsets[group.reference]
        targets.append((center, float(pose.theta)))
    return targets


def run_ugv_scenario(config: ScenarioConfig, mode: Optional[str] = None, trials: Optional[int] = None) -> ScenarioTrace:
    """
    剛体 UGV シナリオを実行します。

    制約付きポテンシャル J_c/σ² に主双対法を適用して経由点を生成し、waypoint_every 反復ごとに
    剛体姿勢へ射影した目標を比例姿勢制御で追従します。最後の経由点は settle_time の間追従します。
    先頭グループのロボットは scenario.robot_position / robot_heading から始まり、そのタグの初期位置は
    ロボット姿勢から計算し直します。

    Args:
        config (ScenarioConfig): シナリオ設定
        mode (Optional[str]): "D" または "RP"（省略時は constraints.mode）
        trials (Optional[int]): モンテカルロの試行回数（省略時は montecarlo.trials）

    Returns:
        ScenarioTrace: 実行記録（モンテカルロは初期と最終の実配置）
    """
    _require_planar(config)
    mode = mode or config.constraints.mode
    if mode not in ("D", "RP"):
        raise ConfigurationError(f"制約は D または RP です: {mode}", "constraints.mode")
    graph, positions, noise = build_network(config)
    groups = groups_from_config(config)
    if not groups:
        raise ConfigurationError("剛体グループが必要です", "constraints.groups")
    settings, scenario = config.constraints, config.scenario
    tags = list(graph.tags)
    scale = 1.0 / noise.sigma ** 2

    fleet = _RigidFleet(groups, positions, config)
    start = fleet.place(positions)
    constraints = constraint_system(mode, groups, graph.tag_count)
    armijo = ArmijoRule(settings.armijo_initial_step, settings.armijo_contraction,
                        settings.armijo_sufficient_decrease, settings.armijo_max_backtracks)

    def evaluate(configuration: np.ndarray) -> Tuple[float, np.ndarray]:
        value, gradient = constraints.potential(graph, configuration, noise, tags)
        return scale * value, scale * gradient.as_array(graph.node_count, graph.dim)

    def constrained_value(configuration: np.ndarray) -> float:
        try:
            return float(constraints.potential(graph, configuration, noise, tags)[0])
        except SingularFisherError:
            return float("inf")

    state = initial_primal_dual_state(start, constraints, settings.delta, settings.penalty)
    actual = start
    rows = _node_rows(0, graph, start, actual)
    records = [{
        "step": 0, "J_loc": constrained_value(start), "J_con": 0.0, "potential": constrained_value(start),
        "violation": constraints.violation(start), "tracking_error": 0.0, "skipped": False,
    }]
    rejected = 0
    logger.info("UGV シナリオ開始 (mode=%s, 反復 %d)", mode, settings.iterations)

    for iteration in range(1, settings.iterations + 1):
        state = primal_dual_step(state, evaluate, constraints, tags, armijo)
        rejected += int(state.rejected)
        value = constrained_value(state.config)
        tracking_error = float("nan")
        if iteration % settings.waypoint_every == 0 or iteration == settings.iterations:
            fleet.track(_pose_targets(groups, state.config), scenario.step_duration)
            actual = fleet.place(state.config)
            tracking_error = float(np.max(np.linalg.norm(actual[tags] - state.config[tags], axis=1)))
            rows.extend(_node_rows(iteration, graph, state.config, actual))
        records.append({
            "step": iteration, "J_loc": value, "J_con": 0.0, "potential": value,
            "violation": constraints.violation(state.config, state.extra), "tracking_error": tracking_error,
            "skipped": state.rejected,
        })

    targets = _pose_targets(groups, state.config)
    fleet.track(targets, scenario.settle_time)
    final = fleet.place(state.config)
    rows.extend(_node_rows(settings.iterations + 1, graph, state.config, final))

    mc_steps = [MonteCarloStep(0, graph, start), MonteCarloStep(settings.iterations, graph, final)]
    stats, mse = _run_monte_carlo(config, mc_steps, mode, groups, noise, trials)

    summary: Dict[str, Any] = {
        "scenario": "ugv",
        "mode": mode,
        "iterations": settings.iterations,
        "rejected_steps": rejected,
        "J_c_initial": records[0]["J_loc"],
        "J_c_final": records[-1]["J_loc"],
        "J_c_actual_final": constrained_value(final),
        "planned_violation": constraints.violation(state.config, state.extra),
        "actual_violation": constraints.violation(final),
        "final_tracking_error": float(np.max(np.linalg.norm(final[tags] - state.config[tags], axis=1))),
    }
    if mse is not None:
        summary["mse_initial"] = float(mse["mse"].iloc[0])
        summary["mse_final"] = float(mse["mse"].iloc[-1])
    logger.info("UGV シナリオ終了 (mode=%s): J_c %.6g → %.6g", mode, summary["J_c_initial"], summary["J_c_final"])

    return ScenarioTrace("ugv", pd.DataFrame(rows, columns=TRACE_COLUMNS), pd.DataFrame(records, columns=POTENTIAL_COLUMNS),
                         summary, graph, final, stats, mse, mode)


def run_scenario(config: ScenarioConfig, mode: Optional[str] = None) -> ScenarioTrace:
    if config.scenario.name == "ugv":
        return run_ugv_scenario(config, mode)
    return run_inspection_scenario(config)
