import math
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from src.modules.potentials import potential_gradient
from src.modules.scenarios import (
    POTENTIAL_COLUMNS,
    TRACE_COLUMNS,
    BoundingBox,
    ControllerGains,
    PIVelocityController,
    PoseGains,
    RobotState,
    complete_ranging_pairs,
    inspection_waypoint,
    localization_gradient,
    monocycle_step,
    pi_velocity_controller,
    pose_controller,
    repulsive_box_gradient,
    run_inspection_scenario,
    run_ugv_scenario,
    velocity_transform,
    wrap_angle,
)
from src.utils.exceptions import BarrierViolationError, ConfigurationError
from src.utils.scenario_config import DistributedSection, default_config, parse_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config" / "scenarios"


def _short_inspection(steps=3):
    config = default_config("inspection")
    return replace(
        config,
        scenario=replace(config.scenario, steps=steps),
        montecarlo=replace(config.montecarlo, enabled=False),
    )


def _short_ugv(iterations=4):
    config = default_config("ugv")
    return replace(
        config,
        constraints=replace(config.constraints, iterations=iterations, waypoint_every=2),
        scenario=replace(config.scenario, settle_time=1.0),
        montecarlo=replace(config.montecarlo, enabled=False),
    )


def test_monocycle_straight_line():
    """ω = 0 では向きの方向へ v·dt だけ進むことを確認"""
    state = monocycle_step(RobotState(0.0, 0.0, 0.0), 1.0, 0.0, 1.0)
    assert (state.x, state.y, state.theta) == pytest.approx((1.0, 0.0, 0.0)), "直進の結果が不正です"


def test_monocycle_arc():
    """v = ω = 1 で 1/4 周すると (1, 1) に着くことを確認"""
    state = monocycle_step(RobotState(0.0, 0.0, 0.0), 1.0, 1.0, math.pi / 2, dt_max=1e-4)
    assert state.x == pytest.approx(1.0, abs=1e-3), "円弧の x が不正です"
    assert state.y == pytest.approx(1.0, abs=1e-3), "円弧の y が不正です"
    assert state.theta == pytest.approx(math.pi / 2), "円弧後の向きが不正です"
    with pytest.raises(ValueError):
        monocycle_step(state, 1.0, 0.0, 0.0)


def test_robot_transceiver_round_trip():
    """送受信機位置からロボット中心を決めると同じ送受信機位置に戻ることを確認"""
    robot = RobotState.from_transceiver([2.0, -1.0], 0.8, (0.5, 0.5))
    assert np.allclose(robot.transceiver(), [2.0, -1.0]), "送受信機位置が一致しません"
    assert wrap_angle(0.5 + 2 * math.pi) == pytest.approx(0.5), "角度の正規化が不正です"


def test_velocity_transform():
    """T(θ) が送受信機速度を (v, ω) に戻すことを確認"""
    assert np.allclose(velocity_transform(0.0, 1.0, 0.0) @ [1.0, 0.0], [1.0, 0.0]), "θ = 0 での変換が不正です"

    theta, alpha, beta = 0.7, 0.5, 0.3
    c, s = math.cos(theta), math.sin(theta)
    kinematics = np.array([[c, -alpha * s - beta * c], [s, alpha * c - beta * s]])
    assert np.allclose(velocity_transform(theta, alpha, beta) @ kinematics, np.eye(2)), "逆変換になっていません"
    with pytest.raises(ConfigurationError):
        velocity_transform(0.3, 0.0, 1.0)


def test_pi_controller():
    """PI 則の出力と積分の更新を確認"""
    gains = ControllerGains(3.0, 0.5)
    idle = pi_velocity_controller([1.0, 1.0], [1.0, 1.0], gains, 0.1)
    assert np.allclose(idle.velocity, 0.0) and np.allclose(idle.integral, 0.0), "誤差 0 で出力があります"

    output = pi_velocity_controller([1.0, 0.0], [0.0, 0.0], gains, 0.1, integral=[0.2, 0.0])
    assert np.allclose(output.velocity, [3.0 + 0.1, 0.0]), "PI 出力が不正です"
    assert np.allclose(output.integral, [0.3, 0.0]), "積分が更新されていません"
    with pytest.raises(ConfigurationError):
        ControllerGains(0.0, 1.0)


def test_pi_velocity_controller_command():
    """送受信機の追従指令が (v, ω) に変換されることを確認"""
    controller = PIVelocityController(ControllerGains(3.0, 0.5), (0.5, 0.5))
    robot = RobotState.from_transceiver([0.0, 0.0], 0.0, (0.5, 0.5))
    v, omega = controller.command(robot, [1.0, 0.0], 0.05)
    assert (v, omega) == pytest.approx((3.0, 0.0)), "速度指令が不正です"
    assert np.allclose(controller.integral, [0.05, 0.0]), "積分が更新されていません"
    controller.reset()
    assert np.allclose(controller.integral, 0.0), "積分がリセットされていません"


def test_pose_controller():
    """後方の目標へは後退し、到着後はその場で回転することを確認"""
    gains = PoseGains(1.0, 2.0, 0.02)
    v, omega = pose_controller(RobotState(0.0, 0.0, 0.0), [-1.0, 0.0], 0.0, gains)
    assert v == pytest.approx(-1.0) and omega == pytest.approx(0.0), "後退指令が不正です"

    v, omega = pose_controller(RobotState(0.0, 0.0, 0.0), [0.0, 0.0], 0.5, gains)
    assert v == 0.0 and omega == pytest.approx(1.0), "その場回転の指令が不正です"


def test_bounding_box_validation():
    """内部が空の箱がエラーになることを確認"""
    with pytest.raises(ConfigurationError):
        BoundingBox(1.0, 1.0, 0.0, 2.0)
    box = BoundingBox(0.0, 4.0, 0.0, 4.0)
    assert box.contains([2.0, 2.0]) and not box.contains([0.0, 2.0]), "内部判定が不正です"


def test_repulsive_gradient_matches_finite_differences():
    """箱の反発ポテンシャルの勾配が数値微分と一致することを確認"""
    boxes = [BoundingBox(0.0, 4.0, 0.0, 4.0, 1.5)]
    point = np.array([0.7, 1.1])
    value, gradient = repulsive_box_gradient(point, boxes)
    assert value > 0.0, "影響距離内でポテンシャルが 0 です"
    h = 1e-6
    numeric = np.array([
        (repulsive_box_gradient(point + step, boxes)[0] - repulsive_box_gradient(point - step, boxes)[0]) / (2 * h)
        for step in (np.array([h, 0.0]), np.array([0.0, h]))
    ])
    assert np.allclose(gradient, numeric, rtol=1e-5), "反発ポテンシャルの勾配が一致しません"
    assert gradient[0] < 0.0 and gradient[1] < 0.0, "勾配が辺の方向を向いていません"


def test_repulsive_gradient_outside_influence_and_box():
    """影響距離より遠ければ 0、箱の外ならエラーになることを確認"""
    boxes = [BoundingBox(0.0, 4.0, 0.0, 4.0, 1.5)]
    value, gradient = repulsive_box_gradient([2.0, 2.0], boxes)
    assert value == 0.0 and not np.any(gradient), "影響距離の外でポテンシャルがあります"
    with pytest.raises(BarrierViolationError):
        repulsive_box_gradient([5.0, 1.0], boxes)
    with pytest.raises(BarrierViolationError):
        repulsive_box_gradient([4.0, 1.0], boxes)


def test_complete_ranging_pairs():
    """完全測距グラフがアンカー間の対を含まないことを確認"""
    pairs = complete_ranging_pairs(2, 3)
    assert len(pairs) == 7, "ノード対の数が不正です"
    assert all(i < 2 for i, _ in pairs), "アンカー間の対が含まれています"


def test_inspection_waypoint_is_capped():
    """経由点の高さが構造物の高さで頭打ちになることを確認"""
    config = default_config("inspection")
    assert np.allclose(inspection_waypoint(0, 2, 3, config), [2.0, 0.3]), "経由点が不正です"
    assert inspection_waypoint(1, 2, 1000, config)[1] == pytest.approx(config.scenario.structure_height), \
        "高さが頭打ちになっていません"


def test_distributed_localization_gradient_matches_central(square_network, additive_noise):
    """分散計算を有効にした勾配が集中計算と一致することを確認"""
    graph, positions = square_network
    mobile = [2, 3, 4]
    distributed = localization_gradient("D", graph, positions, additive_noise, mobile, DistributedSection(enabled=True))
    central = potential_gradient("D", graph, positions, additive_noise, mobile)
    for node in mobile:
        assert np.allclose(distributed[node], central[node], rtol=1e-5, atol=1e-8), f"ノード {node} の勾配が一致しません"
    assert distributed.value == pytest.approx(central.value), "ポテンシャル値が一致しません"


def test_inspection_scenario_short_run():
    """短い点検シナリオでタグが経由点に進み、アンカーが箱の中に留まることを確認"""
    config = _short_inspection(steps=3)
    trace = run_inspection_scenario(config)
    assert list(trace.frame.columns) == TRACE_COLUMNS, "軌跡の列が不正です"
    assert list(trace.potentials.columns) == POTENTIAL_COLUMNS, "ポテンシャルの列が不正です"
    assert len(trace.frame) == 4 * 5, "軌跡の行数が不正です"
    assert len(trace.potentials) == 4, "ポテンシャルの行数が不正です"
    assert trace.summary["skipped_steps"] == [], "飛ばされたステップがあります"
    assert trace.monte_carlo is None, "モンテカルロが実行されました"

    for tag in range(2):
        assert np.allclose(trace.final_positions[tag], inspection_waypoint(tag, 2, 3, config)), "タグが経由点にありません"
    for box in config.scenario.boxes:
        region = BoundingBox(box.x_min, box.x_max, box.y_min, box.y_max)
        assert region.contains(trace.final_positions[box.anchor]), f"アンカー {box.anchor} が箱の外に出ました"
    assert np.isfinite(trace.potentials["tracking_error"]).all(), "追従誤差が有限ではありません"


def test_scenarios_require_planar_network():
    """3次元のネットワークではシナリオがエラーになることを確認"""
    config = _short_inspection()
    config = replace(config, network=replace(config.network, dim=3))
    with pytest.raises(ConfigurationError):
        run_inspection_scenario(config)


@pytest.mark.parametrize("mode", ["D", "RP"])
def test_ugv_scenario_short_run(mode):
    """短い UGV シナリオで J_c が減少し、実配置が剛体制約を満たすことを確認"""
    trace = run_ugv_scenario(_short_ugv(iterations=4), mode)
    assert trace.mode == mode, "制約の種類が記録されていません"
    assert len(trace.potentials) == 5, "反復ごとの記録数が不正です"
    assert trace.potential_at(1, "J_loc") < trace.potential_at(0, "J_loc"), "最初の反復で J_c が減少していません"
    assert trace.summary["actual_violation"] < 1e-8, "実配置が剛体制約を満たしていません"
    assert sorted(trace.frame["step"].unique()) == [0, 2, 4, 5], "経由点の記録ステップが不正です"
    distance = np.linalg.norm(trace.final_positions[0] - trace.final_positions[1])
    assert distance == pytest.approx(2.0), "タグ間距離が保たれていません"


def test_ugv_scenario_rejects_unknown_mode():
    """未知の制約の種類がエラーになることを確認"""
    with pytest.raises(ConfigurationError):
        run_ugv_scenario(_short_ugv(), "X")


def test_inspection_scenario_improves_tag_mse():
    """点検シナリオの 25 ステップ後にタグ 0 の MSE が初期の 1/5 以下になり、J_D が減少することを確認"""
    config = parse_config(CONFIG_DIR / "inspection.yaml")
    config = replace(
        config,
        scenario=replace(config.scenario, steps=25),
        montecarlo=replace(config.montecarlo, every=25, progress=False),
    )
    trace = run_inspection_scenario(config)
    stats = trace.monte_carlo
    assert stats is not None, "モンテカルロが実行されていません"
    assert stats.tag_mse(25, 0) <= stats.tag_mse(0, 0) / 5.0, \
        f"タグ 0 の MSE が十分に減少していません: {stats.tag_mse(0, 0)} → {stats.tag_mse(25, 0)}"
    assert trace.potential_at(25, "J_loc") < trace.potential_at(0, "J_loc"), "J_D が減少していません"
    assert trace.summary["skipped_steps"] == [], "飛ばされたステップがあります"


@pytest.mark.parametrize("mode", ["D", "RP"])
def test_ugv_scenario_full_run(mode):
    """既定の δ と 200 反復で J_c が減少し、制約違反が有界に保たれることを確認"""
    config = parse_config(CONFIG_DIR / "ugv.yaml")
    config = replace(config, montecarlo=replace(config.montecarlo, progress=False))
    trace = run_ugv_scenario(config, mode, trials=20)
    summary = trace.summary
    assert summary["iterations"] == 200, "反復回数が設定と一致しません"
    assert summary["J_c_final"] < summary["J_c_initial"], "J_c が減少していません"
    assert summary["planned_violation"] < 0.5, f"計画配置の制約違反が大きすぎます: {summary['planned_violation']}"
    assert np.isfinite(trace.potentials["violation"]).all(), "制約違反が有限ではありません"
    assert summary["rejected_steps"] <= 20, f"棄却されたステップが多すぎます: {summary['rejected_steps']}"
    assert summary["actual_violation"] < 1e-8, "実配置が剛体制約を満たしていません"
    assert sum(trace.monte_carlo.failures.values()) == 0, "制約付き推定が失敗しました"
