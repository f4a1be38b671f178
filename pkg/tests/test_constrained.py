from dataclasses import replace

import numpy as np
import pytest

from src.modules.constrained import (
    ArmijoRule,
    RigidGroup,
    constrained_crlb,
    constrained_potential_gradient,
    constraint_system,
    distance_constrained_potential_gradient,
    distance_constraints,
    distance_nullspace,
    initial_primal_dual_state,
    primal_dual_step,
    project_to_rigid_pose,
    rotation_exp,
    rotation_log,
    rp_constrained_crlb,
    rp_constraints,
    rp_potential_gradient,
)
from src.modules.fisher import NoiseModel, tag_fim

NOISE = NoiseModel("additive", 0.1)


def _central_difference(function, positions, nodes, h=1e-6):
    gradients = {}
    for node in nodes:
        values = np.zeros(positions.shape[1])
        for k in range(positions.shape[1]):
            plus, minus = positions.copy(), positions.copy()
            plus[node, k] += h
            minus[node, k] -= h
            values[k] = (function(plus) - function(minus)) / (2 * h)
        gradients[node] = values
    return gradients


def _relative_error(estimate, reference):
    nodes = sorted(reference)
    a = np.concatenate([estimate[n] for n in nodes])
    b = np.concatenate([reference[n] for n in nodes])
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_rotation_exp_log_round_trip():
    """回転の指数写像と対数写像が互いに逆であることを確認"""
    assert rotation_log(rotation_exp(0.4, 2)) == pytest.approx(0.4), "2次元の往復が一致しません"
    vector = np.array([0.1, -0.3, 0.2])
    assert np.allclose(rotation_log(rotation_exp(vector, 3)), vector), "3次元の往復が一致しません"
    rotation = rotation_exp(vector, 3)
    assert np.allclose(rotation @ rotation.T, np.eye(3)), "直交行列ではありません"
    with pytest.raises(ValueError):
        rotation_exp(0.1, 4)


def test_rigid_group_validation():
    """剛体グループの不正な定義がエラーになることを確認"""
    with pytest.raises(ValueError):
        RigidGroup(0, (0,), {0: [0.0, 0.0]})
    with pytest.raises(ValueError):
        RigidGroup(0, (0, 1), {0: [0.0, 0.0]})
    group = RigidGroup(0, (0, 1), {0: [1.0, 0.0], 1: [-1.0, 0.0]})
    assert group.target_distance(0, 1) == pytest.approx(2.0), "タグ間距離が不正です"
    with pytest.raises(ValueError):
        distance_constraints([group, RigidGroup(1, (1, 2), {1: [0.0, 0.0], 2: [1.0, 0.0]})], np.zeros((3, 2)))


def test_distance_constraints_at_feasible_configuration(ugv_start):
    """実現可能な配置で距離制約の残差が 0、ヤコビアンが 2R になることを確認"""
    graph, positions, group = ugv_start
    residual, jacobian = distance_constraints([group], positions, graph.tag_count)
    assert np.allclose(residual, 0.0, atol=1e-12), "残差が 0 ではありません"
    diff = positions[0] - positions[1]
    assert np.allclose(jacobian, [np.concatenate([2.0 * diff, -2.0 * diff])]), "ヤコビアンが不正です"


def test_distance_nullspace(ugv_start):
    """零空間の基底が制約のヤコビアンに直交し、次元が dim·U − 制約数であることを確認"""
    graph, positions, group = ugv_start
    basis = distance_nullspace([group], positions, graph.tag_count)
    _, jacobian = distance_constraints([group], positions, graph.tag_count)
    assert basis.shape == (4, 3), "基底の形状が不正です"
    assert np.linalg.matrix_rank(basis) == 3, "基底が一次独立ではありません"
    assert np.allclose(jacobian @ basis, 0.0, atol=1e-12), "基底がヤコビアンの零空間にありません"


def test_nullspace_with_ungrouped_tag():
    """グループに属さないタグには単位行列の列が加わることを確認"""
    group = RigidGroup(0, (0, 1), {0: [1.0, 0.0], 1: [-1.0, 0.0]})
    basis = distance_nullspace([group], np.array([[1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]]))
    assert basis.shape == (6, 5), "基底の形状が不正です"
    assert np.allclose(basis[4:, 3:], np.eye(2)), "独立タグの列が単位行列ではありません"


def test_bound_ordering(ugv_start):
    """F_U⁻¹ ⪰ B_D ⪰ B_RP（位置ブロック）を確認"""
    graph, positions, group = ugv_start
    block = tag_fim(graph, positions, NOISE)
    bound_d = constrained_crlb(block, distance_nullspace([group], positions, graph.tag_count))
    bound_rp = rp_constrained_crlb(graph, positions, NOISE, [group])
    assert not bound_d.pseudo_inverse and not bound_rp.pseudo_inverse, "制約付き FIM が特異です"
    scale = np.linalg.norm(np.linalg.inv(block))
    assert np.linalg.eigvalsh(np.linalg.inv(block) - bound_d.matrix)[0] > -1e-9 * scale, "F_U⁻¹ ⪰ B_D が成り立ちません"
    assert np.linalg.eigvalsh(bound_d.matrix - bound_rp.position_block)[0] > -1e-9 * scale, "B_D ⪰ B_RP が成り立ちません"
    assert bound_rp.trace <= bound_d.trace * (1 + 1e-9), "trace B_RP ≤ trace B_D が成り立ちません"
    assert bound_d.trace < np.trace(np.linalg.inv(block)), "trace B_D < trace F_U⁻¹ が成り立ちません"
    assert bound_rp.orientation_block.shape == (1, 1), "姿勢ブロックの形状が不正です"


def test_rp_substitution_matches_explicit_orientation(ugv_start):
    """実現可能な配置では θ を与えた場合と置換 Φ = p_j − p_1 の結果が一致することを確認"""
    graph, positions, group = ugv_start
    theta = -np.pi / 8
    explicit = rp_constrained_crlb(graph, positions, NOISE, [group], [theta])
    substituted = rp_constrained_crlb(graph, positions, NOISE, [group])
    assert np.allclose(explicit.matrix, substituted.matrix, rtol=1e-9, atol=1e-15), "B_RP が一致しません"

    evaluation = rp_constraints([group], positions, [theta], graph.tag_count)
    assert np.allclose(evaluation.residual, 0.0, atol=1e-12), "RP 制約の残差が 0 ではありません"
    assert np.allclose(evaluation.jacobian @ evaluation.nullspace, 0.0, atol=1e-12), "A_RP がヤコビアンの零空間にありません"


def test_distance_constrained_gradient_matches_finite_differences(ugv_start):
    """J_c(D) の解析勾配が数値微分と一致することを確認"""
    graph, positions, group = ugv_start
    nodes = list(range(graph.node_count))
    value, analytic = distance_constrained_potential_gradient([group], graph, positions, NOISE, nodes)
    numeric = _central_difference(
        lambda p: distance_constrained_potential_gradient([group], graph, p, NOISE, [])[0], positions, nodes
    )
    assert analytic.value == pytest.approx(value), "勾配場の値が J_c ではありません"
    error = _relative_error(analytic.gradients, numeric)
    assert error < 1e-5, f"J_c(D) の勾配が一致しません: {error}"


def test_rp_gradient_matches_finite_differences(ugv_start):
    """J_c(RP) の解析勾配が数値微分と一致することを確認"""
    graph, positions, group = ugv_start
    nodes = list(range(graph.node_count))
    analytic = rp_potential_gradient(graph, positions, NOISE, [group], None, nodes)
    numeric = _central_difference(lambda p: rp_constrained_crlb(graph, p, NOISE, [group]).trace, positions, nodes)
    error = _relative_error(analytic.gradients, numeric)
    assert error < 1e-4, f"J_c(RP) の勾配が一致しません: {error}"


def test_constrained_potential_dispatch(ugv_start):
    """制約の種類による振り分けを確認"""
    graph, positions, group = ugv_start
    value_d, _ = constrained_potential_gradient([group], graph, positions, NOISE, "D", mobile=[0, 1])
    value_rp, _ = constrained_potential_gradient([group], graph, positions, NOISE, "RP", mobile=[0, 1])
    assert value_rp <= value_d * (1 + 1e-9), "RP の J_c が D を上回りました"
    with pytest.raises(ValueError):
        constrained_potential_gradient([group], graph, positions, NOISE, "X")


def test_project_to_rigid_pose(ugv_start):
    """剛体姿勢への射影が実現可能な配置を復元することを確認"""
    _, positions, group = ugv_start
    pose = project_to_rigid_pose(group, positions[:2])
    assert pose.residual == pytest.approx(0.0, abs=1e-18), "残差が 0 ではありません"
    assert pose.theta == pytest.approx(-np.pi / 8), "姿勢角が不正です"
    assert np.allclose(pose.position, positions[0]), "基準タグ位置が不正です"

    desired = {0: positions[0] + [0.3, 0.0], 1: positions[1] - [0.1, 0.2]}
    projected = project_to_rigid_pose(group, desired)
    assert projected.residual > 0.0, "実現不可能な入力で残差が 0 になりました"
    distance = np.linalg.norm(projected.tag_positions[0] - projected.tag_positions[1])
    assert distance == pytest.approx(2.0), "射影後のタグ間距離が保たれていません"


def test_project_to_rigid_pose_3d():
    """3次元の剛体姿勢への射影を確認"""
    offsets = {0: [0.0, 0.0, 0.0], 1: [1.0, 0.0, 0.0], 2: [0.0, 1.0, 0.0]}
    group = RigidGroup(0, (0, 1, 2), offsets)
    rotation = rotation_exp([0.2, -0.1, 0.5], 3)
    origin = np.array([3.0, -1.0, 2.0])
    desired = np.array([origin + rotation @ np.asarray(offsets[t]) for t in (0, 1, 2)])
    pose = project_to_rigid_pose(group, desired)
    assert np.allclose(pose.rotation, rotation), "回転行列が復元されません"
    assert np.allclose(pose.theta, [0.2, -0.1, 0.5]), "回転ベクトルが復元されません"


@pytest.mark.parametrize("kind", ["D", "RP"])
def test_primal_dual_step_decreases_potential(kind, ugv_start):
    """双対変数 0 からの主双対ステップで J_c が減少することを確認"""
    graph, positions, group = ugv_start
    constraints = constraint_system(kind, [group], graph.tag_count)

    def evaluator(config):
        value, field = constraints.potential(graph, config, NOISE, [0, 1])
        return value, field.as_array(graph.node_count, graph.dim)

    state = initial_primal_dual_state(positions, constraints, delta=0.5)
    assert np.allclose(state.lam, 0.0), "双対変数の初期値が 0 ではありません"
    updated = primal_dual_step(state, evaluator, constraints, mobile=[0, 1])
    assert not updated.rejected, "ステップが棄却されました"
    assert updated.iteration == 1, "反復回数が進んでいません"
    assert evaluator(updated.config)[0] < evaluator(positions)[0], "J_c が減少していません"
    assert np.array_equal(updated.config[2:], positions[2:]), "アンカーが動きました"


def test_primal_dual_step_rejects_without_descent(ugv_start):
    """十分減少が得られない場合は主変数を動かさず、双対変数だけ更新することを確認"""
    graph, positions, group = ugv_start
    constraints = constraint_system("D", [group], graph.tag_count)
    moved = positions.copy()
    moved[1] += [0.5, 0.0]

    def increasing(config):
        return float(np.sum(config)), -np.ones_like(config)

    state = initial_primal_dual_state(moved, constraints, delta=0.5, penalty=0.0)
    updated = primal_dual_step(state, increasing, constraints, armijo=ArmijoRule(max_backtracks=3))
    assert updated.rejected, "棄却されていません"
    assert np.array_equal(updated.config, moved), "棄却時に配置が変わりました"
    assert np.allclose(updated.lam, 0.5 * constraints.residual(moved)), "双対変数が δ f_c で更新されていません"


def test_unknown_constraint_kind():
    """未知の制約の種類がエラーになることを確認"""
    group = RigidGroup(0, (0, 1), {0: [1.0, 0.0], 1: [-1.0, 0.0]})
    with pytest.raises(ValueError):
        constraint_system("X", [group], 2)


def test_initial_state_penalty_and_orientation(ugv_start):
    """ρ の既定値が 2δ で、相対位置制約では θ が追加の主変数になることを確認"""
    graph, positions, group = ugv_start
    distance = initial_primal_dual_state(positions, constraint_system("D", [group], graph.tag_count), delta=0.5)
    assert distance.penalty == pytest.approx(1.0), "ρ の既定値が 2δ ではありません"
    assert distance.extra.size == 0, "距離制約に追加の変数があります"

    relative = initial_primal_dual_state(positions, constraint_system("RP", [group], graph.tag_count), delta=0.5)
    assert relative.extra.shape == (1,), "θ の数が不正です"
    assert relative.extra[0] == pytest.approx(-np.pi / 8), "θ の初期値が剛体姿勢と一致しません"
    assert np.allclose(relative.lam, 0.0), "双対変数の初期値が 0 ではありません"


def test_primal_dual_step_moves_orientation(ugv_start):
    """θ がずれていると拡張項で θ とタグ座標が動き、制約違反が減ることを確認"""
    graph, positions, group = ugv_start
    constraints = constraint_system("RP", [group], graph.tag_count)
    state = initial_primal_dual_state(positions, constraints, delta=0.5)
    state = replace(state, extra=state.extra + 0.2)

    def flat(config):
        return 0.0, np.zeros_like(config)

    before = constraints.violation(positions, state.extra)
    updated = primal_dual_step(state, flat, constraints)
    assert not updated.rejected, "ステップが棄却されました"
    assert constraints.violation(updated.config, updated.extra) < before, "制約違反が減少していません"
    assert abs(updated.extra[0] - state.extra[0]) > 0.0, "θ が動いていません"
    assert np.array_equal(updated.config[2:], positions[2:]), "アンカーが動きました"
    assert np.allclose(updated.lam, 0.5 * constraints.residual(positions, state.extra)), "双対変数の更新が不正です"
