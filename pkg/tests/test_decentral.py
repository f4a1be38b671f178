import logging

import numpy as np
import pytest

from src.modules.decentral import (
    EigenEstimate,
    RoundNetwork,
    audit_locality,
    consensus_average,
    default_power_gains,
    distributed_aopt_gradient,
    distributed_dopt_gradient,
    distributed_eopt_gradient,
    identity_rhs,
    jacobi_or_solve,
    metropolis_weights,
    power_iteration_eigvec,
    richardson_solve,
    transcript_frame,
)
from src.modules.fisher import tag_fim
from src.modules.geometry_graph import build_graph
from src.modules.potentials import min_eigenpair, potential_gradient
from src.utils.exceptions import DivergenceError, LocalityViolationError


def _relative_error(estimate, reference):
    nodes = sorted(reference)
    a = np.concatenate([estimate[n] for n in nodes])
    b = np.concatenate([reference[n] for n in nodes])
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_send_to_non_neighbor_raises():
    """隣接していないノードへの送信がエラーになることを確認"""
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)])
    network = RoundNetwork(graph)
    with pytest.raises(LocalityViolationError) as excinfo:
        network.send(0, 4, 1.0)
    assert (excinfo.value.sender, excinfo.value.receiver) == (0, 4), "送受信ノードが記録されていません"


def test_messages_arrive_next_round(square_network):
    """送信したメッセージが次のラウンドで配送されることを確認"""
    graph, _ = square_network
    network = RoundNetwork(graph)
    network.begin("test")
    network.send(0, 1, "hello")
    assert network.inbox(1) == [], "同じラウンドで配送されました"
    network.advance()
    inbox = network.inbox(1)
    assert len(inbox) == 1 and inbox[0].payload == "hello", "次のラウンドで配送されていません"
    assert network.round == 1, "ラウンド番号が進んでいません"

    frame = transcript_frame(network)
    assert list(frame.columns) == ["round", "phase", "sender", "receiver", "digest"], "トランスクリプトの列が不正です"
    assert frame.iloc[0]["phase"] == "test", "フェーズが記録されていません"


def test_richardson_solves_inverse(square_network, additive_noise):
    """Richardson 反復が F_U⁻¹ を求めることを確認"""
    graph, positions = square_network
    result = richardson_solve(RoundNetwork(graph), positions, additive_noise, identity_rhs(graph))
    expected = np.linalg.inv(tag_fim(graph, positions, additive_noise))
    assert np.allclose(result.stacked(), expected, rtol=1e-6, atol=1e-12), "F_U⁻¹ と一致しません"
    assert result.rounds > 0, "ラウンド数が記録されていません"


def test_jacobi_solves_inverse(square_network, additive_noise):
    """Jacobi 過緩和反復が F_U⁻¹ を求めることを確認"""
    graph, positions = square_network
    result = jacobi_or_solve(RoundNetwork(graph), positions, additive_noise, identity_rhs(graph), eta=0.5)
    expected = np.linalg.inv(tag_fim(graph, positions, additive_noise))
    assert np.allclose(result.stacked(), expected, rtol=1e-6, atol=1e-12), "F_U⁻¹ と一致しません"


def test_richardson_large_step_diverges(square_network, additive_noise):
    """ステップ幅が大きすぎると発散として検出されることを確認"""
    graph, positions = square_network
    with pytest.raises(DivergenceError):
        richardson_solve(RoundNetwork(graph), positions, additive_noise, identity_rhs(graph), eta=1.0)


def test_jacobi_rejects_out_of_range_eta(square_network, additive_noise):
    """Jacobi の eta が (0, 1] の外ならエラーになることを確認"""
    graph, positions = square_network
    with pytest.raises(ValueError):
        jacobi_or_solve(RoundNetwork(graph), positions, additive_noise, identity_rhs(graph), eta=1.5)


@pytest.mark.parametrize("solver", ["richardson", "jacobi"])
def test_distributed_dopt_matches_central(solver, square_network, additive_noise):
    """分散 D 最適勾配が集中計算と一致し、通信が 1 ホップに限られることを確認"""
    graph, positions = square_network
    network = RoundNetwork(graph)
    eta = 0.5 if solver == "jacobi" else None
    distributed = distributed_dopt_gradient(network, positions, additive_noise, eta=eta, solver=solver)
    central = potential_gradient("D", graph, positions, additive_noise)
    error = _relative_error(distributed.gradients, central.gradients)
    assert error < 1e-5, f"分散 D 勾配が一致しません: {error}"
    assert audit_locality(network), "隣接以外への送信がありました"


def test_distributed_aopt_matches_central(square_network, lognormal_noise):
    """分散 A 最適勾配が集中計算と一致することを確認"""
    graph, positions = square_network
    network = RoundNetwork(graph)
    distributed = distributed_aopt_gradient(network, positions, lognormal_noise, mobile=[0, 1, 2])
    central = potential_gradient("A", graph, positions, lognormal_noise, mobile=[0, 1, 2])
    assert sorted(distributed.gradients) == [0, 1, 2], "可動ノードの集合が不正です"
    error = _relative_error(distributed.gradients, central.gradients)
    assert error < 1e-5, f"分散 A 勾配が一致しません: {error}"


def test_distributed_eopt_with_exact_eigenvector(square_network, additive_noise):
    """正確な固有ベクトルを与えた分散 E 勾配が集中計算と一致することを確認"""
    graph, positions = square_network
    smallest, vector = min_eigenpair(tag_fim(graph, positions, additive_noise))
    estimate = EigenEstimate({i: vector[2 * i: 2 * i + 2] for i in graph.tags}, smallest)
    network = RoundNetwork(graph)
    distributed = distributed_eopt_gradient(network, positions, additive_noise, estimate)
    central = potential_gradient("E", graph, positions, additive_noise)
    assert _relative_error(distributed.gradients, central.gradients) < 1e-9, "分散 E 勾配が一致しません"
    assert distributed.value == pytest.approx(-smallest), "E 値が −λ̂ ではありません"
    assert audit_locality(network), "隣接以外への送信がありました"


def test_consensus_average(square_network):
    """合意平均が初期値の平均に収束することを確認"""
    graph, _ = square_network
    weights = metropolis_weights(graph)
    assert np.allclose(weights.matrix.sum(axis=1), 1.0), "重みの行和が 1 ではありません"
    assert np.allclose(weights.matrix, weights.matrix.T), "重みが対称ではありません"
    result = consensus_average(RoundNetwork(graph), [1.0, 3.0], weights, 60)
    assert np.allclose(result.values, 2.0, atol=1e-8), "平均に収束していません"
    assert not result.disconnected, "連結なタグ部分グラフが非連結と判定されました"


def test_consensus_reports_disconnected_tags():
    """タグ部分グラフが非連結なら成分ごとの平均になることを確認"""
    graph = build_graph(2, 2, 3, [(0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)])
    result = consensus_average(RoundNetwork(graph), [1.0, 3.0], metropolis_weights(graph), 20)
    assert result.disconnected, "非連結が検出されていません"
    assert np.allclose(result.values, [1.0, 3.0]), "成分ごとの値が保たれていません"


def test_default_power_gains(square_network, additive_noise):
    """既定のべき乗法ゲインが加法モデルで σ²/(2P)、μ = 2 になることを確認"""
    graph, positions = square_network
    gains = default_power_gains(graph, positions, additive_noise)
    assert gains.beta == pytest.approx(additive_noise.sigma ** 2 / (2 * 7)), "β が不正です"
    assert gains.mu == pytest.approx(2.0), "μ が不正です"
    assert gains.eta > 0.0, "η が正ではありません"
    with pytest.raises(ValueError):
        default_power_gains(graph, positions, additive_noise, beta=-1.0)


def test_power_iteration_finds_smallest_eigenpair(square_network, additive_noise, rng):
    """分散べき乗法が最小固有値と固有ベクトルを推定することを確認"""
    graph, positions = square_network
    block = tag_fim(graph, positions, additive_noise)
    smallest, reference = min_eigenpair(block)
    beta = 1.0 / float(np.linalg.eigvalsh(block)[-1])
    estimate = power_iteration_eigvec(
        RoundNetwork(graph, record=False), positions, additive_noise,
        beta=beta, inner_rounds=60, outer_iters=1500, rng=rng,
    )
    assert abs(estimate.eigenvalue - smallest) / smallest < 1e-2, "固有値の推定が不正確です"
    assert abs(float(estimate.stacked() @ reference)) > 0.99, "固有ベクトルの推定が不正確です"
    assert estimate.components == 1, "成分数が不正です"


@pytest.fixture
def near_degenerate_network():
    """x 方向の最小固有値 1/σ² と次の固有値 1.08/σ² が近いタグ 2 台のネットワーク（対数正規）"""
    graph = build_graph(2, 2, 4, [(0, 1), (0, 2), (0, 4), (1, 3), (1, 5)])
    positions = np.array([[0.0, 0.0], [5.0, 0.0], [-1.0, 0.0], [6.0, 0.0], [0.0, 0.9], [5.0, 0.8]])
    return graph, positions


def test_power_iteration_flags_nearly_repeated_eigenvalue(near_degenerate_network, lognormal_noise, caplog):
    """最小固有値が重複に近いと外側反復の後に未収束の診断が出ることを確認"""
    graph, positions = near_degenerate_network
    values, vectors = np.linalg.eigh(tag_fim(graph, positions, lognormal_noise))
    assert (values[1] - values[0]) / values[0] < 0.1, "固有値が近接していません"
    mixed = (vectors[:, 0] + vectors[:, 1]) / np.sqrt(2.0)
    with caplog.at_level(logging.WARNING):
        estimate = power_iteration_eigvec(
            RoundNetwork(graph, record=False), positions, lognormal_noise,
            inner_rounds=60, outer_iters=20, initial=mixed,
        )
    assert not estimate.converged, "未収束が検出されていません"
    assert estimate.residual > 1e-2, "相対残差が小さすぎます"
    assert "収束しませんでした" in caplog.text, "警告が出力されていません"


def test_power_iteration_accepts_exact_eigenvector(near_degenerate_network, lognormal_noise, caplog):
    """初期値が最小固有ベクトルなら残差は小さく警告が出ないことを確認"""
    graph, positions = near_degenerate_network
    values, vectors = np.linalg.eigh(tag_fim(graph, positions, lognormal_noise))
    with caplog.at_level(logging.WARNING):
        estimate = power_iteration_eigvec(
            RoundNetwork(graph, record=False), positions, lognormal_noise,
            inner_rounds=60, outer_iters=20, initial=vectors[:, 0],
        )
    assert estimate.converged, "収束と判定されていません"
    assert estimate.residual < 1e-6, "固有ベクトルの残差が大きすぎます"
    assert estimate.eigenvalue == pytest.approx(values[0], rel=1e-6), "固有値が不正です"
    assert "収束しませんでした" not in caplog.text, "不要な警告が出力されています"
