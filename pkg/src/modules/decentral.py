"""
分散計算シミュレーション

同期ラウンド型のメッセージパッシング基盤（RoundNetwork）と、その上で動く分散アルゴリズム
（Richardson / Jacobi 反復、D・A 最適勾配、合意平均を用いたべき乗法、E 最適勾配）を提供します。

各ノードのハンドラは（ローカル状態, 受信箱）のみから新しい状態と送信メッセージを返し、
ラウンド k に送ったメッセージはラウンド k+1 でのみ読めます。受信箱は送信元の番号順です。
"""

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from src.modules.fisher import NoiseModel, edge_derivatives, fim_block_derivative
from src.modules.geometry_graph import RangingGraph, as_configuration
from src.modules.potentials import GradientField
from src.utils.exceptions import (
    ConvergenceError,
    DivergenceError,
    LocalityViolationError,
    SingularFisherError,
    SingularGeometryError,
)
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

Outgoing = List[Tuple[int, Any]]

DIVERGENCE_WINDOW = 10
DEFAULT_MAX_ROUNDS = 20000
DEFAULT_SOLVER_TOL = 1e-10
# ‖F_U v̂ − λ̂ v̂‖/λ̂ がこれを超えたらべき乗法は未収束
EIGEN_RESIDUAL_TOL = 1e-2


# ---------------------------------------------------------------------------
# ラウンド基盤
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    payload: Any


@dataclass(frozen=True)
class TranscriptRecord:
    round: int
    phase: str
    sender: int
    receiver: int
    digest: str


def _feed(hasher: Any, payload: Any) -> None:
    if isinstance(payload, np.ndarray):
        array = np.ascontiguousarray(payload, dtype=float)
        hasher.update(repr(array.shape).encode())
        hasher.update(array.tobytes())
    elif isinstance(payload, dict):
        for key in sorted(payload):
            hasher.update(repr(key).encode())
            _feed(hasher, payload[key])
    elif isinstance(payload, (list, tuple)):
        hasher.update(b"[")
        for item in payload:
            _feed(hasher, item)
        hasher.update(b"]")
    else:
        hasher.update(repr(payload).encode())


def payload_digest(payload: Any) -> str:
    """メッセージ内容の短いハッシュ（トランスクリプト用）"""
    hasher = hashlib.blake2b(digest_size=8)
    _feed(hasher, payload)
    return hasher.hexdigest()


class RoundNetwork:
    """
    測距グラフ上の決定的な同期メッセージパッシング基盤

    送信は隣接ノードにのみ許され、全メッセージはトランスクリプトに記録されます。
    ラウンド番号はプロトコルをまたいで単調に増加します。
    """

    def __init__(self, graph: RangingGraph, record: bool = True):
        self.graph = graph
        self.round = 0
        self.record = record
        self.transcript: List[TranscriptRecord] = []
        self._outbox: List[Message] = []
        self._mailboxes: Dict[int, List[Message]] = {}
        self._phase = ""

    def begin(self, phase: str) -> None:
        """新しいプロトコルの開始。未配送のメッセージは破棄します。"""
        self._phase = phase
        self._outbox = []
        self._mailboxes = {}

    def send(self, sender: int, receiver: int, payload: Any) -> None:
        if receiver not in self.graph.neighbors(sender):
            raise LocalityViolationError(sender, receiver)
        self._outbox.append(Message(self.round, sender, receiver, payload))
        if self.record:
            self.transcript.append(TranscriptRecord(self.round, self._phase, sender, receiver, payload_digest(payload)))

    def advance(self) -> None:
        """ラウンドを 1 進め、前ラウンドの送信を配送します。"""
        self.round += 1
        mailboxes: Dict[int, List[Message]] = {}
        for message in sorted(self._outbox, key=lambda m: m.sender):
            mailboxes.setdefault(message.receiver, []).append(message)
        self._mailboxes = mailboxes
        self._outbox = []

    def inbox(self, node: int) -> List[Message]:
        return self._mailboxes.get(node, [])

    @property
    def message_count(self) -> int:
        return len(self.transcript)


def audit_locality(network: RoundNetwork) -> bool:
    """トランスクリプトの全メッセージが隣接ノード間かを検査します。"""
    graph = network.graph
    return all(record.receiver in graph.neighbors(record.sender) for record in network.transcript)


def transcript_frame(network: RoundNetwork) -> pd.DataFrame:
    """トランスクリプトを DataFrame（round, phase, sender, receiver, digest）で返します。"""
    columns = ["round", "phase", "sender", "receiver", "digest"]
    rows = [(r.round, r.phase, r.sender, r.receiver, r.digest) for r in network.transcript]
    return pd.DataFrame(rows, columns=columns)


class NodeProtocol(ABC):
    """ラウンド基盤上で動くプロトコルの基底クラス"""

    name = "protocol"
    divergence_window: Optional[int] = DIVERGENCE_WINDOW

    @abstractmethod
    def participants(self, graph: RangingGraph) -> Sequence[int]:
        ...

    @abstractmethod
    def init(self, node: int) -> Tuple[Any, Outgoing]:
        ...

    @abstractmethod
    def on_round(self, node: int, state: Any, inbox: List[Message]) -> Tuple[Any, Outgoing]:
        ...

    def residual(self, node: int, state: Any) -> float:
        return 0.0

    def magnitude(self, node: int, state: Any) -> float:
        """発散判定と履歴に使う絶対残差（既定は residual と同じ）"""
        return self.residual(node, state)


@dataclass
class ProtocolResult:
    states: Dict[int, Any]
    rounds: int
    residuals: Dict[int, float]
    history: List[float] = field(default_factory=list)
    converged: bool = True


def _post(network: RoundNetwork, sender: int, outgoing: Outgoing) -> None:
    for receiver, payload in outgoing:
        network.send(sender, receiver, payload)


def run_protocol(
    network: RoundNetwork,
    protocol: NodeProtocol,
    max_rounds: int,
    tol: float,
    settle_rounds: int = 0,
    require_convergence: bool = True,
) -> ProtocolResult:
    """
    プロトコルを同期ラウンドで実行します。

    全参加ノードのローカル残差が tol 未満になってから settle_rounds ラウンド後に終了します。

    Args:
        network (RoundNetwork): メッセージ基盤
        protocol (NodeProtocol): 実行するプロトコル
        max_rounds (int): 最大ラウンド数
        tol (float): ローカル残差のしきい値
        settle_rounds (int): 収束判定後の追加ラウンド数（AND 集約の遅延）
        require_convergence (bool): False の場合、上限到達でも例外を送出しない

    Returns:
        ProtocolResult: ノードごとの最終状態とラウンド数

    Raises:
        DivergenceError: 絶対残差が連続して増加した場合
        ConvergenceError: max_rounds までに収束しなかった場合
    """
    graph = network.graph
    participants = sorted(protocol.participants(graph))
    network.begin(protocol.name)

    states: Dict[int, Any] = {}
    for node in participants:
        state, outgoing = protocol.init(node)
        states[node] = state
        _post(network, node, outgoing)

    history: List[float] = []
    residuals: Dict[int, float] = {}
    growth = 0
    converged_at: Optional[int] = None

    for round_index in range(1, max_rounds + 1):
        network.advance()
        for node in participants:
            state, outgoing = protocol.on_round(node, states[node], network.inbox(node))
            states[node] = state
            _post(network, node, outgoing)

        residuals = {node: protocol.residual(node, states[node]) for node in participants}
        total = float(np.sqrt(sum(protocol.magnitude(node, states[node]) ** 2 for node in participants)))
        if not np.isfinite(total):
            raise DivergenceError(f"{protocol.name}: 残差が有限ではありません", list(residuals.values()), round_index)
        growth = growth + 1 if history and total > history[-1] else 0
        history.append(total)
        if protocol.divergence_window is not None and growth >= protocol.divergence_window:
            raise DivergenceError(
                f"{protocol.name}: 残差が {growth} ラウンド連続で増加しました", list(residuals.values()), round_index
            )

        if converged_at is None and all(value < tol for value in residuals.values()):
            converged_at = round_index
        if converged_at is not None and round_index - converged_at >= settle_rounds:
            logger.debug("%s: %d ラウンドで収束しました", protocol.name, round_index)
            return ProtocolResult(states, round_index, residuals, history, True)

    if require_convergence:
        raise ConvergenceError(
            f"{protocol.name}: {max_rounds} ラウンドで収束しませんでした", list(residuals.values()), max_rounds
        )
    return ProtocolResult(states, max_rounds, residuals, history, False)


# ---------------------------------------------------------------------------
# 基本プロトコル
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FloodState:
    known: bool
    forwarded: bool


class FloodingProtocol(NodeProtocol):
    """送信元のトークンを全ノードへ広めるフラッディング"""

    name = "flooding"

    def __init__(self, graph: RangingGraph, source: int):
        self.graph = graph
        self.source = source

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return range(graph.node_count)

    def _broadcast(self, node: int) -> Outgoing:
        return [(j, self.source) for j in sorted(self.graph.neighbors(node))]

    def init(self, node: int) -> Tuple[FloodState, Outgoing]:
        if node == self.source:
            return FloodState(True, True), self._broadcast(node)
        return FloodState(False, False), []

    def on_round(self, node: int, state: FloodState, inbox: List[Message]) -> Tuple[FloodState, Outgoing]:
        if state.known or not inbox:
            return state, []
        return FloodState(True, True), self._broadcast(node)

    def residual(self, node: int, state: FloodState) -> float:
        return 0.0 if state.known else 1.0


@dataclass(frozen=True)
class FloodMinimumState:
    best: Tuple[float, int]
    rounds: int


class FloodMinimumProtocol(NodeProtocol):
    """(値, ラベル) の最小値をグラフ全体（アンカー経由を含む）へ中継します。"""

    name = "flood-minimum"
    divergence_window = None

    def __init__(self, graph: RangingGraph, initial: Dict[int, Tuple[float, int]], horizon: int):
        self.graph = graph
        self.initial = initial
        self.horizon = horizon

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return range(graph.node_count)

    def _broadcast(self, node: int, best: Tuple[float, int]) -> Outgoing:
        return [(j, best) for j in sorted(self.graph.neighbors(node))]

    def init(self, node: int) -> Tuple[FloodMinimumState, Outgoing]:
        best = self.initial.get(node, (float("inf"), -1))
        return FloodMinimumState(best, 0), self._broadcast(node, best)

    def on_round(self, node: int, state: FloodMinimumState, inbox: List[Message]) -> Tuple[FloodMinimumState, Outgoing]:
        best = min([state.best] + [tuple(m.payload) for m in inbox])
        return FloodMinimumState(best, state.rounds + 1), self._broadcast(node, best)

    def residual(self, node: int, state: FloodMinimumState) -> float:
        return 0.0 if state.rounds >= self.horizon else 1.0


def flood_minimum(network: RoundNetwork, initial: Dict[int, Tuple[float, int]], horizon: Optional[int] = None) -> Dict[int, Tuple[float, int]]:
    """各ノードが到達可能な範囲の最小 (値, ラベル) を返します。"""
    horizon = horizon if horizon is not None else network.graph.node_count - 1
    result = run_protocol(network, FloodMinimumProtocol(network.graph, initial, max(horizon, 1)), max(horizon, 1), 0.5)
    return {node: state.best for node, state in result.states.items()}


class PositionBroadcastProtocol(NodeProtocol):
    """各ノードが自分の位置（真値または推定値）を隣接ノードへ 1 回送ります。"""

    name = "position-broadcast"

    def __init__(self, graph: RangingGraph, positions: np.ndarray):
        self.graph = graph
        self.positions = positions

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return range(graph.node_count)

    def init(self, node: int) -> Tuple[Dict[int, np.ndarray], Outgoing]:
        own = self.positions[node].copy()
        return {node: own}, [(j, own) for j in sorted(self.graph.neighbors(node))]

    def on_round(self, node: int, state: Dict[int, np.ndarray], inbox: List[Message]):
        known = dict(state)
        for message in inbox:
            known[message.sender] = np.asarray(message.payload, dtype=float)
        return known, []


def position_broadcast(network: RoundNetwork, positions: Any) -> Dict[int, Dict[int, np.ndarray]]:
    """位置の 1 ホップ放送を行い、ノードごとの既知位置（自分と隣接ノード）を返します。"""
    config = as_configuration(network.graph, positions)
    result = run_protocol(network, PositionBroadcastProtocol(network.graph, config), 1, np.inf)
    return result.states


def local_fisher_blocks(
    graph: RangingGraph, node: int, known: Dict[int, np.ndarray], noise: NoiseModel
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """
    タグが既知位置だけから計算する F_ii と隣接タグとの F_ij を返します。
    """
    own = known[node]
    diagonal = np.zeros((graph.dim, graph.dim))
    off_diagonal: Dict[int, np.ndarray] = {}
    for j in sorted(graph.neighbors(node)):
        diff = own - known[j]
        distance = float(np.linalg.norm(diff))
        if distance < 1e-12:
            raise SingularGeometryError(f"エッジ ({node}, {j}) の両端が一致しています", edge=(node, j))
        block = -float(noise.edge_weights(distance)) * np.outer(diff, diff)
        diagonal -= block
        if graph.is_tag(j):
            off_diagonal[j] = block
    return diagonal, off_diagonal


def _tag_fisher_blocks(graph: RangingGraph, known: Dict[int, Dict[int, np.ndarray]], noise: NoiseModel):
    return {i: local_fisher_blocks(graph, i, known[i], noise) for i in graph.tags}


def trace_bound(graph: RangingGraph, positions: Any, noise: NoiseModel) -> float:
    """
    λ_max(F_U) ≤ trace(F_U) の上界（全体定数）。

    加法モデルでは 2P/σ²、対数正規モデルでは 2Σ d_ij^{-2}/σ²（和は測距エッジ）。
    """
    config = as_configuration(graph, positions)
    ranging = graph.ranging_edges
    if noise.kappa == 1:
        return 2.0 * len(ranging) / noise.sigma ** 2
    inverse_squares = sum(1.0 / float(np.sum((config[i] - config[j]) ** 2)) for i, j in ranging)
    return 2.0 * inverse_squares / noise.sigma ** 2


def default_richardson_eta(graph: RangingGraph, positions: Any, noise: NoiseModel) -> float:
    """η = 1/trace 上界（加法モデルでは σ²/(2P)）。常に η < 2/λ_max。"""
    return 1.0 / trace_bound(graph, positions, noise)


# ---------------------------------------------------------------------------
# 分散線形ソルバ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearNodeState:
    x: np.ndarray
    certified: np.ndarray
    residual: float
    magnitude: float


@dataclass
class LinearSolveResult:
    blocks: Dict[int, np.ndarray]
    rounds: int
    history: List[float]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.blocks[i] for i in sorted(self.blocks)])


class _LinearIterationProtocol(NodeProtocol):
    """F_U X = E をタグごとのブロック行で解く反復の共通部分"""

    def __init__(self, graph: RangingGraph, blocks, rhs: Dict[int, np.ndarray], eta: float):
        self.graph = graph
        self.blocks = blocks
        self.rhs = rhs
        self.eta = eta

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return graph.tags

    def _send(self, node: int, x: np.ndarray) -> Outgoing:
        return [(j, x) for j in self.graph.tag_neighbors(node)]

    def init(self, node: int) -> Tuple[LinearNodeState, Outgoing]:
        x0 = np.zeros_like(self.rhs[node])
        return LinearNodeState(x0, x0, np.inf, np.inf), self._send(node, x0)

    def _coupling(self, node: int, inbox: List[Message]) -> np.ndarray:
        _, off_diagonal = self.blocks[node]
        total = np.zeros_like(self.rhs[node])
        for message in inbox:
            total = total + off_diagonal[message.sender] @ message.payload
        return total

    def on_round(self, node: int, state: LinearNodeState, inbox: List[Message]):
        diagonal, _ = self.blocks[node]
        coupling = self._coupling(node, inbox)
        rhs = self.rhs[node]
        residual = diagonal @ state.x + coupling - rhs
        magnitude = float(np.linalg.norm(residual))
        scale = float(np.linalg.norm(rhs))
        relative = magnitude / scale if scale > 0.0 else magnitude
        updated = self._update(node, state.x, coupling, residual)
        return LinearNodeState(updated, state.x, relative, magnitude), self._send(node, updated)

    @abstractmethod
    def _update(self, node: int, x: np.ndarray, coupling: np.ndarray, residual: np.ndarray) -> np.ndarray:
        ...

    def residual(self, node: int, state: LinearNodeState) -> float:
        return state.residual

    def magnitude(self, node: int, state: LinearNodeState) -> float:
        return state.magnitude


class RichardsonProtocol(_LinearIterationProtocol):
    """x_i ← x_i − η(F_ii x_i + Σ_j F_ij x_j − E_i)"""

    name = "richardson"

    def _update(self, node, x, coupling, residual):
        return x - self.eta * residual


class JacobiProtocol(_LinearIterationProtocol):
    """x_i ← (1−η)x_i + η F_ii⁻¹(E_i − Σ_j F_ij x_j)"""

    name = "jacobi"

    def __init__(self, graph: RangingGraph, blocks, rhs: Dict[int, np.ndarray], eta: float):
        super().__init__(graph, blocks, rhs, eta)
        self.inverses = {}
        for node, (diagonal, _) in blocks.items():
            eigenvalues = np.linalg.eigvalsh(diagonal)
            if eigenvalues[-1] <= 0.0 or eigenvalues[0] <= 1e-12 * eigenvalues[-1]:
                raise SingularFisherError(f"タグ {node} の対角ブロック F_ii が特異です", lambda_min=float(eigenvalues[0]))
            self.inverses[node] = np.linalg.inv(diagonal)

    def _update(self, node, x, coupling, residual):
        return (1.0 - self.eta) * x + self.eta * self.inverses[node] @ (self.rhs[node] - coupling)


def _split_rhs(graph: RangingGraph, rhs: Any) -> Dict[int, np.ndarray]:
    if isinstance(rhs, dict):
        return {int(i): np.asarray(rhs[i], dtype=float) for i in graph.tags}
    matrix = np.asarray(rhs, dtype=float)
    dim = graph.dim
    if matrix.shape[0] != dim * graph.tag_count:
        raise ValueError(f"右辺の行数 {matrix.shape[0]} が dim·U = {dim * graph.tag_count} と一致しません")
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    return {i: matrix[dim * i: dim * (i + 1)] for i in graph.tags}


def identity_rhs(graph: RangingGraph) -> Dict[int, np.ndarray]:
    """E = I のタグ別ブロック行 e_iᵀ ⊗ I_dim"""
    identity = np.eye(graph.dim * graph.tag_count)
    return _split_rhs(graph, identity)


def _linear_solve(
    protocol_type,
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    rhs: Any,
    eta: Optional[float],
    max_rounds: int,
    tol: float,
    settle_rounds: int,
    known: Optional[Dict[int, Dict[int, np.ndarray]]],
) -> LinearSolveResult:
    graph = network.graph
    if known is None:
        known = position_broadcast(network, positions)
    blocks = _tag_fisher_blocks(graph, known, noise)
    protocol = protocol_type(graph, blocks, _split_rhs(graph, rhs), eta)
    result = run_protocol(network, protocol, max_rounds, tol, settle_rounds)
    solution = {node: state.certified for node, state in result.states.items()}
    return LinearSolveResult(solution, result.rounds, result.history)


def richardson_solve(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    rhs: Any,
    eta: Optional[float] = None,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    tol: float = DEFAULT_SOLVER_TOL,
    settle_rounds: int = 0,
    known: Optional[Dict[int, Dict[int, np.ndarray]]] = None,
) -> LinearSolveResult:
    """
    Richardson 反復で F_U X = E を分散的に解きます。

    Args:
        network (RoundNetwork): メッセージ基盤
        positions: 位置放送に使う配置（真値または推定値）
        noise (NoiseModel): ノイズモデル
        rhs: (dim·U) × m 行列、またはタグ → (dim × m) ブロックの辞書
        eta (Optional[float]): ステップ幅（省略時は 1/trace 上界）
        max_rounds (int): 最大ラウンド数
        tol (float): タグごとの相対残差 ‖r_i‖/‖E_i‖ のしきい値
        settle_rounds (int): 収束後の追加ラウンド数
        known: 位置放送の結果（省略時はここで放送を行う）

    Returns:
        LinearSolveResult: タグごとの解ブロック

    Raises:
        DivergenceError: η が大きすぎて残差が増加し続けた場合
    """
    if eta is None:
        eta = default_richardson_eta(network.graph, positions, noise)
    if eta <= 0.0:
        raise ValueError(f"eta は正の値である必要があります: {eta}")
    return _linear_solve(RichardsonProtocol, network, positions, noise, rhs, eta, max_rounds, tol, settle_rounds, known)


def jacobi_or_solve(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    rhs: Any,
    eta: float = 1.0,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    tol: float = DEFAULT_SOLVER_TOL,
    settle_rounds: int = 0,
    known: Optional[Dict[int, Dict[int, np.ndarray]]] = None,
) -> LinearSolveResult:
    """
    Jacobi 過緩和反復で F_U X = E を分散的に解きます（0 < η ≤ 1）。

    Raises:
        SingularFisherError: 対角ブロック F_ii が特異な場合
        DivergenceError: 残差が増加し続けた場合
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"Jacobi の eta は (0, 1] の範囲です: {eta}")
    return _linear_solve(JacobiProtocol, network, positions, noise, rhs, eta, max_rounds, tol, settle_rounds, known)


# ---------------------------------------------------------------------------
# 分散 D / A 最適勾配
# ---------------------------------------------------------------------------

class TraceExchangeProtocol(NodeProtocol):
    """
    タグ j が隣接する可動ノード i へ trace(M_jj ∂F_ij/∂ξ_i) を送り、
    各可動ノードが自分の勾配を合成します。
    """

    name = "trace-exchange"

    def __init__(self, graph: RangingGraph, known, rows: Dict[int, np.ndarray], noise: NoiseModel, mobile: Sequence[int]):
        self.graph = graph
        self.known = known
        self.rows = rows
        self.noise = noise
        self.mobile = set(mobile)

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return range(graph.node_count)

    def _block(self, row_owner: int, column: int) -> np.ndarray:
        dim = self.graph.dim
        return self.rows[row_owner][:, dim * column: dim * (column + 1)]

    def _derivatives(self, node: int, other: int) -> List[np.ndarray]:
        own = self.known[node][node]
        neighbor = self.known[node][other]
        return list(edge_derivatives(own, neighbor, self.noise))

    def init(self, node: int):
        if not self.graph.is_tag(node):
            return None, []
        own_block = self._block(node, node)
        outgoing = []
        for i in sorted(self.graph.neighbors(node)):
            if i not in self.mobile:
                continue
            # ∂F_ij/∂ξ_i はノード i を動かしたときの微分
            own = self.known[node][node]
            moving = self.known[node][i]
            terms = np.array([
                float(np.sum(own_block * fim_block_derivative(moving, own, k, self.noise, self.graph.dim)))
                for k in range(self.graph.dim)
            ])
            outgoing.append((i, terms))
        return None, outgoing

    def on_round(self, node: int, state: Any, inbox: List[Message]):
        if node not in self.mobile:
            return None, []
        gradient = np.zeros(self.graph.dim)
        for message in inbox:
            gradient += message.payload
        if self.graph.is_tag(node):
            own_block = self._block(node, node)
            for j in sorted(self.graph.neighbors(node)):
                derivatives = self._derivatives(node, j)
                if self.graph.is_tag(j):
                    weight = own_block - 2.0 * self._block(node, j)
                else:
                    weight = own_block
                gradient += np.array([float(np.sum(weight * block)) for block in derivatives])
        return gradient, []


def _trace_gradient(network: RoundNetwork, known, rows: Dict[int, np.ndarray], noise: NoiseModel, mobile: Sequence[int]) -> GradientField:
    result = run_protocol(network, TraceExchangeProtocol(network.graph, known, rows, noise, mobile), 1, np.inf)
    return GradientField({node: result.states[node] for node in sorted(mobile)}, None)


def _resolve_mobile(graph: RangingGraph, mobile: Optional[Iterable[int]]) -> List[int]:
    if mobile is None:
        return list(range(graph.node_count))
    return sorted(set(int(n) for n in mobile))


def distributed_dopt_gradient(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    mobile: Optional[Iterable[int]] = None,
    eta: Optional[float] = None,
    tol: float = DEFAULT_SOLVER_TOL,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    settle_rounds: int = 0,
    solver: str = "richardson",
) -> GradientField:
    """
    D 最適ポテンシャルの勾配を分散計算します。

    位置放送 → Richardson（E = I）で F_U⁻¹ の行 M_i を得る → trace 項の交換、の 3 段階。
    タグ i の勾配は Σ_{j∈N_i∩U} trace((M_jj + M_ii − 2M_ij)∂F_ij/∂ξ_i) + Σ_{k∈N_i∩K} trace(M_ii ∂F_ik/∂ξ_i)、
    アンカー i は Σ_{j∈N_i∩U} trace(M_jj ∂F_ij/∂ξ_i)。
    """
    graph = network.graph
    known = position_broadcast(network, positions)
    rows = _solve_rows(network, positions, noise, identity_rhs(graph), eta, tol, max_rounds, settle_rounds, solver, known)
    logger.debug("D 最適勾配: F_U⁻¹ の行を計算しました")
    return _trace_gradient(network, known, rows, noise, _resolve_mobile(graph, mobile))


def distributed_aopt_gradient(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    mobile: Optional[Iterable[int]] = None,
    eta: Optional[float] = None,
    tol: float = DEFAULT_SOLVER_TOL,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    settle_rounds: int = 0,
    solver: str = "richardson",
) -> GradientField:
    """
    A 最適ポテンシャルの勾配を分散計算します。

    1 回目の反復（E = I）で F_U⁻¹ の行を、2 回目（E = その結果）で F_U⁻² の行を求め、
    D 最適と同じ trace 項の交換を行います。
    """
    graph = network.graph
    known = position_broadcast(network, positions)
    first = _solve_rows(network, positions, noise, identity_rhs(graph), eta, tol, max_rounds, settle_rounds, solver, known)
    second = _solve_rows(network, positions, noise, first, eta, tol, max_rounds, settle_rounds, solver, known)
    logger.debug("A 最適勾配: F_U⁻² の行を計算しました")
    return _trace_gradient(network, known, second, noise, _resolve_mobile(graph, mobile))


def _solve_rows(network, positions, noise, rhs, eta, tol, max_rounds, settle_rounds, solver, known) -> Dict[int, np.ndarray]:
    if solver == "jacobi":
        result = jacobi_or_solve(network, positions, noise, rhs, eta if eta is not None else 1.0,
                                 max_rounds, tol, settle_rounds, known)
    elif solver == "richardson":
        result = richardson_solve(network, positions, noise, rhs, eta, max_rounds, tol, settle_rounds, known)
    else:
        raise ValueError(f"未知のソルバです: {solver}")
    return result.blocks


# ---------------------------------------------------------------------------
# 合意平均とべき乗法
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConsensusWeights:
    """タグ部分グラフ上の Metropolis–Hastings 重み（二重確率行列）"""

    matrix: np.ndarray

    def row(self, node: int) -> np.ndarray:
        return self.matrix[node]

    def second_largest_modulus(self) -> float:
        moduli = np.sort(np.abs(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))))
        return float(moduli[-2]) if moduli.size > 1 else 0.0


def metropolis_weights(graph: RangingGraph) -> ConsensusWeights:
    """L_ij = 1/(1 + max(|N_i|, |N_j|))（j ∈ N_i ∩ U）、L_ii = 1 − Σ_j L_ij"""
    count = graph.tag_count
    matrix = np.zeros((count, count))
    for i in graph.tags:
        for j in graph.tag_neighbors(i):
            matrix[i, j] = 1.0 / (1.0 + max(graph.degree(i), graph.degree(j)))
    for i in graph.tags:
        matrix[i, i] = 1.0 - float(np.sum(matrix[i])) + matrix[i, i]
    return ConsensusWeights(matrix)


def tag_components(graph: RangingGraph) -> Tuple[int, np.ndarray]:
    """タグ部分グラフの連結成分数と、各タグの成分ラベル"""
    count = graph.tag_count
    adjacency = np.zeros((count, count))
    for i in graph.tags:
        for j in graph.tag_neighbors(i):
            adjacency[i, j] = 1.0
    components, labels = connected_components(csr_matrix(adjacency), directed=False)
    return int(components), labels


class ConsensusProtocol(NodeProtocol):
    """ŝ_{l+1} = L ŝ_l をタグ間の 1 ホップ通信で実行します。"""

    name = "consensus"
    divergence_window = None

    def __init__(self, graph: RangingGraph, weights: ConsensusWeights, initial: Dict[int, float], rounds: int):
        self.graph = graph
        self.weights = weights
        self.initial = initial
        self.rounds = rounds

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return graph.tags

    def _send(self, node: int, value: float) -> Outgoing:
        return [(j, value) for j in self.graph.tag_neighbors(node)]

    def init(self, node: int):
        value = float(self.initial[node])
        return (value, 0, 0.0), self._send(node, value)

    def on_round(self, node: int, state, inbox: List[Message]):
        value, count, _ = state
        row = self.weights.row(node)
        updated = row[node] * value + sum(row[m.sender] * m.payload for m in inbox)
        return (updated, count + 1, abs(updated - value)), self._send(node, updated)

    def residual(self, node: int, state) -> float:
        return 0.0 if state[1] >= self.rounds else 1.0

    def magnitude(self, node: int, state) -> float:
        return state[2]


@dataclass
class ConsensusResult:
    values: np.ndarray
    components: int

    @property
    def disconnected(self) -> bool:
        return self.components > 1


def consensus_average(network: RoundNetwork, initial_values: Any, weights: ConsensusWeights, rounds: int) -> ConsensusResult:
    """
    タグ間の合意平均を指定ラウンド数だけ実行します。

    タグ部分グラフが非連結の場合は成分ごとの平均に収束し、components > 1 で通知します。
    """
    graph = network.graph
    values = np.asarray(initial_values, dtype=float).reshape(-1)
    initial = {i: float(values[i]) for i in graph.tags}
    components, _ = tag_components(graph)
    if components > 1:
        logger.warning("タグ部分グラフが %d 個の成分に分かれています", components)
    if rounds <= 0:
        return ConsensusResult(values.copy(), components)
    result = run_protocol(network, ConsensusProtocol(graph, weights, initial, rounds), rounds, 0.5)
    return ConsensusResult(np.array([result.states[i][0] for i in graph.tags]), components)


class PowerStepProtocol(NodeProtocol):
    """w_i ← w_i − η(β(F_U w)_i + μ(ŝ_i − 1)w_i)"""

    name = "power-step"

    def __init__(self, graph: RangingGraph, blocks, vectors: Dict[int, np.ndarray], estimates: np.ndarray,
                 beta: float, mu: float, eta: float):
        self.graph = graph
        self.blocks = blocks
        self.vectors = vectors
        self.estimates = estimates
        self.beta = beta
        self.mu = mu
        self.eta = eta

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return graph.tags

    def init(self, node: int):
        own = self.vectors[node]
        return own, [(j, own) for j in self.graph.tag_neighbors(node)]

    def on_round(self, node: int, state: np.ndarray, inbox: List[Message]):
        diagonal, off_diagonal = self.blocks[node]
        product = diagonal @ state
        for message in inbox:
            product = product + off_diagonal[message.sender] @ message.payload
        updated = state - self.eta * (self.beta * product + self.mu * (self.estimates[node] - 1.0) * state)
        return updated, []


class FisherProductProtocol(NodeProtocol):
    """(F_U v)_i をタグごとに計算します。"""

    name = "fisher-product"

    def __init__(self, graph: RangingGraph, blocks, vectors: Dict[int, np.ndarray]):
        self.graph = graph
        self.blocks = blocks
        self.vectors = vectors

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return graph.tags

    def init(self, node: int):
        own = self.vectors[node]
        return 0.0, [(j, own) for j in self.graph.tag_neighbors(node)]

    def on_round(self, node: int, state: float, inbox: List[Message]):
        diagonal, off_diagonal = self.blocks[node]
        own = self.vectors[node]
        product = diagonal @ own
        for message in inbox:
            product = product + off_diagonal[message.sender] @ message.payload
        return product, []


@dataclass
class EigenEstimate:
    """
    タグごとの固有ベクトル推定 v̂_i と固有値推定 λ̂

    residual は選ばれた成分での相対残差 ‖F_U v̂ − λ̂ v̂‖/λ̂ です。
    """

    vectors: Dict[int, np.ndarray]
    eigenvalue: float
    rounds: int = 0
    components: int = 1
    component_eigenvalues: Tuple[float, ...] = ()
    residual: float = 0.0
    converged: bool = True

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.vectors[i] for i in sorted(self.vectors)])


@dataclass(frozen=True)
class PowerGains:
    beta: float
    mu: float
    eta: float


def default_power_gains(graph: RangingGraph, positions: Any, noise: NoiseModel,
                        beta: Optional[float] = None, mu: Optional[float] = None,
                        eta: Optional[float] = None) -> PowerGains:
    """
    べき乗法のゲインを決めます。

    β = σ²/(2P)、μ = 2（加法）または 2/d_min²（対数正規）、η = 0.5/(βλ̄ + μ)（λ̄ は trace 上界）。
    """
    config = as_configuration(graph, positions)
    ranging = graph.ranging_edges
    if beta is None:
        beta = noise.sigma ** 2 / (2.0 * len(ranging))
    if mu is None:
        if noise.kappa == 1:
            mu = 2.0
        else:
            d_min = min(float(np.linalg.norm(config[i] - config[j])) for i, j in ranging)
            mu = 2.0 / d_min ** 2
    if eta is None:
        eta = 0.5 / (beta * trace_bound(graph, config, noise) + mu)
    if beta <= 0.0 or mu <= 0.0 or eta <= 0.0:
        raise ValueError(f"べき乗法のゲインは正の値である必要があります: beta={beta}, mu={mu}, eta={eta}")
    return PowerGains(beta, mu, eta)


def power_iteration_eigvec(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    beta: Optional[float] = None,
    mu: Optional[float] = None,
    eta: Optional[float] = None,
    inner_rounds: int = 50,
    outer_iters: int = 200,
    rng: Optional[np.random.Generator] = None,
    initial: Optional[Any] = None,
    residual_tolerance: float = EIGEN_RESIDUAL_TOL,
) -> EigenEstimate:
    """
    F_U の最小固有ベクトルを合意平均付きのべき乗法で分散推定します。

    各外側反復で s = ‖w‖²/(nU) を inner_rounds ラウンドの合意平均で推定し、w を更新します。
    最後に v̂_i = w_i/√(n|S| ŝ_i) と正規化し、Rayleigh 商を合意平均で求めます。
    タグ部分グラフが非連結なら成分ごとの固有値をアンカー経由で比較し、最小の成分以外を 0 にします。
    最小固有値が重複に近いと outer_iters 回では収束しないため、最後に固有方程式の残差を確かめます。

    Args:
        network (RoundNetwork): メッセージ基盤
        positions: 位置放送に使う配置
        noise (NoiseModel): ノイズモデル
        beta, mu, eta: ゲイン（省略時は default_power_gains）
        inner_rounds (int): 合意平均のラウンド数
        outer_iters (int): 外側反復回数
        rng (Optional[np.random.Generator]): 初期値 w_0 の乱数生成器
        initial: 初期値 w_0（(U, dim) または長さ dim·U、指定時は rng を使わない）
        residual_tolerance (float): 相対残差 ‖F_U v̂ − λ̂ v̂‖/λ̂ の上限。超えると警告し converged=False を返す

    Returns:
        EigenEstimate: タグごとの v̂_i と λ̂
    """
    graph = network.graph
    dim = graph.dim
    start_round = network.round
    gains = default_power_gains(graph, positions, noise, beta, mu, eta)
    known = position_broadcast(network, positions)
    blocks = _tag_fisher_blocks(graph, known, noise)
    weights = metropolis_weights(graph)
    components, labels = tag_components(graph)
    sizes = np.bincount(labels, minlength=components)

    if initial is not None:
        start = np.asarray(initial, dtype=float).reshape(graph.tag_count, dim)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        start = rng.standard_normal((graph.tag_count, dim))
    vectors = {i: start[i].copy() for i in graph.tags}

    def _local_norms() -> np.ndarray:
        return np.array([float(vectors[i] @ vectors[i]) / dim for i in graph.tags])

    for _ in range(outer_iters):
        estimates = consensus_average(network, _local_norms(), weights, inner_rounds).values
        step = run_protocol(network, PowerStepProtocol(graph, blocks, vectors, estimates, gains.beta, gains.mu, gains.eta), 1, np.inf)
        vectors = {i: step.states[i] for i in graph.tags}

    estimates = consensus_average(network, _local_norms(), weights, inner_rounds).values
    normalized = {}
    for i in graph.tags:
        scale = float(np.sqrt(dim * sizes[labels[i]] * max(estimates[i], np.finfo(float).tiny)))
        normalized[i] = vectors[i] / scale

    products = run_protocol(network, FisherProductProtocol(graph, blocks, normalized), 1, np.inf)
    product = {i: products.states[i] for i in graph.tags}
    local = np.array([float(normalized[i] @ product[i]) for i in graph.tags])
    averaged = consensus_average(network, local, weights, inner_rounds).values
    per_tag = np.array([averaged[i] * sizes[labels[i]] for i in graph.tags])

    squared = np.array([float(np.sum((product[i] - per_tag[i] * normalized[i]) ** 2)) for i in graph.tags])
    spread = consensus_average(network, squared, weights, inner_rounds).values
    tiny = np.finfo(float).tiny
    relative = np.array([
        np.sqrt(max(spread[i] * sizes[labels[i]], 0.0)) / max(abs(per_tag[i]), tiny) for i in graph.tags
    ])

    component_values = tuple(float(np.mean(per_tag[labels == c])) for c in range(components))
    relay = flood_minimum(network, {i: (float(per_tag[i]), int(labels[i])) for i in graph.tags})
    chosen = {}
    for i in graph.tags:
        best_value, best_label = relay[i]
        chosen[i] = normalized[i] if best_label == labels[i] else np.zeros(dim)
    eigenvalue = float(min(relay[i][0] for i in graph.tags))
    residual = float(max(relative[i] for i in graph.tags if relay[i][1] == labels[i]))
    converged = residual <= residual_tolerance

    if components > 1:
        logger.info("非連結なタグ部分グラフ: 成分ごとの固有値 %s から最小を選択しました", component_values)
    if not converged:
        logger.warning(
            "べき乗法が %d 回の外側反復で収束しませんでした（相対残差 %.3e > %.1e）。最小固有値が重複に近い可能性があります",
            outer_iters, residual, residual_tolerance,
        )
    return EigenEstimate(chosen, eigenvalue, network.round - start_round, components, component_values,
                         residual, converged)


# ---------------------------------------------------------------------------
# 分散 E 最適勾配
# ---------------------------------------------------------------------------

class EigenvectorExchangeProtocol(NodeProtocol):
    """
    タグが v̂_i を全隣接ノードへ送り、各可動ノードが E 最適勾配を合成します。

    タグ i: Σ_{j∈N_i∩U}(v_i − v_j)ᵀ∂F_ij(v_i − v_j) + v_iᵀ(Σ_{k∈N_i∩K}∂F_ik)v_i、
    アンカー i: Σ_{j∈N_i∩U} v_jᵀ∂F_ij v_j（微分はいずれもノード i の座標について）。
    """

    name = "eigenvector-exchange"

    def __init__(self, graph: RangingGraph, known, vectors: Dict[int, np.ndarray], noise: NoiseModel, mobile: Sequence[int]):
        self.graph = graph
        self.known = known
        self.vectors = vectors
        self.noise = noise
        self.mobile = set(mobile)

    def participants(self, graph: RangingGraph) -> Sequence[int]:
        return range(graph.node_count)

    def init(self, node: int):
        if not self.graph.is_tag(node):
            return None, []
        own = self.vectors[node]
        return None, [(j, own) for j in sorted(self.graph.neighbors(node))]

    def on_round(self, node: int, state: Any, inbox: List[Message]):
        if node not in self.mobile:
            return None, []
        dim = self.graph.dim
        own_position = self.known[node][node]
        received = {m.sender: m.payload for m in inbox}
        gradient = np.zeros(dim)
        for j in sorted(self.graph.neighbors(node)):
            if self.graph.is_tag(node):
                difference = self.vectors[node] - received[j] if self.graph.is_tag(j) else self.vectors[node]
            elif self.graph.is_tag(j):
                difference = received[j]
            else:
                continue
            for k in range(dim):
                block = fim_block_derivative(own_position, self.known[node][j], k, self.noise, dim)
                gradient[k] += float(difference @ block @ difference)
        return gradient, []


def distributed_eopt_gradient(
    network: RoundNetwork,
    positions: Any,
    noise: NoiseModel,
    estimate: EigenEstimate,
    mobile: Optional[Iterable[int]] = None,
) -> GradientField:
    """
    E 最適ポテンシャルの勾配を、推定固有ベクトルを用いて分散計算します。

    値には −λ̂ を入れます。
    """
    graph = network.graph
    known = position_broadcast(network, positions)
    nodes = _resolve_mobile(graph, mobile)
    vectors = {i: np.asarray(estimate.vectors[i], dtype=float) for i in graph.tags}
    result = run_protocol(network, EigenvectorExchangeProtocol(graph, known, vectors, noise, nodes), 1, np.inf)
    return GradientField({node: result.states[node] for node in nodes}, -estimate.eigenvalue)
