"""
性質検査スイート

FIM とリジディティ行列の恒等式、解析勾配と差分の一致、分散計算と集中計算の一致、
制約付き CRLB の半正定値順序などを乱数インスタンス上で検査します。
各検査は測定誤差と許容値を返し、失敗時には再現用のインスタンスを添えます。
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.modules.constrained import (
    RigidGroup,
    constrained_crlb,
    distance_constrained_potential_gradient,
    distance_nullspace,
    rp_constrained_crlb,
    rp_potential_gradient,
)
from src.modules.decentral import (
    RoundNetwork,
    audit_locality,
    distributed_aopt_gradient,
    distributed_dopt_gradient,
    distributed_eopt_gradient,
    power_iteration_eigvec,
)
from src.modules.fisher import NoiseModel, fim, fim_from_rigidity, tag_fim
from src.modules.geometry_graph import RangingGraph, build_graph, build_triangulation, graph_to_dict, rigidity_matrix
from src.modules.potentials import min_eigenpair, potential_gradient, potential_value
from src.utils.exceptions import LocalizabilityError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

RESULT_COLUMNS = ["name", "passed", "error", "tolerance", "instances"]
FD_STEP = 1e-6
RANK_CUTOFF = 1e-9

_ANCHORS = {
    2: np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]),
    3: np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]),
}
UGV_ANCHORS = np.array([[-5.0, 5.0], [5.0, -5.0], [5.0, 5.0]])
UGV_OFFSETS = {0: np.array([1.0, 0.0]), 1: np.array([-1.0, 0.0])}


@dataclass
class PropertyResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    instances: int = 0
    instance: Optional[Dict[str, Any]] = None
    message: str = ""


@dataclass
class VerificationReport:
    seed: int
    results: List[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def failures(self) -> List[PropertyResult]:
        return [result for result in self.results if not result.passed]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([{k: getattr(r, k) for k in RESULT_COLUMNS} for r in self.results], columns=RESULT_COLUMNS)

    def as_dict(self) -> Dict[str, Any]:
        return {"seed": self.seed, "passed": self.passed, "results": [asdict(r) for r in self.results]}


@dataclass(frozen=True)
class DeskScale:
    """各検査のインスタンス数"""

    identity: int = 100
    triangulation: int = 50
    gradient: int = 20
    distributed: int = 2
    power: int = 2
    psd: int = 20
    max_tags: int = 8


# ---------------------------------------------------------------------------
# インスタンス生成
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    graph: RangingGraph
    positions: np.ndarray
    noise: NoiseModel
    groups: Tuple[RigidGroup, ...] = ()

    def describe(self) -> Dict[str, Any]:
        data = graph_to_dict(self.graph, self.positions)
        data["noise"] = {"kind": self.noise.kind.value, "sigma": self.noise.sigma}
        if self.groups:
            data["groups"] = [
                {"robot": g.robot, "tags": list(g.tags), "offsets": [g.body_offsets[t].tolist() for t in g.tags]}
                for g in self.groups
            ]
        return data


def random_network(rng: np.random.Generator, dim: int, tag_count: int, noise_kind: str = "additive",
                   sigma: float = 0.1) -> Instance:
    """アンカーを固定した三角形分割ネットワーク"""
    anchors = _ANCHORS[dim] + rng.uniform(-0.5, 0.5, size=_ANCHORS[dim].shape)
    region = np.array([np.full(dim, 0.5), np.full(dim, 9.5)])
    graph, positions = build_triangulation(dim, anchors, tag_count, region, rng)
    return Instance(graph, positions, NoiseModel(noise_kind, sigma))


def random_ugv_instance(rng: np.random.Generator, sigma: float = 0.1) -> Instance:
    """剛体 UGV（タグ 2 台）と 3 台のアンカー。全ノード間で測距する実現可能な配置"""
    theta = rng.uniform(-np.pi, np.pi)
    center = rng.uniform(-12.0, 12.0, size=2)
    while np.min(np.linalg.norm(UGV_ANCHORS - center, axis=1)) < 2.0:
        center = rng.uniform(-12.0, 12.0, size=2)
    c, s = np.cos(theta), np.sin(theta)
    rotation = np.array([[c, -s], [s, c]])
    tags = np.array([center + rotation @ UGV_OFFSETS[t] for t in (0, 1)])
    graph = build_graph(2, 2, 3, [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4)])
    group = RigidGroup(0, (0, 1), UGV_OFFSETS)
    return Instance(graph, np.vstack([tags, UGV_ANCHORS]), NoiseModel("additive", sigma), (group,))


def central_difference(function: Callable[[np.ndarray], float], positions: np.ndarray, nodes: Iterable[int],
                       step: float = FD_STEP) -> Dict[int, np.ndarray]:
    """ノードごとの中心差分勾配"""
    gradients = {}
    for node in nodes:
        values = np.zeros(positions.shape[1])
        for k in range(positions.shape[1]):
            plus, minus = positions.copy(), positions.copy()
            plus[node, k] += step
            minus[node, k] -= step
            values[k] = (function(plus) - function(minus)) / (2.0 * step)
        gradients[node] = values
    return gradients


def _relative_error(estimate: Dict[int, np.ndarray], reference: Dict[int, np.ndarray]) -> float:
    nodes = sorted(reference)
    a = np.concatenate([estimate[n] for n in nodes])
    b = np.concatenate([reference[n] for n in nodes])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


class _Collector:
    """インスタンスごとの誤差を集め、最悪値と最初の失敗インスタンスを保持します。"""

    def __init__(self, name: str, tolerance: float):
        self.name = name
        self.tolerance = tolerance
        self.worst = 0.0
        self.count = 0
        self.failing: Optional[Dict[str, Any]] = None
        self.message = ""

    def add(self, error: float, instance: Instance, passed: Optional[bool] = None) -> None:
        self.count += 1
        ok = error <= self.tolerance if passed is None else passed
        if not np.isfinite(error) or error > self.worst:
            self.worst = float(error)
        if not ok and self.failing is None:
            self.failing = instance.describe()

    def fail(self, instance: Instance, message: str) -> None:
        self.count += 1
        self.worst = float("inf")
        if self.failing is None:
            self.failing = instance.describe()
            self.message = message

    def result(self) -> PropertyResult:
        passed = self.failing is None and self.count > 0
        outcome = PropertyResult(self.name, passed, self.worst, self.tolerance, self.count, self.failing, self.message)
        text = "検査 %s: %s (誤差 %.3e, 許容 %.1e, %d 件)"
        logger.info(text, self.name, "OK" if passed else "NG", self.worst, self.tolerance, self.count)
        return outcome


def _tag_count(rng: np.random.Generator, scale: DeskScale, low: int = 1) -> int:
    return int(rng.integers(low, scale.max_tags + 1))


# ---------------------------------------------------------------------------
# 検査
# ---------------------------------------------------------------------------

def check_fim_identity(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """fim と RᵀQR の一致、および rank F = rank R"""
    identity = _Collector("fim_rigidity_identity", 1e-12)
    kernel = _Collector("kernel_equivalence", 0.0)
    for index in range(count):
        dim = 2 if index % 2 == 0 else 3
        kind = "additive" if (index // 2) % 2 == 0 else "lognormal"
        instance = random_network(rng, dim, _tag_count(rng, scale), kind)
        matrix = fim(instance.graph, instance.positions, instance.noise).full
        reference = fim_from_rigidity(instance.graph, instance.positions, instance.noise)
        identity.add(float(np.linalg.norm(matrix - reference) / np.linalg.norm(matrix)), instance)

        rigidity = rigidity_matrix(instance.graph, instance.positions)
        ranks = []
        for m in (matrix, rigidity):
            singular = np.linalg.svd(m, compute_uv=False)
            ranks.append(int(np.sum(singular > RANK_CUTOFF * singular[0])))
        kernel.add(float(abs(ranks[0] - ranks[1])), instance)
    return [identity.result(), kernel.result()]


def check_triangulation(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """三角形分割ネットワークの F_U は正定値"""
    collector = _Collector("triangulation_invertible", 0.0)
    trace = _Collector("trace_identity", 1e-12)
    for index in range(count):
        dim = 2 if index % 2 == 0 else 3
        instance = random_network(rng, dim, _tag_count(rng, scale))
        block = tag_fim(instance.graph, instance.positions, instance.noise)
        smallest = float(np.linalg.eigvalsh(block)[0])
        collector.add(-smallest, instance, passed=smallest > 0.0)

        graph = instance.graph
        expected = sum(graph.degree(i) for i in graph.tags) / instance.noise.sigma ** 2
        trace.add(abs(float(np.trace(block)) - expected) / expected, instance)
    return [collector.result(), trace.result()]


def check_potential_gradients(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """J_A / J_D / J_E の解析勾配と中心差分"""
    results = []
    for kind in ("A", "D", "E"):
        collector = _Collector(f"gradient_{kind}", 1e-5)
        for index in range(count):
            instance = random_network(rng, 2 if index % 2 == 0 else 3, _tag_count(rng, scale, 2))
            graph, noise = instance.graph, instance.noise
            try:
                analytic = potential_gradient(kind, graph, instance.positions, noise)
            except LocalizabilityError as e:
                collector.fail(instance, str(e))
                continue
            numeric = central_difference(
                lambda p: potential_value(kind, tag_fim(graph, p, noise)), instance.positions, range(graph.node_count)
            )
            collector.add(_relative_error(analytic.gradients, numeric), instance)
        results.append(collector.result())
    return results


def check_constrained_gradients(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """J_c(D) と J_c(RP) の解析勾配と中心差分（実現可能な配置上）"""
    distance = _Collector("gradient_constrained_D", 1e-5)
    relative = _Collector("gradient_constrained_RP", 1e-4)
    for _ in range(count):
        instance = random_ugv_instance(rng)
        graph, noise, groups = instance.graph, instance.noise, instance.groups
        tags = list(graph.tags)
        try:
            _, analytic = distance_constrained_potential_gradient(groups, graph, instance.positions, noise, tags)
            numeric = central_difference(
                lambda p: distance_constrained_potential_gradient(groups, graph, p, noise, [])[0], instance.positions, tags
            )
            distance.add(_relative_error(analytic.gradients, numeric), instance)
        except LocalizabilityError as e:
            distance.fail(instance, str(e))
        try:
            analytic = rp_potential_gradient(graph, instance.positions, noise, groups, None, tags)
            numeric = central_difference(
                lambda p: rp_constrained_crlb(graph, p, noise, groups).trace, instance.positions, tags
            )
            relative.add(_relative_error(analytic.gradients, numeric), instance)
        except LocalizabilityError as e:
            relative.fail(instance, str(e))
    return [distance.result(), relative.result()]


def check_distributed(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """分散 D / A / E 勾配と集中計算の一致、メッセージの 1 ホップ局所性"""
    collectors = {
        "D": _Collector("distributed_D", 1e-5),
        "A": _Collector("distributed_A", 1e-5),
        "E": _Collector("distributed_E", 1e-3),
    }
    locality = _Collector("locality_audit", 0.0)
    for _ in range(count):
        instance = random_network(rng, 2, 3)
        graph, positions, noise = instance.graph, instance.positions, instance.noise
        for kind, collector in collectors.items():
            network = RoundNetwork(graph)
            try:
                central = potential_gradient(kind, graph, positions, noise)
                if kind == "D":
                    distributed = distributed_dopt_gradient(network, positions, noise, max_rounds=200000)
                elif kind == "A":
                    distributed = distributed_aopt_gradient(network, positions, noise, max_rounds=200000)
                else:
                    beta = 1.0 / float(np.linalg.eigvalsh(tag_fim(graph, positions, noise))[-1])
                    estimate = power_iteration_eigvec(network, positions, noise, beta=beta, inner_rounds=60,
                                                      outer_iters=1500, rng=rng)
                    distributed = distributed_eopt_gradient(network, positions, noise, estimate)
            except LocalizabilityError as e:
                collector.fail(instance, str(e))
                continue
            collector.add(_relative_error(distributed.gradients, central.gradients), instance)
            locality.add(0.0 if audit_locality(network) else 1.0, instance)
    return [c.result() for c in collectors.values()] + [locality.result()]


def check_power_iteration(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """分散べき乗法の固有値・固有ベクトルと密行列の固有値分解"""
    value = _Collector("power_eigenvalue", 1e-3)
    vector = _Collector("power_eigenvector", 1e-3)
    for _ in range(count):
        instance = random_network(rng, 2, 3)
        graph, positions, noise = instance.graph, instance.positions, instance.noise
        block = tag_fim(graph, positions, noise)
        try:
            smallest, reference = min_eigenpair(block)
            beta = 1.0 / float(np.linalg.eigvalsh(block)[-1])
            estimate = power_iteration_eigvec(RoundNetwork(graph, record=False), positions, noise, beta=beta,
                                              inner_rounds=60, outer_iters=1500, rng=rng)
        except LocalizabilityError as e:
            value.fail(instance, str(e))
            continue
        value.add(abs(estimate.eigenvalue - smallest) / smallest, instance)
        vector.add(1.0 - abs(float(estimate.stacked() @ reference)), instance)
    return [value.result(), vector.result()]


def check_psd_ordering(rng: np.random.Generator, count: int, scale: DeskScale) -> List[PropertyResult]:
    """F_U⁻¹ ⪰ B_D ⪰ B_RP（位置ブロック）"""
    unconstrained = _Collector("psd_unconstrained_vs_D", 1e-9)
    constrained = _Collector("psd_D_vs_RP", 1e-9)
    for _ in range(count):
        instance = random_ugv_instance(rng)
        graph, positions, noise, groups = instance.graph, instance.positions, instance.noise, instance.groups
        block = tag_fim(graph, positions, noise)
        bound_d = constrained_crlb(block, distance_nullspace(groups, positions, graph.tag_count)).matrix
        bound_rp = rp_constrained_crlb(graph, positions, noise, groups).position_block
        unconstrained.add(max(0.0, -float(np.linalg.eigvalsh(np.linalg.inv(block) - bound_d)[0])), instance)
        constrained.add(max(0.0, -float(np.linalg.eigvalsh(bound_d - bound_rp)[0])), instance)
    return [unconstrained.result(), constrained.result()]


SUITES: Dict[str, Tuple[Callable[[np.random.Generator, int, DeskScale], List[PropertyResult]], str]] = {
    "fim_identity": (check_fim_identity, "identity"),
    "triangulation": (check_triangulation, "triangulation"),
    "potential_gradients": (check_potential_gradients, "gradient"),
    "constrained_gradients": (check_constrained_gradients, "gradient"),
    "distributed": (check_distributed, "distributed"),
    "power_iteration": (check_power_iteration, "power"),
    "psd_ordering": (check_psd_ordering, "psd"),
}


def run_verification(seed: int = 0, scale: DeskScale = DeskScale(), suites: Optional[Iterable[str]] = None) -> VerificationReport:
    """
    性質検査を実行します。

    各スイートは default_rng([seed, スイート番号]) を使います。

    Args:
        seed (int): 乱数シード
        scale (DeskScale): インスタンス数
        suites: 実行するスイート名（省略時は全て）

    Returns:
        VerificationReport: 検査結果
    """
    names = list(SUITES) if suites is None else list(suites)
    report = VerificationReport(seed)
    for name in names:
        if name not in SUITES:
            raise ValueError(f"未知の検査スイートです: {name}")
        check, size_field = SUITES[name]
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        logger.info("検査スイート %s を実行します", name)
        report.results.extend(check(rng, getattr(scale, size_field), scale))
    return report
