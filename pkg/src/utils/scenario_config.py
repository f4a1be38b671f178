"""
シナリオ設定（YAML）の読み込みと検証

YAML 文書を入れ子の dataclass（ScenarioConfig）に変換します。未知のキー・型の不一致・値域の違反は
ドット区切りのフィールドパス付きの ConfigurationError になります。空の文書は点検シナリオの既定値です。
"""

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

import yaml

from src.utils.exceptions import ConfigurationError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

SCENARIO_NAMES = ("inspection", "ugv")
CONSTRAINT_MODES = ("D", "RP")
POTENTIAL_KINDS = ("A", "D", "E")
NOISE_KINDS = ("additive", "lognormal")
SOLVERS = ("richardson", "jacobi")


@dataclass
class NetworkSection:
    dim: int = 2
    tags: List[List[float]] = field(default_factory=lambda: [[1.0, -0.5], [5.0, -0.5]])
    anchors: List[List[float]] = field(default_factory=lambda: [[-2.0, 0.0], [-1.5, 0.0], [8.0, 0.0]])
    # None の場合は全ノード間で測距
    edges: Optional[List[List[int]]] = None


@dataclass
class NoiseSection:
    kind: str = "additive"
    sigma: float = 0.1


@dataclass
class PotentialSection:
    kind: str = "D"
    gain_localization: float = 2.0
    gain_constraint: float = 0.01
    step_cap: float = 0.2


@dataclass
class DistributedSection:
    enabled: bool = False
    solver: str = "richardson"
    eta: Optional[float] = None
    tol: float = 1e-10
    max_rounds: int = 20000
    settle_rounds: int = 0
    inner_rounds: int = 50
    outer_iters: int = 200


@dataclass
class GroupSection:
    robot: int = 0
    tags: List[int] = field(default_factory=lambda: [0, 1])
    offsets: List[List[float]] = field(default_factory=lambda: [[1.0, 0.0], [-1.0, 0.0]])


@dataclass
class ConstraintSection:
    mode: str = "D"
    groups: List[GroupSection] = field(default_factory=lambda: [GroupSection()])
    delta: float = 0.5
    penalty: Optional[float] = None
    iterations: int = 200
    waypoint_every: int = 10
    armijo_initial_step: float = 1.0
    armijo_contraction: float = 0.5
    armijo_sufficient_decrease: float = 1e-4
    armijo_max_backtracks: int = 30


@dataclass
class BoxSection:
    anchor: int = 2
    x_min: float = -6.0
    x_max: float = -0.2
    y_min: float = -3.0
    y_max: float = 12.0


def _default_boxes() -> List[BoxSection]:
    return [
        BoxSection(2, -6.0, -0.2, -3.0, 12.0),
        BoxSection(3, -6.0, -0.2, -3.0, 12.0),
        BoxSection(4, 6.2, 12.0, -3.0, 12.0),
    ]


@dataclass
class ScenarioSection:
    name: str = "inspection"
    steps: int = 100
    step_duration: float = 1.0
    dt: float = 0.05
    dt_max: float = 0.01
    structure_length: float = 6.0
    structure_height: float = 10.0
    waypoint_spacing: float = 0.1
    transceiver_offset: List[float] = field(default_factory=lambda: [0.5, 0.5])
    initial_heading: float = math.pi / 2
    kp: float = 3.0
    ki: float = 0.5
    influence_distance: float = 1.5
    boxes: List[BoxSection] = field(default_factory=_default_boxes)
    plan_on_estimates: bool = False
    robot_position: List[float] = field(default_factory=lambda: [-15.0, -4.0])
    robot_heading: float = -math.pi / 8
    pose_gain_position: float = 1.0
    pose_gain_heading: float = 2.0
    pose_tolerance: float = 0.02
    settle_time: float = 20.0


@dataclass
class MonteCarloSection:
    enabled: bool = True
    trials: int = 100
    every: int = 5
    table_trials: int = 500
    progress: bool = False


@dataclass
class OutputSection:
    directory: Optional[str] = None
    float_format: str = "%.10g"


@dataclass
class ScenarioConfig:
    seed: int = 0
    network: NetworkSection = field(default_factory=NetworkSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    potential: PotentialSection = field(default_factory=PotentialSection)
    distributed: DistributedSection = field(default_factory=DistributedSection)
    constraints: ConstraintSection = field(default_factory=ConstraintSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    montecarlo: MonteCarloSection = field(default_factory=MonteCarloSection)
    output: OutputSection = field(default_factory=OutputSection)


def default_config(name: str = "inspection") -> ScenarioConfig:
    """シナリオごとの既定設定"""
    if name == "inspection":
        return ScenarioConfig()
    if name == "ugv":
        config = ScenarioConfig()
        scenario = replace(config.scenario, name="ugv", boxes=[])
        heading = scenario.robot_heading
        c, s = math.cos(heading), math.sin(heading)
        x, y = scenario.robot_position
        tags = [[x + c * ox - s * oy, y + s * ox + c * oy] for ox, oy in GroupSection().offsets]
        config.network = NetworkSection(tags=tags, anchors=[[-5.0, 5.0], [5.0, -5.0], [5.0, 5.0]])
        config.scenario = scenario
        return config
    raise ConfigurationError(f"未知のシナリオです: {name}（{', '.join(SCENARIO_NAMES)}）", "scenario.name")


# ---------------------------------------------------------------------------
# 変換
# ---------------------------------------------------------------------------

def _type_name(annotation: Any) -> str:
    return getattr(annotation, "__name__", str(annotation))


def _convert(annotation: Any, value: Any, path: str) -> Any:
    origin = get_origin(annotation)
    if origin is Union:
        options = [a for a in get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _convert(options[0], value, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigurationError(f"リストが必要です（{type(value).__name__} が指定されました）", path)
        (item_type,) = get_args(annotation)
        return [_convert(item_type, item, f"{path}[{i}]") for i, item in enumerate(value)]
    if is_dataclass(annotation):
        if not isinstance(value, dict):
            raise ConfigurationError("マッピングが必要です", path)
        return _merge(annotation(), value, path)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"真偽値が必要です: {value!r}", path)
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"整数が必要です: {value!r}", path)
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"数値が必要です: {value!r}", path)
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"文字列が必要です: {value!r}", path)
        return value
    raise ConfigurationError(f"未対応の型 {_type_name(annotation)} です", path)


def _merge(base: Any, data: Dict[str, Any], path: str = "") -> Any:
    """既定値 base に data を重ねた新しい dataclass を返します。"""
    hints = get_type_hints(type(base))
    names = {f.name for f in fields(base)}
    updates = {}
    for key, value in data.items():
        field_path = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigurationError(f"未知のキーです（有効なキー: {', '.join(sorted(names))}）", field_path)
        annotation = hints[key]
        current = getattr(base, key)
        if is_dataclass(annotation) and isinstance(value, dict):
            updates[key] = _merge(current, value, field_path)
        else:
            updates[key] = _convert(annotation, value, field_path)
    return replace(base, **updates)


def _require(condition: bool, message: str, path: str) -> None:
    if not condition:
        raise ConfigurationError(message, path)


def validate_config(config: ScenarioConfig) -> ScenarioConfig:
    """値域の検証（違反はフィールドパス付きの ConfigurationError）"""
    network, noise = config.network, config.noise
    _require(network.dim in (2, 3), f"次元は 2 または 3 です: {network.dim}", "network.dim")
    _require(len(network.tags) >= 1, "タグが 1 つ以上必要です", "network.tags")
    _require(len(network.anchors) >= 2, "アンカーが 2 つ以上必要です", "network.anchors")
    for name in ("tags", "anchors"):
        for i, point in enumerate(getattr(network, name)):
            _require(len(point) == network.dim, f"座標の次元が {network.dim} ではありません", f"network.{name}[{i}]")
    if network.edges is not None:
        for i, edge in enumerate(network.edges):
            _require(len(edge) == 2, "エッジは 2 つのノード番号です", f"network.edges[{i}]")

    _require(noise.kind in NOISE_KINDS, f"ノイズモデルは {NOISE_KINDS} のいずれかです", "noise.kind")
    _require(math.isfinite(noise.sigma) and noise.sigma > 0.0, f"sigma は正の値である必要があります: {noise.sigma}", "noise.sigma")

    potential = config.potential
    _require(potential.kind in POTENTIAL_KINDS, f"ポテンシャルは {POTENTIAL_KINDS} のいずれかです", "potential.kind")
    _require(potential.gain_localization >= 0.0, "0 以上である必要があります", "potential.gain_localization")
    _require(potential.gain_constraint >= 0.0, "0 以上である必要があります", "potential.gain_constraint")
    _require(potential.step_cap > 0.0, "正の値である必要があります", "potential.step_cap")

    distributed = config.distributed
    _require(distributed.solver in SOLVERS, f"ソルバは {SOLVERS} のいずれかです", "distributed.solver")
    _require(distributed.eta is None or distributed.eta > 0.0, "正の値である必要があります", "distributed.eta")
    _require(distributed.max_rounds >= 1, "1 以上である必要があります", "distributed.max_rounds")
    _require(distributed.inner_rounds >= 1, "1 以上である必要があります", "distributed.inner_rounds")
    _require(distributed.outer_iters >= 1, "1 以上である必要があります", "distributed.outer_iters")

    constraints = config.constraints
    _require(constraints.mode in CONSTRAINT_MODES, f"制約は {CONSTRAINT_MODES} のいずれかです", "constraints.mode")
    _require(constraints.delta >= 0.0, "0 以上である必要があります", "constraints.delta")
    _require(constraints.penalty is None or constraints.penalty >= 0.0, "0 以上である必要があります", "constraints.penalty")
    _require(constraints.waypoint_every >= 1, "1 以上である必要があります", "constraints.waypoint_every")
    _require(0.0 < constraints.armijo_contraction < 1.0, "(0, 1) の範囲です", "constraints.armijo_contraction")
    for i, group in enumerate(constraints.groups):
        _require(len(group.tags) == len(group.offsets), "tags と offsets の数が一致しません", f"constraints.groups[{i}].offsets")
        _require(len(group.tags) >= 2, "2 つ以上のタグが必要です", f"constraints.groups[{i}].tags")

    scenario = config.scenario
    _require(scenario.name in SCENARIO_NAMES, f"シナリオは {SCENARIO_NAMES} のいずれかです", "scenario.name")
    for name in ("step_duration", "dt", "dt_max", "kp", "ki", "influence_distance", "pose_gain_position", "pose_gain_heading"):
        _require(getattr(scenario, name) > 0.0, "正の値である必要があります", f"scenario.{name}")
    _require(scenario.steps >= 0, "0 以上である必要があります", "scenario.steps")
    _require(scenario.settle_time >= 0.0, "0 以上である必要があります", "scenario.settle_time")
    _require(len(scenario.transceiver_offset) == 2, "(α, β) の 2 要素です", "scenario.transceiver_offset")
    _require(scenario.transceiver_offset[0] != 0.0, "α ≠ 0 である必要があります", "scenario.transceiver_offset")
    for i, box in enumerate(scenario.boxes):
        _require(box.x_min < box.x_max and box.y_min < box.y_max, "箱の内部が空です", f"scenario.boxes[{i}]")

    montecarlo = config.montecarlo
    _require(montecarlo.trials >= 2, "2 以上である必要があります", "montecarlo.trials")
    _require(montecarlo.table_trials >= 2, "2 以上である必要があります", "montecarlo.table_trials")
    _require(montecarlo.every >= 1, "1 以上である必要があります", "montecarlo.every")
    return config


def config_from_dict(data: Optional[Dict[str, Any]]) -> ScenarioConfig:
    """辞書（YAML 文書）から設定を組み立てます。scenario.name に応じた既定値を土台にします。"""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigurationError("設定文書の最上位はマッピングである必要があります", "<root>")
    scenario = data.get("scenario") or {}
    name = scenario.get("name", "inspection") if isinstance(scenario, dict) else "inspection"
    if not isinstance(name, str):
        raise ConfigurationError(f"文字列が必要です: {name!r}", "scenario.name")
    return validate_config(_merge(default_config(name), data))


def parse_config(path: Union[str, Path]) -> ScenarioConfig:
    """
    YAML のシナリオ設定を読み込みます。

    Raises:
        ConfigurationError: 読み込み・検証に失敗した場合
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"設定ファイルを読み込めません: {e}", str(path)) from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"YAML の構文エラー: {e}", str(path)) from e
    config = config_from_dict(data)
    logger.info("設定を読み込みました: %s (scenario=%s)", path, config.scenario.name)
    return config


def serialize_config(config: ScenarioConfig) -> Dict[str, Any]:
    """parse_config で同じ設定に戻る辞書を返します。"""
    return asdict(config)


def dump_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(serialize_config(config), sort_keys=False, allow_unicode=True)
