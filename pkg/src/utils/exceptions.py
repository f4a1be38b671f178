"""
ドメイン例外

ローカライザビリティ計算・分散プロトコル・シナリオ実行で送出する例外を
一箇所にまとめます。CLI は ConfigurationError を終了コード 2、
それ以外の LocalizabilityError を終了コード 1 に対応付けます。
"""

from typing import Optional, Sequence, Tuple


class LocalizabilityError(Exception):
    """本パッケージが送出する例外の基底クラス"""


class GraphDefinitionError(LocalizabilityError, ValueError):
    """測距グラフの定義が不正な場合"""


class DegenerateConfigurationError(LocalizabilityError):
    """配置が退化している場合（全点一致、3次元での共線など）"""


class TriangulationError(LocalizabilityError):
    """三角形分割グラフの構築に失敗した場合"""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class SingularGeometryError(LocalizabilityError):
    """エッジの両端が一致し距離が 0 になる場合"""

    def __init__(self, message: str, edge: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.edge = edge


class SingularFisherError(LocalizabilityError):
    """F_U（または拘束付き FIM）が特異な場合"""

    def __init__(self, message: str, lambda_min: float = 0.0):
        super().__init__(message)
        self.lambda_min = lambda_min


class EigenvalueMultiplicityError(LocalizabilityError):
    """最小固有値が重複しており E 最適勾配が定義できない場合"""

    def __init__(self, message: str, gap: float = 0.0):
        super().__init__(message)
        self.gap = gap


class ConvergenceError(LocalizabilityError):
    """反復計算が上限までに収束しなかった場合"""

    def __init__(self, message: str, residuals: Sequence[float] = (), rounds: int = 0):
        super().__init__(message)
        self.residuals = list(residuals)
        self.rounds = rounds


class DivergenceError(ConvergenceError):
    """残差が連続して増加し発散と判定された場合"""


class LocalityViolationError(LocalizabilityError):
    """隣接ノード以外へメッセージを送ろうとした場合"""

    def __init__(self, sender: int, receiver: int):
        super().__init__(f"ノード {sender} からノード {receiver} への送信は隣接関係にありません")
        self.sender = sender
        self.receiver = receiver


class BarrierViolationError(LocalizabilityError):
    """ロボットがバウンディングボックスの境界上または外側にある場合"""

    def __init__(self, message: str, position: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.position = None if position is None else tuple(float(v) for v in position)


class EstimationFailureError(LocalizabilityError):
    """モンテカルロ試行の失敗率がしきい値を超えた場合"""

    def __init__(self, message: str, failures: int = 0, rate: float = 0.0):
        super().__init__(message)
        self.failures = failures
        self.rate = rate


class ConfigurationError(LocalizabilityError, ValueError):
    """設定ファイルやパラメータが不正な場合（field にドット区切りのパスを保持）"""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
