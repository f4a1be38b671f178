"""
出力ファイルの書き出し

表は pandas の DataFrame から CSV に、要約は JSON（キーをソート）に、設定は YAML に書き出します。
同じ入力からは常に同じバイト列が得られます。
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import yaml

from src.utils.logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_FLOAT_FORMAT = "%.10g"


def _plain(value: Any) -> Any:
    """numpy の値や非有限値を JSON に書ける形に直します。"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def ensure_dir(directory: Union[str, Path]) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path], float_format: str = DEFAULT_FLOAT_FORMAT) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    logger.info("CSV を出力しました: %s (%d 行)", path, len(frame))
    return path


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(_plain(data), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("JSON を出力しました: %s", path)
    return path


def write_yaml(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(_plain(data), f, sort_keys=False, allow_unicode=True)
    return path


def export_trace(trace: Any, directory: Union[str, Path], float_format: str = DEFAULT_FLOAT_FORMAT,
                 prefix: Optional[str] = None) -> List[Path]:
    """
    ScenarioTrace を書き出します。

    trace.csv（ステップ・ノードごとの位置）、potentials.csv（ステップごとのポテンシャル）、
    summary.json、モンテカルロを実行した場合は mse_tags.csv と mse_network.csv（b± 付き）。

    Returns:
        List[Path]: 書き出したファイル
    """
    directory = ensure_dir(directory)
    name = f"{prefix}_" if prefix else ""
    written = [
        write_csv(trace.frame, directory / f"{name}trace.csv", float_format),
        write_csv(trace.potentials, directory / f"{name}potentials.csv", float_format),
        write_json(trace.summary, directory / f"{name}summary.json"),
    ]
    if trace.monte_carlo is not None:
        written.append(write_csv(trace.monte_carlo.frame, directory / f"{name}mse_tags.csv", float_format))
    if trace.network_mse is not None:
        written.append(write_csv(trace.network_mse, directory / f"{name}mse_network.csv", float_format))
    return written
