"""
実行環境の設定

config/settings.ini（configparser）と config/runtime.env（python-dotenv）から
出力先・ログレベル・モンテカルロの並列数と打ち切り率を読み出します。
"""

import configparser
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

DEFAULT_THREAD_ENV_VAR = "LOCPOT_THREADS"
DEFAULT_OUTPUT_DIR = "data/output"


@lru_cache(maxsize=8)
def _read_settings(path: Path, mtime: float) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    return parser


class EnvironmentUtils:
    """settings.ini と環境変数へのアクセス（すべて静的メソッド）"""

    BASE_DIR = Path(__file__).resolve().parent.parent.parent

    @staticmethod
    def set_project_root(path: Path) -> None:
        EnvironmentUtils.BASE_DIR = Path(path)

    @staticmethod
    def get_project_root() -> Path:
        return EnvironmentUtils.BASE_DIR

    @staticmethod
    def load_env(env_file: Optional[Path] = None, required: bool = False) -> bool:
        """
        config/runtime.env を読み込みます。すでに設定済みの環境変数は上書きしません。

        Args:
            env_file (Optional[Path]): 読み込むファイル（省略時は config/runtime.env）
            required (bool): ファイルが無い場合に例外にするか

        Returns:
            bool: 読み込んだ場合 True

        Raises:
            FileNotFoundError: required=True でファイルが無い場合
        """
        path = env_file or EnvironmentUtils.BASE_DIR / "config" / "runtime.env"
        if not path.exists():
            if required:
                raise FileNotFoundError(f"{path} が見つかりません")
            return False
        load_dotenv(path, override=False)
        return True

    @staticmethod
    def get_env_var(key: str, default: Optional[Any] = None) -> Any:
        return os.getenv(key, default)

    @staticmethod
    def get_config_file(file_name: str = "settings.ini") -> Path:
        """
        Raises:
            FileNotFoundError: config/ に file_name が無い場合
        """
        path = EnvironmentUtils.BASE_DIR / "config" / file_name
        if not path.exists():
            raise FileNotFoundError(f"設定ファイルがありません: {path}")
        return path

    @staticmethod
    def get_config_value(section: str, key: str, default: Optional[Any] = None) -> Any:
        """
        settings.ini の値を int / float / bool に変換して返します。

        ファイル・セクション・キーのいずれかが無ければ default を返します。
        """
        try:
            path = EnvironmentUtils.get_config_file()
        except FileNotFoundError:
            return default
        parser = _read_settings(path, path.stat().st_mtime)
        if not parser.has_option(section, key):
            return default
        return EnvironmentUtils._coerce(parser.get(section, key))

    @staticmethod
    def _coerce(raw: str) -> Union[int, float, bool, str]:
        text = raw.strip()
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                continue
        return text

    @staticmethod
    def resolve_path(path: Union[str, Path], must_exist: bool = False) -> Path:
        """相対パスはプロジェクトルート基準で解決します。"""
        resolved = Path(path)
        if not resolved.is_absolute():
            resolved = EnvironmentUtils.BASE_DIR / resolved
        if must_exist and not resolved.exists():
            raise FileNotFoundError(f"パスが存在しません: {resolved}")
        return resolved

    @staticmethod
    def get_environment() -> str:
        """APP_ENV（既定は development）"""
        return EnvironmentUtils.get_env_var("APP_ENV", "development")

    @staticmethod
    def get_log_level() -> str:
        level = EnvironmentUtils.get_config_value(EnvironmentUtils.get_environment(), "LOG_LEVEL", default="INFO")
        return str(level).upper()

    @staticmethod
    def get_thread_count() -> int:
        """
        モンテカルロ試行のワーカースレッド数

        [RUNTIME] thread_env_var が指す環境変数を読みます。未設定・不正値なら 1 です。
        """
        name = EnvironmentUtils.get_config_value("RUNTIME", "thread_env_var", default=DEFAULT_THREAD_ENV_VAR)
        raw = EnvironmentUtils.get_env_var(str(name))
        try:
            return max(1, int(raw)) if raw is not None else 1
        except ValueError:
            return 1

    @staticmethod
    def get_max_failure_rate(default: float) -> float:
        return float(EnvironmentUtils.get_config_value("MONTECARLO", "max_failure_rate", default=default))

    @staticmethod
    def get_output_dir() -> Path:
        directory = EnvironmentUtils.get_config_value("OUTPUT", "directory", default=DEFAULT_OUTPUT_DIR)
        return EnvironmentUtils.resolve_path(str(directory))
