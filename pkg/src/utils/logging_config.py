"""
ログ設定

初回の get_logger() でルートロガーに日次ローテーションのファイル出力（logs/app_YYYYMMDD.log）と
標準エラー出力を設定します。レベルは settings.ini の APP_ENV セクションの LOG_LEVEL です。
"""

import logging
import logging.handlers
from datetime import datetime
from typing import Optional, Union

from src.utils.environment import EnvironmentUtils as env

LOG_FORMAT = "%(asctime)s - %(name)s - [%(levelname)s] - %(message)s"
LOG_BACKUPS = 30


class LoggingConfig:
    _initialized = False

    def __init__(self):
        if LoggingConfig._initialized:
            return
        self.log_dir = env.get_project_root() / "logs"
        self.log_level = logging.getLevelName(env.get_log_level())
        if not isinstance(self.log_level, int):
            self.log_level = logging.INFO
        self.setup_logging()
        LoggingConfig._initialized = True

    def setup_logging(self) -> None:
        self.log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.TimedRotatingFileHandler(
            self.log_dir / f"app_{datetime.now():%Y%m%d}.log",
            when="midnight", backupCount=LOG_BACKUPS, encoding="utf-8",
        )
        logging.basicConfig(level=self.log_level, format=LOG_FORMAT, handlers=[file_handler, logging.StreamHandler()])
        logging.getLogger(__name__).debug("ログ出力を開始しました (level=%s)", logging.getLevelName(self.log_level))

    @staticmethod
    def set_level(level: Union[int, str]) -> None:
        """ルートロガーのレベルを変更します（--verbose）。"""
        LoggingConfig()
        if isinstance(level, str):
            level = getattr(logging, level.upper(), logging.INFO)
        logging.getLogger().setLevel(level)


def get_logger(name: Optional[str] = None) -> logging.Logger:
    LoggingConfig()
    return logging.getLogger(name)
