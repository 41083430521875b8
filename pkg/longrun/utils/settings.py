import logging
import os

from dotenv import load_dotenv

from longrun.exceptions import ConfigError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class SettingsError(ConfigError):
    def __init__(self, message: str, variable: str):
        super().__init__(message)
        self.variable = variable


class Settings:
    """Process-wide defaults for the CLI, read from the environment."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self.THREADS = None
        self.OUT_DIR = None
        self.LOG_LEVEL = None
        self._initialized = True

        self._load_config()

    @classmethod
    def reset(cls) -> None:
        cls._instance = None

    def _get_env(self, name: str, default: str) -> str:
        value = os.environ.get(name)
        if value is None or value.strip() == "":
            return default
        return value.strip()

    def _load_config(self):
        load_dotenv()
        threads = self._get_env("LONGRUN_THREADS", "1")
        try:
            self.THREADS = int(threads)
        except ValueError as e:
            logger.error(f"LONGRUN_THREADS is not an integer: {threads}")
            raise SettingsError(
                "LONGRUN_THREADS must be an integer", "LONGRUN_THREADS"
            ) from e
        if self.THREADS < 1:
            logger.error(f"LONGRUN_THREADS must be >= 1, got {self.THREADS}")
            raise SettingsError(
                "LONGRUN_THREADS must be >= 1", "LONGRUN_THREADS"
            )

        self.OUT_DIR = self._get_env("LONGRUN_OUT", "out")
        self.LOG_LEVEL = self._get_env("LONGRUN_LOG_LEVEL", "INFO").upper()

    def get_threads(self) -> int:
        if self.THREADS is None:
            self._load_config()
        return self.THREADS

    def get_out_dir(self) -> str:
        if self.OUT_DIR is None:
            self._load_config()
        return self.OUT_DIR

    def get_log_level(self) -> int:
        if self.LOG_LEVEL is None:
            self._load_config()

        level = logging.getLevelName(self.LOG_LEVEL)
        if not isinstance(level, int):
            logger.warning(
                f"Unknown LONGRUN_LOG_LEVEL {self.LOG_LEVEL}, using INFO"
            )
            return logging.INFO
        return level
