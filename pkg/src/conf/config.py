import logging
from typing import Any

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    OUTPUT_DIR: str = "out"
    DEFAULT_SEED: int = 1
    SWEEP_WORKERS: int = 4

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: Any):
        v = str(v).upper()
        if v not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        return v

    @field_validator("SWEEP_WORKERS")
    @classmethod
    def validate_workers(cls, v: int):
        if v < 1:
            raise ValueError("SWEEP_WORKERS must be at least 1")
        return v

    model_config = SettingsConfigDict(extra = 'ignore', env_file = ".env", env_file_encoding = "utf-8")  # noqa


config = Settings()


def setup_logging(level: str | None = None) -> None:
    """
    The setup_logging function configures the root logger once for the whole process.
    Simulation modules only ever call logging.getLogger(__name__), so the level chosen here
    decides how chatty a run is without touching its results.

    :param level: str | None: Override for config.LOG_LEVEL
    :return: None
    """
    logging.basicConfig(level = (level or config.LOG_LEVEL).upper(), format = config.LOG_FORMAT, force = True)
