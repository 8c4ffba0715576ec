from __future__ import annotations

from enum import Enum
from functools import lru_cache

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class LogLevel(str, Enum):
    ERROR = "error"
    INFO = "info"
    DEBUG = "debug"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", case_sensitive=False
    )

    log_level: LogLevel = Field(LogLevel.INFO, alias="RESTLESS_BAI_LOG")
    metrics_enabled: bool = Field(True, alias="RESTLESS_BAI_METRICS")
    metrics_file: str = Field("metrics.prom", alias="RESTLESS_BAI_METRICS_FILE")
    default_output_dir: str = Field("out", alias="RESTLESS_BAI_OUTPUT_DIR")

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, value: str | LogLevel) -> LogLevel:
        if isinstance(value, LogLevel):
            return value
        normalized = str(value).strip().lower()
        try:
            return LogLevel(normalized)
        except ValueError as exc:
            raise ValueError("RESTLESS_BAI_LOG must be one of 'error', 'info', 'debug'") from exc

    @field_validator("metrics_file")
    @classmethod
    def validate_metrics_file(cls, value: str) -> str:
        if not value or "/" in value or "\\" in value:
            raise ValueError("RESTLESS_BAI_METRICS_FILE must be a bare file name")
        return value


@lru_cache()
def get_settings() -> Settings:
    return Settings()
