from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from dual_positioning.errors import ConfigError
from dual_positioning.models import SolverOptions


ROOT_DIR = Path(__file__).resolve().parents[1]
load_dotenv(ROOT_DIR / ".env", override=False)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() == "true"


def _env_number(name: str, default: str, kind: type) -> int | float:
    raw = os.getenv(name, default).strip()
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}={raw!r} is not a valid {kind.__name__}", code="INVALID_VALUE") from exc


def _resolve(path_value: str) -> Path:
    path = Path(path_value)
    return path if path.is_absolute() else ROOT_DIR / path


@dataclass(frozen=True)
class Settings:
    default_seed: int
    output_dir: Path
    cache_path: Path
    cache_enabled: bool
    log_level: str
    sweep_workers: int
    bench_calls: int
    strict_epochs: bool
    range_floor_m: float
    simplified_score: bool

    @classmethod
    def from_env(cls) -> "Settings":
        """Build validated runtime settings from environment variables.

        Input:
            Environment variables loaded via `.env` and process env.

        Output:
            A `Settings` instance with typed values and absolute local paths.

        Notes:
            Relative `OUTPUT_DIR` and `CACHE_PATH` values are resolved
            against the project root.
        """
        settings = cls(
            default_seed=int(_env_number("DEFAULT_SEED", "20180101", int)),
            output_dir=_resolve(os.getenv("OUTPUT_DIR", "output")),
            cache_path=_resolve(os.getenv("CACHE_PATH", ".cache/sweeps.sqlite")),
            cache_enabled=_env_flag("CACHE_ENABLED"),
            log_level=os.getenv("LOG_LEVEL", "WARNING").strip().upper(),
            sweep_workers=int(_env_number("SWEEP_WORKERS", "1", int)),
            bench_calls=int(_env_number("BENCH_CALLS", "1000", int)),
            strict_epochs=_env_flag("STRICT_EPOCHS"),
            range_floor_m=float(_env_number("RANGE_FLOOR_M", "1e-3", float)),
            simplified_score=_env_flag("SIMPLIFIED_SCORE"),
        )
        if settings.sweep_workers < 1:
            raise ConfigError("SWEEP_WORKERS must be >= 1", code="INVALID_VALUE")
        if settings.bench_calls < 1:
            raise ConfigError("BENCH_CALLS must be >= 1", code="INVALID_VALUE")
        if settings.range_floor_m <= 0.0:
            raise ConfigError("RANGE_FLOOR_M must be > 0", code="INVALID_VALUE")
        return settings

    def solver_options(self) -> SolverOptions:
        """Default CDL options derived from these settings."""
        return SolverOptions.from_settings(self)


def get_settings() -> Settings:
    """Return application settings for the current process.

    Output:
        A `Settings` object created from environment values.
    """
    return Settings.from_env()


def configure_logging(level: str | int = "WARNING") -> None:
    """Install the package log format on the root logger.

    `basicConfig` is a no-op once handlers exist, so the level is applied
    separately to honour a later `--log-level`.
    """
    if isinstance(level, str):
        resolved = logging.getLevelName(level.strip().upper())
        if not isinstance(resolved, int):
            raise ConfigError(f"unknown log level {level!r}", code="INVALID_VALUE")
        level = resolved
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
