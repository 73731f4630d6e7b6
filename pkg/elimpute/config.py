import os
import logging
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# Cached settings, populated on first use
settings: Optional["Settings"] = None


@dataclass(frozen=True)
class Settings:
    log_level: str = "WARNING"
    default_jobs: int = 1
    propensity_floor: float = 1e-3


def load_settings() -> "Settings":
    """Read settings from the environment (and a .env file when present)"""
    global settings
    load_dotenv()

    level = os.getenv("EL_MISSING_LOG", "WARNING").upper()
    if level not in LOG_LEVELS:
        logger.warning(f"Unknown EL_MISSING_LOG level {level!r}, using WARNING")
        level = "WARNING"

    try:
        jobs = int(os.getenv("EL_MISSING_JOBS", "1"))
    except ValueError:
        logger.warning("EL_MISSING_JOBS is not an integer, using 1")
        jobs = 1

    floor = float(os.getenv("EL_MISSING_PROPENSITY_FLOOR", "1e-3"))

    settings = Settings(log_level=level, default_jobs=max(jobs, 1), propensity_floor=floor)
    return settings


def get_settings() -> "Settings":
    """Get the loaded settings, loading them on first call"""
    if settings is None:
        return load_settings()
    return settings


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; level defaults to EL_MISSING_LOG"""
    level = level or get_settings().log_level
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(getattr(logging, level, logging.WARNING))
