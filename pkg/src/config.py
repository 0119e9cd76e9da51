import logging

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)


class EngineSettings(BaseSettings):
    """
    Process-level settings, read from NBEATSS_* environment variables or a .env file.
    Experiment parameters live in the JSON experiment configs, not here.
    """
    log_file: str = "nbeats_s.log"
    experiments_dir: str = "experiments"

    # Worker pool size for ensemble members and grid cells
    workers: int = Field(default=1, ge=1)

    # Print a progress line every N training iterations
    progress_every: int = Field(default=100, ge=1)

    model_config = SettingsConfigDict(env_prefix="NBEATSS_", env_file=".env", extra="ignore")


def load_settings():
    try:
        return EngineSettings()
    except ValidationError as e:
        logger.error(f"Settings error, falling back to defaults: {e}")
        return EngineSettings.model_construct()
