"""Runtime settings for the Mutual-Taught simulation lab."""
import logging
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from .env file if it exists
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)


class Settings(BaseSettings):
    """Application settings."""

    # Logging
    LOG_LEVEL: str = Field("INFO", description="Root log level")

    # Experiment execution
    OUTPUT_DIR: Path = Field(Path("runs"), description="Default artifact directory")
    WORKERS: int = Field(1, ge=1, description="Process pool size for seed sweeps")
    SHOW_PROGRESS: bool = Field(False, description="Show a progress bar over seeds")
    MIN_ABLATION_SEEDS: int = Field(
        10, ge=1, description="Ablations with fewer seeds log a warning"
    )

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def ensure_known_level(cls, v: str) -> str:
        """Reject log levels the logging module does not know."""
        level = str(v).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"Unknown log level: {v}")
        return level


# Create settings instance
settings = Settings()

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)
