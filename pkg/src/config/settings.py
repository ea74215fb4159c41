import os
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings."""

    # App settings
    APP_TITLE: str = "BPDepth Completion Backend"
    APP_DESCRIPTION: str = "Depth completion by bilateral propagation, fusion and spatial propagation"
    APP_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"

    # Run config and default locations
    project_root: Path = Path(__file__).parent.parent.parent
    BPDEPTH_CONFIG: Optional[str] = None
    SCENE_DIRECTORY: str = os.path.join(project_root, '.scenes')
    OUTPUT_DIRECTORY: str = os.path.join(project_root, '.runs')
    CHECKPOINT_PATH: Optional[str] = None

    # Numerical constants
    BN_EPS: float = 1e-5
    BN_MOMENTUM: float = 0.1
    POOL_EPS: float = 1e-8
    AFFINITY_EPS: float = 1e-12  # below this l1 mass the affinity falls back to identity
    GRADCHECK_STEP: float = 1e-5
    GRADCHECK_RTOL: float = 1e-4
    GRADCHECK_FLOOR: float = 1e-6

    # Workers used by sparsity sweeps when the caller does not say
    DEFAULT_WORKERS: int = 1

    model_config = SettingsConfigDict(
        env_file=os.path.join(Path(__file__).parent.parent.parent, '.env'),
        env_file_encoding='utf-8',
        extra='ignore'
    )


# Create a global settings instance
settings = Settings()
