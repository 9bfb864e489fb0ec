from typing import List, Optional
from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="TCC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )

    # Project name and version
    PROJECT_NAME: str = "TCC Pyramid"
    VERSION: str = "0.1.0"
    API_V1_STR: str = "/api/v1"
    BACKEND_CORS_ORIGINS: List[str] = ["*"]

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Artifacts
    OUTPUT_DIR: str = "runs"
    DEFAULT_SEED: int = 0

    # Gradient checking
    GRADCHECK_EPS: float = 1e-5
    GRADCHECK_TOLERANCE: float = 1e-4
    GRADCHECK_ATOL: float = 1e-10

    # Reference-scale complexity (800x1216 input, width 256)
    REFERENCE_IMAGE_HEIGHT: int = 800
    REFERENCE_IMAGE_WIDTH: int = 1216
    REFERENCE_PYRAMID_WIDTH: int = 256

    # Testing
    TESTING: bool = False
    TEST_OUTPUT_DIR: Optional[str] = None

    def get_output_dir(self) -> str:
        """Get the artifact directory based on environment."""
        if self.TESTING and self.TEST_OUTPUT_DIR:
            return self.TEST_OUTPUT_DIR
        return self.OUTPUT_DIR


@lru_cache()
def get_settings() -> Settings:
    """Create cached settings instance."""
    return Settings()

settings = get_settings()
