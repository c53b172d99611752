from pydantic_settings import BaseSettings
from typing import Literal


class Settings(BaseSettings):
    """Application settings using Pydantic BaseSettings."""

    # Application Configuration
    app_name: str = "BootViT"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # Storage
    data_dir: str = "data"
    output_dir: str = "runs"

    # Numerics
    dtype: Literal["float32", "float64"] = "float32"

    # Data pipeline
    prefetch_batches: int = 2  # bounded queue depth
    num_workers: int = 1  # augmentation threads

    # Dataset archives (binary versions)
    cifar10_url: str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
    cifar100_url: str = "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz"
    download_timeout: float = 300.0

    model_config = {
        "env_prefix": "BOOTVIT_",
        "env_file": [".env", "../.env"],
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "extra": "ignore"
    }


# Global settings instance
def get_settings():
    """Get a fresh settings instance."""
    return Settings()

settings = get_settings()
