from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix BEAS_)."""

    # Application Settings
    app_name: str = Field("BEAS Federated Ledger Simulator")
    debug: bool = Field(False)
    log_level: str = Field("INFO")
    log_format: str = Field("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    api_prefix: str = Field("/api/v1")

    # Storage
    ledger_dir: str = Field("runs/ledgers", description="Directory served by the ledger query API")
    output_dir: str = Field("runs", description="Default experiment output directory")

    # Simulation
    max_workers: int = Field(1, ge=1, description="Client-training threads per round; 1 runs sequentially")
    metrics_float_format: str = Field("%.17g")

    model_config = SettingsConfigDict(
        env_prefix="BEAS_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
