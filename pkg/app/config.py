"""
evortho Configuration

Process settings come from environment variables (and .env); the pipeline
run configuration comes from a line-oriented ``key = value`` file plus
``--section.key value`` command-line overrides.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .common import ConfigError, parse_key_value_text
from .models.schemas import (
    FusionConfig,
    GateConfig,
    KeyframeConfig,
    OrthoConfig,
    ReconConfig,
    SimulationConfig,
    StagesConfig,
    SyncConfig,
)


def get_version() -> str:
    # Look for VERSION file in project root
    possible_paths = [
        Path(__file__).parent.parent / "VERSION",
        Path("VERSION"),
    ]

    for path in possible_paths:
        if path.exists():
            return path.read_text().strip()

    return "0.1.0"  # Default fallback


class Settings(BaseSettings):
    """Process-level settings (EVORTHO_* environment variables)"""
    app_name: str = "evortho"
    app_version: str = get_version()
    log_level: str = "INFO"

    # Default worker cap; --threads and the config's `threads` key override it.
    threads: int = 1

    # Events per chunk when streaming events.bin. 1M records = 16 MB.
    chunk_size: int = 1 << 20

    # Converted real recordings for the optional replay tests. Empty skips them.
    dataset_dir: str = ""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="EVORTHO_",
        extra="ignore",
    )

    def model_post_init(self, __context) -> None:
        """Validate settings after initialization"""
        if self.threads < 1:
            raise ValueError(f"EVORTHO_THREADS must be >= 1, got {self.threads}")
        if self.chunk_size < 1:
            raise ValueError(f"EVORTHO_CHUNK_SIZE must be >= 1, got {self.chunk_size}")
        if not isinstance(logging.getLevelName(self.log_level.upper()), int):
            raise ValueError(f"unknown EVORTHO_LOG_LEVEL {self.log_level!r}")


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


class PipelineConfig(BaseModel):
    """One run's configuration. Section keys are ``section.key`` in the file."""

    model_config = ConfigDict(extra="forbid")

    recording: Optional[Path] = None
    output: Optional[Path] = None
    threads: Optional[int] = Field(default=None, ge=1)
    seed: int = 0

    sync: SyncConfig = Field(default_factory=SyncConfig)
    gate: GateConfig = Field(default_factory=GateConfig)
    keyframe: KeyframeConfig = Field(default_factory=KeyframeConfig)
    recon: ReconConfig = Field(default_factory=ReconConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    ortho: OrthoConfig = Field(default_factory=OrthoConfig)
    simulate: SimulationConfig = Field(default_factory=SimulationConfig)
    stages: StagesConfig = Field(default_factory=StagesConfig)

    def worker_count(self) -> int:
        return self.threads or get_settings().threads

    def require_paths(self) -> tuple[Path, Path]:
        if self.recording is None:
            raise ConfigError("config key 'recording' is required for this command")
        if self.output is None:
            raise ConfigError("config key 'output' is required for this command")
        if not self.recording.is_dir():
            raise ConfigError(f"recording directory not found: {self.recording}")
        return self.recording, self.output


_SECTIONS = {
    name
    for name, field in PipelineConfig.model_fields.items()
    if isinstance(field.annotation, type) and issubclass(field.annotation, BaseModel)
}


def _nest(flat: dict[str, str]) -> dict:
    """``{"gate.omega_max": "0.5"}`` -> ``{"gate": {"omega_max": "0.5"}}``, checking keys."""
    nested: dict = {}
    for key, value in flat.items():
        section, dot, name = key.partition(".")
        if dot:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            section_model = PipelineConfig.model_fields[section].annotation
            if name not in section_model.model_fields:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(section, {})[name] = value
        else:
            if key not in PipelineConfig.model_fields or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            nested[key] = value
    return nested


def build_pipeline_config(values: dict[str, str]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(_nest(values))
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(part) for part in err["loc"])
        raise ConfigError(f"invalid config value for {key!r}: {err['msg']}") from exc


def load_pipeline_config(
    path: Optional[Path] = None,
    overrides: Optional[dict[str, str]] = None,
) -> PipelineConfig:
    """Read a config file (optional) and apply overrides key-for-key."""
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        try:
            values = parse_key_value_text(path.read_text(), source=str(path))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    values.update(overrides or {})
    return build_pipeline_config(values)
