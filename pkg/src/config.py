"""Configuration management for PET Joint Diffusion.

Two layers:
- `Settings`: process-level knobs (threads, logging, default directories),
  overridable through environment variables with the PJD_ prefix.
- `ExperimentConfig`: the strict JSON experiment document every CLI command
  consumes. Unknown keys are rejected in every section.
"""

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .services.errors import ConfigError
from .services.models import ORGAN_NAMES, ClassRoster, ClassWeights


class Settings(BaseSettings):
    """Application settings with environment variable support.

    All settings can be overridden via environment variables with PJD_ prefix.
    Example: PJD_THREADS=4
    """

    model_config = SettingsConfigDict(
        env_prefix="PJD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Compute
    threads: int = 0  # 0 keeps the torch default
    inference_batch: int = 4

    # Logging
    log_level: str = "INFO"
    log_file: Optional[Path] = None

    # Data paths
    data_dir: Path = Path("data/phantoms")
    runs_dir: Path = Path("runs")
    manifest_filename: str = "manifest.json"
    loss_log_filename: str = "loss_log.jsonl"

    def manifest_path(self, data_dir: Optional[Path] = None) -> Path:
        """Manifest inside a dataset directory."""
        return (data_dir or self.data_dir) / self.manifest_filename


# Global settings instance (lazy-loaded)
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    """Reset settings (useful for testing)."""
    global _settings
    _settings = None


# =============================================================================
# EXPERIMENT CONFIG
# =============================================================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomConfig(_Section):
    dims: tuple[int, int, int] = (32, 32, 32)
    voxel_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organs: list[str] = Field(default_factory=lambda: list(ORGAN_NAMES))
    background_suv: float = Field(default=0.2, ge=0.0)
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (4.0, 8.0)
    lesion_suv: tuple[float, float] = (6.0, 12.0)
    smoothing_fwhm_mm: float = Field(default=0.0, ge=0.0)
    counts_per_suv: float = Field(default=50.0, gt=0.0)
    fractions: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2])
    hc_fraction: Optional[float] = Field(default=1.0, gt=0.0, le=1.0)
    n_test: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "PhantomConfig":
        unknown = [o for o in self.organs if o not in ORGAN_NAMES]
        if unknown:
            raise ValueError(f"unknown organs {unknown}; choose from {list(ORGAN_NAMES)}")
        if not self.organs:
            raise ValueError("at least one organ is required")
        if any(not 0.0 < f <= 1.0 for f in self.fractions) or not self.fractions:
            raise ValueError("count fractions must lie in (0, 1]")
        return self

    @property
    def roster(self) -> ClassRoster:
        return ClassRoster.from_organs(self.organs)


class PatchingConfig(_Section):
    patch_size: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] = (16, 16, 16)
    lesion_target_frac: float = Field(default=0.5, ge=0.0, le=1.0)
    fusion: Literal["mean", "gaussian"] = "mean"

    @model_validator(mode="after")
    def _check(self) -> "PatchingConfig":
        for p, s in zip(self.patch_size, self.stride):
            if not 1 <= s <= p:
                raise ValueError("stride must satisfy 1 <= stride <= patch_size per axis")
        return self


class DiffusionConfig(_Section):
    T: int = Field(default=250, ge=1)
    s_offset: float = Field(default=0.008, gt=0.0)
    suv_cutoff: float = Field(default=20.0, gt=0.0)


class NetworkConfig(_Section):
    base_channels: int = Field(default=16, ge=1)
    denoiser_levels: int = Field(default=4, ge=1)
    attention_at_lowest: bool = True
    time_embed_dim: int = Field(default=64, ge=2)
    segmenter_stages: int = Field(default=3, ge=1)
    decoder_levels: int = Field(default=3, ge=1)
    ssm_state_dim: int = Field(default=8, ge=1)
    ssm_chunk: int = Field(default=64, ge=1)
    bidirectional_scan: bool = False
    revision_channels: int = Field(default=16, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "NetworkConfig":
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.decoder_levels != self.segmenter_stages:
            raise ValueError("segmenter decoders need one level per encoder stage")
        return self

    @property
    def required_divisor(self) -> int:
        """Patch edge lengths must be multiples of this."""
        return 2 ** max(self.denoiser_levels - 1, self.segmenter_stages)


class TrainingConfig(_Section):
    e_max: int = Field(default=4, ge=1)
    steps_per_epoch: int = Field(default=100, ge=1)
    batch_size: int = Field(default=2, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    checkpoint_interval: int = Field(default=1, ge=1)
    detach_denoised: bool = False


class WeightsConfig(_Section):
    background: float = Field(default=0.1, ge=0.0)
    lesion: float = Field(default=4.0, ge=0.0)
    organ: float = Field(default=1.0, ge=0.0)
    overrides: dict[str, float] = Field(default_factory=dict)
    focal_dice: Literal["power", "modulated"] = "power"

    def class_weights(self, roster: ClassRoster) -> ClassWeights:
        weights = list(ClassWeights.default(roster.num_classes, self.background, self.lesion, self.organ).w)
        for name, value in self.overrides.items():
            if name not in roster.names:
                raise ConfigError(f"weight override for unknown class '{name}'", field="weights")
            weights[roster.index(name)] = value
        return ClassWeights(w=tuple(weights))


class AblationConfig(_Section):
    use_lor_regularizer: bool = True
    use_revision_module: bool = True


class InferenceConfig(_Section):
    fast_seg: bool = False
    lesion_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    count_fraction: Optional[float] = Field(default=None, gt=0.0, le=1.0)


class ExperimentConfig(_Section):
    """The whole experiment document."""

    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    patching: PatchingConfig = Field(default_factory=PatchingConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        div = self.network.required_divisor
        for p, d in zip(self.patching.patch_size, self.phantom.dims):
            if p % div:
                raise ValueError(f"patch size {p} must be divisible by {div}")
            if p > d:
                raise ValueError(f"patch size {p} exceeds phantom dim {d}")
        return self

    @property
    def roster(self) -> ClassRoster:
        return self.phantom.roster

    @property
    def class_weights(self) -> ClassWeights:
        return self.weights.class_weights(self.roster)

    @classmethod
    def full_scale(cls) -> "ExperimentConfig":
        """Full-size geometry: 128^3 patches, 32^3 stride, T = 250 on a 160^3 phantom."""
        return cls(
            phantom=PhantomConfig(dims=(160, 160, 160)),
            patching=PatchingConfig(patch_size=(128, 128, 128), stride=(32, 32, 32)),
            diffusion=DiffusionConfig(T=250),
        )

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_experiment_config(path: Optional[Path]) -> ExperimentConfig:
    """Read and validate an experiment config; None gives the defaults.

    Raises:
        ConfigError: unreadable file, invalid JSON or schema violation
    """
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}", field="config") from e
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}", field="config") from e
