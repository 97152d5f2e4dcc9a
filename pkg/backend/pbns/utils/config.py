"""
Run configuration.

A run is described by one TOML file whose sections map onto the pydantic
models below. Relative data paths are resolved against the directory of the
config file. Process-level settings (worker count, log level, torch threads)
come from the environment, optionally through a ``.env`` file.
"""

import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import torch
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from pbns.utils.exceptions import ConfigError
from pbns.utils.io_utils import PathLike

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    body: Optional[Path] = None
    garment: Optional[Path] = None
    poses: Optional[Path] = None


class SamplingConfig(_Section):
    n: int = Field(3000, ge=1)
    d_min: float = Field(0.5, ge=0.0)
    split: float = Field(0.85, ge=0.0, le=1.0)
    seed: int = 0


class ModelConfig(_Section):
    embedding_mode: Literal["mlp", "identity_theta", "identity_rotmat"] = "mlp"
    width: int = Field(32, ge=1)
    depth: int = Field(4, ge=1)
    final_relu: bool = True
    trainable_weights: bool = False


class EnergyConfig(_Section):
    edge: float = Field(15.0, gt=0.0)
    bend: float = Field(2e-4, gt=0.0)
    collision: float = Field(25.0, gt=0.0)
    epsilon: float = Field(0.004, ge=0.0)
    pin: float = Field(10.0, gt=0.0)
    density: float = Field(0.15, gt=0.0)
    gravity: float = Field(9.81, gt=0.0)
    up_axis: int = Field(2, ge=0, le=2)
    use_gravity: bool = True


class TrainConfig(_Section):
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(30, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(100, ge=0)
    weight_lr_scale: float = Field(0.1, gt=0.0)
    seed: int = 0
    validate_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(5, ge=1)
    divergence_factor: float = Field(1e3, gt=1.0)


class ResizeConfig(_Section):
    beta_low: List[float] = Field(default_factory=lambda: [-2.0, -2.0])
    beta_high: List[float] = Field(default_factory=lambda: [2.0, 2.0])
    gamma_low: Tuple[float, float] = (-1.0, -1.0)
    gamma_high: Tuple[float, float] = (1.0, 1.0)
    smoothing_iterations: int = Field(100, ge=0)
    smoothing_step: float = Field(0.5, gt=0.0, le=1.0)
    samples_per_epoch: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _check_bounds(self) -> "ResizeConfig":
        if len(self.beta_low) != len(self.beta_high):
            raise ValueError("beta_low and beta_high must have the same length")
        if any(lo > hi for lo, hi in zip(self.beta_low, self.beta_high)):
            raise ValueError("beta_low must not exceed beta_high")
        if any(lo > hi for lo, hi in zip(self.gamma_low, self.gamma_high)):
            raise ValueError("gamma_low must not exceed gamma_high")
        return self


class OutputConfig(_Section):
    dir: Path = Path("runs/latest")


class RunConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    energy: EnergyConfig = Field(default_factory=EnergyConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    resize: ResizeConfig = Field(default_factory=ResizeConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @field_validator("data", mode="before")
    @classmethod
    def _empty_data(cls, value: Any) -> Any:
        return value or {}

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Copy with data and output paths made absolute relative to ``base``."""
        data = {
            name: (base / value).resolve() if value is not None and not value.is_absolute() else value
            for name, value in self.data.model_dump().items()
        }
        out = self.output.dir if self.output.dir.is_absolute() else (base / self.output.dir).resolve()
        return self.model_copy(update={"data": DataConfig(**data), "output": OutputConfig(dir=out)})


def _error_message(error: ValidationError) -> str:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"])
    return f"{field}: {first['msg']}"


def parse_config(values: Dict[str, Any], base: Optional[Path] = None) -> RunConfig:
    """
    Validate a configuration mapping.

    Raises:
        ConfigError: naming the dotted path of the first invalid field
    """
    try:
        config = RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(
            f"invalid configuration: {_error_message(e)}",
            details={"errors": [{"field": ".".join(map(str, err["loc"])), "message": err["msg"]} for err in e.errors()]},
        ) from None
    return config.resolve_paths(base) if base is not None else config


def load_config(path: PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as handle:
            values = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: not valid TOML: {e}") from None
    config = parse_config(values, base=path.parent.resolve())
    logger.info("Loaded configuration from %s", path)
    return config


def require_path(config: RunConfig, name: str) -> Path:
    value = getattr(config.data, name)
    if value is None:
        raise ConfigError(f"data.{name} is required for this command")
    return value


def load_environment() -> None:
    """Load ``.env`` (without overriding variables already set) and apply torch threading."""
    load_dotenv(override=False)
    threads = env_int("PBNS_TORCH_THREADS", 0)
    if threads > 0:
        torch.set_num_threads(threads)


def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got '{raw}'") from None


def worker_count() -> int:
    workers = env_int("PBNS_WORKERS", 1)
    if workers < 1:
        raise ConfigError(f"PBNS_WORKERS must be at least 1, got {workers}")
    return workers


def log_level() -> str:
    return os.getenv("LOG_LEVEL", "INFO").upper()
