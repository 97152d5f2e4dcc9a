"""
Helpers shared by the command modules: common options, input loading and output.
"""

import json
import logging
from pathlib import Path
from typing import Any, Callable, List, Optional, Tuple

import click

from pbns.ml.body import BodyModel, load_body
from pbns.ml.garment import GarmentTemplate, load_garment, sidecar_path
from pbns.ml.model import PbnsModel, load_checkpoint
from pbns.services.manifest_service import RunManifest
from pbns.services.resize_service import ResizeModel
from pbns.utils.config import RunConfig, load_config
from pbns.utils.exceptions import ConfigError
from pbns.utils.io_utils import atomic_write

logger = logging.getLogger(__name__)

PATH = click.Path(path_type=Path)
EXISTING = click.Path(path_type=Path, exists=True, dir_okay=False)


def log_level_option(fn: Callable[..., Any]) -> Callable[..., Any]:
    return click.option("--log-level", default=None, help="Overrides LOG_LEVEL (DEBUG, INFO, WARNING, ERROR)")(fn)


def data_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    """--config, --body and --garment; explicit files override the config's data section."""
    fn = click.option("--garment", "garment_path", type=PATH, default=None, help="Garment OBJ (with JSON sidecar)")(fn)
    fn = click.option("--body", "body_path", type=PATH, default=None, help="Body model file")(fn)
    fn = click.option("--config", "config_path", type=PATH, default=None, help="Run config (TOML)")(fn)
    return fn


def optional_config(config_path: Optional[Path]) -> Optional[RunConfig]:
    return load_config(config_path) if config_path is not None else None


def resolve_data(
    config: Optional[RunConfig], body_path: Optional[Path], garment_path: Optional[Path]
) -> Tuple[Path, Path]:
    body_path = body_path or (config.data.body if config else None)
    garment_path = garment_path or (config.data.garment if config else None)
    if body_path is None or garment_path is None:
        raise ConfigError("a body and a garment are required: pass --config or both --body and --garment")
    return body_path, garment_path


def load_scene(
    config: Optional[RunConfig], body_path: Optional[Path], garment_path: Optional[Path]
) -> Tuple[BodyModel, GarmentTemplate, Path, Path]:
    body_file, garment_file = resolve_data(config, body_path, garment_path)
    return load_body(body_file), load_garment(garment_file), body_file, garment_file


def load_pose_model(checkpoint: Path, garment: GarmentTemplate, body: BodyModel, force: bool) -> PbnsModel:
    model, _ = load_checkpoint(checkpoint, garment.content_hash(), body.content_hash(), force)
    if not isinstance(model, PbnsModel):
        raise ConfigError(f"{checkpoint} holds a resize model; use resize-infer")
    return model


def load_resize_model(checkpoint: Path, garment: GarmentTemplate, body: BodyModel, force: bool) -> ResizeModel:
    model, _ = load_checkpoint(checkpoint, garment.content_hash(), body.content_hash(), force)
    if not isinstance(model, ResizeModel):
        raise ConfigError(f"{checkpoint} holds a pose model; use infer")
    return model


def parse_floats(text: Optional[str], option: str) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{option} must be a comma separated list of numbers, got '{text}'") from None


def parse_ints(text: str, option: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{option} must be a comma separated list of integers, got '{text}'") from None
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"{option} needs positive integers, got '{text}'")
    return values


def write_json(path: Path, data: Any) -> Path:
    with atomic_write(path, "w") as handle:
        json.dump(data, handle, indent=2, default=str)
    return path


def echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, default=str))


def add_scene_inputs(manifest: RunManifest, body_path: Path, garment_path: Path) -> None:
    manifest.add_input("body", body_path)
    manifest.add_input("garment", garment_path)
    if sidecar_path(garment_path).exists():
        manifest.add_input("garment_sidecar", sidecar_path(garment_path))
