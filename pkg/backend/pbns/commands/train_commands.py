"""
Training commands: ``train`` (pose space deformation) and ``resize-train``.
"""

import logging
from pathlib import Path
from typing import Callable, Optional

import click

from pbns.commands.common import PATH, add_scene_inputs, echo_json, log_level_option, write_json
from pbns.ml.body import load_body
from pbns.ml.energy import weights_from_mapping
from pbns.ml.garment import load_garment
from pbns.ml.poses import load_poses, sample_pose_database, save_poses
from pbns.services.manifest_service import RunManifest
from pbns.services.resize_service import TightnessRange, build_resizer, train_resizer, validate_resizer
from pbns.services.training_service import TrainResult, build_model, parameter_hash, train
from pbns.utils.config import RunConfig, load_config, parse_config, require_path, worker_count
from pbns.utils.exceptions import DataError, PbnsError
from pbns.utils.middleware import handle_command_errors, start_run

logger = logging.getLogger(__name__)


def _prepare(config_path: Path, output: Optional[Path], epochs: Optional[int]) -> RunConfig:
    """Load the config and apply command-line overrides, validating the result again."""
    config = load_config(config_path)
    if output is None and epochs is None:
        return config
    values = config.model_dump()
    if output is not None:
        values["output"]["dir"] = output.resolve()
    if epochs is not None:
        values["train"]["epochs"] = epochs
    return parse_config(values)


def _run(manifest: RunManifest, out_dir: Path, fn: Callable[[], TrainResult]) -> TrainResult:
    """Run ``fn``; an aborted run still leaves its manifest behind."""
    try:
        return fn()
    except PbnsError:
        manifest.status = "aborted"
        manifest.write(out_dir)
        raise


@click.command("train")
@click.option("--config", "config_path", type=PATH, required=True, help="Run config (TOML)")
@click.option("--output", type=PATH, default=None, help="Output directory, overrides output.dir")
@click.option("--epochs", type=int, default=None, help="Overrides train.epochs")
@click.option("--workers", type=int, default=None, help="Batch workers, overrides PBNS_WORKERS")
@click.option("--progress/--no-progress", default=False, help="Show an epoch progress bar")
@log_level_option
@handle_command_errors
def train_command(
    config_path: Path,
    output: Optional[Path],
    epochs: Optional[int],
    workers: Optional[int],
    progress: bool,
    log_level: Optional[str],
) -> None:
    """Train the garment network on a sampled pose database."""
    start_run(log_level)
    config = _prepare(config_path, output, epochs)
    out_dir = config.output.dir
    paths = {name: require_path(config, name) for name in ("body", "garment", "poses")}
    body = load_body(paths["body"])
    garment = load_garment(paths["garment"])
    raw = load_poses(paths["poses"], body.num_joints)
    manifest = RunManifest.start("train", config.snapshot(), seed=config.train.seed)
    add_scene_inputs(manifest, paths["body"], paths["garment"])
    manifest.add_input("poses", paths["poses"])
    sampling = config.sampling
    db = sample_pose_database(raw, sampling.n, sampling.d_min, sampling.split, sampling.seed)
    if not db.train:
        raise DataError("the sampled pose database has no training poses")
    save_poses(out_dir / "train_poses.pbnspose", db.train)
    if db.validation:
        save_poses(out_dir / "validation_poses.pbnspose", db.validation)

    model = build_model(garment, body, config.model, seed=config.train.seed)
    weights = weights_from_mapping(config.energy.model_dump())
    result = _run(
        manifest,
        out_dir,
        lambda: train(
            model,
            garment,
            body,
            db,
            config.train,
            weights,
            out_dir,
            workers=workers or worker_count(),
            progress=progress,
        ),
    )
    manifest.add_output("model", result.final_checkpoint)
    manifest.add_output("metrics", out_dir / "metrics.jsonl")
    manifest.outputs["parameter_hash"] = parameter_hash(result.model)
    manifest.write(out_dir)
    echo_json({"model": result.final_checkpoint, "steps": result.steps, "last_epoch": result.log[-1] if result.log else {}})


@click.command("resize-train")
@click.option("--config", "config_path", type=PATH, required=True, help="Run config (TOML)")
@click.option("--output", type=PATH, default=None, help="Output directory, overrides output.dir")
@click.option("--epochs", type=int, default=None, help="Overrides train.epochs")
@click.option("--workers", type=int, default=None, help="Batch workers, overrides PBNS_WORKERS")
@click.option("--progress/--no-progress", default=False, help="Show an epoch progress bar")
@log_level_option
@handle_command_errors
def resize_train_command(
    config_path: Path,
    output: Optional[Path],
    epochs: Optional[int],
    workers: Optional[int],
    progress: bool,
    log_level: Optional[str],
) -> None:
    """Train the outfit resizer over uniformly sampled body shapes and tightness."""
    start_run(log_level)
    config = _prepare(config_path, output, epochs)
    out_dir = config.output.dir
    paths = {name: require_path(config, name) for name in ("body", "garment")}
    body = load_body(paths["body"])
    garment = load_garment(paths["garment"])
    manifest = RunManifest.start("resize-train", config.snapshot(), seed=config.train.seed)
    add_scene_inputs(manifest, paths["body"], paths["garment"])
    ranges = TightnessRange.from_config(config.resize)
    model = build_resizer(garment, body, config.model, config.resize, seed=config.train.seed)
    weights = weights_from_mapping(config.energy.model_dump())
    result = _run(
        manifest,
        out_dir,
        lambda: train_resizer(
            model,
            garment,
            body,
            ranges,
            config.train,
            weights,
            samples_per_epoch=config.resize.samples_per_epoch,
            output_dir=out_dir,
            workers=workers or worker_count(),
            progress=progress,
        ),
    )
    grid = validate_resizer(model, garment, body, ranges.grid(), weights)
    write_json(out_dir / "grid_metrics.json", grid)
    manifest.add_output("model", result.final_checkpoint)
    manifest.add_output("metrics", out_dir / "metrics.jsonl")
    manifest.add_output("grid_metrics", out_dir / "grid_metrics.json")
    manifest.outputs["parameter_hash"] = parameter_hash(result.model)
    manifest.write(out_dir)
    echo_json({"model": result.final_checkpoint, "steps": result.steps, "max_collision_ratio": grid["max_collision_ratio"]})
