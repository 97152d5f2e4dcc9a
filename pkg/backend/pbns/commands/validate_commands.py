"""
Inspection commands: ``validate``, ``validate-poses`` and ``describe``.
"""

import logging
from pathlib import Path
from typing import Optional

import click

from pbns.commands.common import (
    EXISTING,
    PATH,
    add_scene_inputs,
    data_options,
    echo_json,
    load_pose_model,
    load_scene,
    log_level_option,
    optional_config,
    resolve_data,
    write_json,
)
from pbns.ml.body import body_self_collisions, load_body, pose_body
from pbns.ml.energy import EnergyWeights, weights_from_mapping
from pbns.ml.model import load_checkpoint
from pbns.ml.poses import load_poses
from pbns.ml.rig import pose_tensor, translation_tensor
from pbns.services.manifest_service import RunManifest
from pbns.services.training_service import build_model, validate
from pbns.utils.exceptions import ConfigError, DataError
from pbns.utils.middleware import handle_command_errors, start_run

logger = logging.getLogger(__name__)

REPORTED_METRICS = ("edge_mm", "collision_ratio", "per_layer_collision")


@click.command("validate")
@click.argument("checkpoint", type=EXISTING)
@click.argument("poses", type=EXISTING)
@data_options
@click.option("--out-dir", type=PATH, default=None, help="Defaults to <checkpoint dir>/validation")
@click.option("--batch", "batch_size", type=int, default=16, show_default=True)
@click.option("--force", is_flag=True, help="Ignore garment/body hash mismatches")
@log_level_option
@handle_command_errors
def validate_command(
    checkpoint: Path,
    poses: Path,
    config_path: Optional[Path],
    body_path: Optional[Path],
    garment_path: Optional[Path],
    out_dir: Optional[Path],
    batch_size: int,
    force: bool,
    log_level: Optional[str],
) -> None:
    """Edge distortion and collision metrics of a trained model over POSES."""
    start_run(log_level)
    if batch_size < 1:
        raise ConfigError(f"--batch must be at least 1, got {batch_size}")
    config = optional_config(config_path)
    body, garment, body_file, garment_file = load_scene(config, body_path, garment_path)
    model = load_pose_model(checkpoint, garment, body, force)
    pose_list = load_poses(poses, body.num_joints)
    if not pose_list:
        raise DataError(f"{poses} holds no poses")
    weights = weights_from_mapping(config.energy.model_dump()) if config else EnergyWeights()
    metrics = validate(model, garment, body, pose_list, weights, batch_size)
    out_dir = out_dir or checkpoint.parent / "validation"
    manifest = RunManifest.start("validate", {"batch": batch_size, "force": force})
    add_scene_inputs(manifest, body_file, garment_file)
    manifest.add_input("checkpoint", checkpoint)
    manifest.add_input("poses", poses)
    result = {"num_poses": len(pose_list), **{k: metrics[k] for k in REPORTED_METRICS}, "all": metrics}
    write_json(out_dir / "metrics.json", result)
    manifest.add_output("metrics", out_dir / "metrics.json")
    manifest.write(out_dir)
    echo_json({k: result[k] for k in ("num_poses",) + REPORTED_METRICS})


@click.command("validate-poses")
@click.argument("poses", type=EXISTING)
@click.option("--config", "config_path", type=PATH, default=None, help="Run config (TOML)")
@click.option("--body", "body_path", type=PATH, default=None, help="Body model file")
@click.option("--out-dir", type=PATH, default=Path("runs/validate-poses"), show_default=True)
@click.option("--batch", "batch_size", type=int, default=64, show_default=True)
@log_level_option
@handle_command_errors
def validate_poses_command(
    poses: Path,
    config_path: Optional[Path],
    body_path: Optional[Path],
    out_dir: Path,
    batch_size: int,
    log_level: Optional[str],
) -> None:
    """
    Report poses whose skinned body collides with itself.

    Poses are only reported, never removed from the file.
    """
    start_run(log_level)
    config = optional_config(config_path)
    body_path = body_path or (config.data.body if config else None)
    if body_path is None:
        raise ConfigError("a body is required: pass --config or --body")
    body = load_body(body_path)
    pose_list = load_poses(poses, body.num_joints)
    invalid = []
    for start in range(0, len(pose_list), max(batch_size, 1)):
        chunk = pose_list[start : start + batch_size]
        posed = pose_body(body, pose_tensor(chunk), translation_tensor(chunk)).numpy()
        for offset, positions in enumerate(posed):
            hits = body_self_collisions(body, positions)
            if len(hits):
                invalid.append({"pose": start + offset, "colliding_vertices": int(len(hits))})
    logger.info("%d of %d poses produce body self-collisions", len(invalid), len(pose_list))
    report = {"num_poses": len(pose_list), "num_invalid": len(invalid), "invalid": invalid}
    manifest = RunManifest.start("validate-poses", {"batch": batch_size})
    manifest.add_input("body", body_path)
    manifest.add_input("poses", poses)
    write_json(out_dir / "pose_report.json", report)
    manifest.add_output("report", out_dir / "pose_report.json")
    manifest.write(out_dir)
    echo_json({"num_poses": report["num_poses"], "num_invalid": report["num_invalid"]})


@click.command("describe")
@click.argument("checkpoint", type=EXISTING, required=False)
@data_options
@click.option("--out-dir", type=PATH, default=None, help="Also write describe.json and a manifest here")
@log_level_option
@handle_command_errors
def describe_command(
    checkpoint: Optional[Path],
    config_path: Optional[Path],
    body_path: Optional[Path],
    garment_path: Optional[Path],
    out_dir: Optional[Path],
    log_level: Optional[str],
) -> None:
    """Parameter summary of a checkpoint, or of a fresh model built from the config."""
    start_run(log_level)
    manifest = RunManifest.start("describe")
    if checkpoint is not None:
        model, header = load_checkpoint(checkpoint)
        summary = model.parameter_summary()
        summary["checkpoint"] = {
            k: header.get(k) for k in ("version", "mode", "garment_hash", "body_hash", "trainer")
        }
        manifest.add_input("checkpoint", checkpoint)
    else:
        config = optional_config(config_path)
        body_file, garment_file = resolve_data(config, body_path, garment_path)
        body, garment, _, _ = load_scene(config, body_file, garment_file)
        model = build_model(garment, body, config.model if config else None)
        summary = model.parameter_summary()
        add_scene_inputs(manifest, body_file, garment_file)
    if out_dir is not None:
        write_json(out_dir / "describe.json", summary)
        manifest.add_output("describe", out_dir / "describe.json")
        manifest.write(out_dir)
    echo_json(summary)
