"""
Inference commands: ``infer``, ``resize-infer`` and ``bench``.
"""

import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np

from pbns.commands.common import (
    EXISTING,
    PATH,
    add_scene_inputs,
    data_options,
    echo_json,
    load_pose_model,
    load_resize_model,
    load_scene,
    log_level_option,
    optional_config,
    parse_floats,
    parse_ints,
    write_json,
)
from pbns.ml.body import apply_shape, synth_humanoid
from pbns.ml.energy import EnergyWeights, weights_from_mapping
from pbns.ml.garment import dense_outfit
from pbns.ml.mesh import write_obj
from pbns.ml.poses import load_poses, random_pose_pool
from pbns.services.inference_service import FORMATS, InferenceService
from pbns.services.manifest_service import RunManifest
from pbns.services.resize_service import TightnessRange, resize_forward, validate_resizer
from pbns.services.training_service import build_model
from pbns.utils.exceptions import ConfigError
from pbns.utils.middleware import handle_command_errors, start_run

logger = logging.getLogger(__name__)


@click.command("infer")
@click.argument("checkpoint", type=EXISTING)
@click.argument("poses", type=EXISTING)
@click.argument("out_dir", type=PATH)
@data_options
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="obj", show_default=True)
@click.option("--batch", "batch_size", type=int, default=16, show_default=True, help="Poses per forward pass")
@click.option("--export-body", is_flag=True, help="Also write the posed body")
@click.option("--f32", "float32", is_flag=True, help="Evaluate in 32-bit")
@click.option("--force", is_flag=True, help="Ignore garment/body hash mismatches")
@log_level_option
@handle_command_errors
def infer_command(
    checkpoint: Path,
    poses: Path,
    out_dir: Path,
    config_path: Optional[Path],
    body_path: Optional[Path],
    garment_path: Optional[Path],
    fmt: str,
    batch_size: int,
    export_body: bool,
    float32: bool,
    force: bool,
    log_level: Optional[str],
) -> None:
    """Pose the outfit for every pose in POSES and write the mesh sequence to OUT_DIR."""
    start_run(log_level)
    config = optional_config(config_path)
    body, garment, body_file, garment_file = load_scene(config, body_path, garment_path)
    model = load_pose_model(checkpoint, garment, body, force)
    pose_list = load_poses(poses, body.num_joints)
    manifest = RunManifest.start(
        "infer",
        {"format": fmt, "batch": batch_size, "export_body": export_body, "float32": float32, "force": force},
    )
    add_scene_inputs(manifest, body_file, garment_file)
    manifest.add_input("checkpoint", checkpoint)
    manifest.add_input("poses", poses)
    result = InferenceService.infer(
        model, garment, body, pose_list, out_dir, fmt, batch_size, export_body, float32, source=str(poses)
    )
    manifest.add_output("frames_index", out_dir / "frames.json")
    manifest.outputs["num_frames"] = str(len(pose_list))
    manifest.write(out_dir)
    echo_json({"out_dir": out_dir, "frames": len(pose_list), "files": len(result.frames) + len(result.body_frames)})


@click.command("resize-infer")
@click.argument("checkpoint", type=EXISTING)
@click.argument("out_dir", type=PATH)
@data_options
@click.option("--beta", default=None, help="Body shape, comma separated")
@click.option("--gamma", default=None, help="Tightness, two comma separated values")
@click.option("--grid", is_flag=True, help="Evaluate the 3 x 2 grid of the config's resize bounds")
@click.option("--export-body", is_flag=True, help="Also write the shaped body")
@click.option("--force", is_flag=True, help="Ignore garment/body hash mismatches")
@log_level_option
@handle_command_errors
def resize_infer_command(
    checkpoint: Path,
    out_dir: Path,
    config_path: Optional[Path],
    body_path: Optional[Path],
    garment_path: Optional[Path],
    beta: Optional[str],
    gamma: Optional[str],
    grid: bool,
    export_body: bool,
    force: bool,
    log_level: Optional[str],
) -> None:
    """Write the resized outfit for one (beta, gamma) or for the evaluation grid."""
    start_run(log_level)
    config = optional_config(config_path)
    body, garment, body_file, garment_file = load_scene(config, body_path, garment_path)
    model = load_resize_model(checkpoint, garment, body, force)
    if grid:
        if config is None:
            raise ConfigError("--grid needs --config for the resize bounds")
        points = TightnessRange.from_config(config.resize).grid()
    else:
        beta_values = parse_floats(beta, "--beta") or [0.0] * body.num_shapes
        gamma_values = parse_floats(gamma, "--gamma") or [0.0, 0.0]
        if len(beta_values) != body.num_shapes or len(gamma_values) != 2:
            raise ConfigError(f"--beta needs {body.num_shapes} values and --gamma 2, got {len(beta_values)} and {len(gamma_values)}")
        points = [(np.asarray(beta_values), np.asarray(gamma_values))]

    manifest = RunManifest.start("resize-infer", {"points": [[b.tolist(), g.tolist()] for b, g in points]})
    add_scene_inputs(manifest, body_file, garment_file)
    manifest.add_input("checkpoint", checkpoint)
    for i, (b, g) in enumerate(points):
        positions = resize_forward(model, garment, b, g).detach().numpy()
        write_obj(out_dir / f"resized_{i:02d}.obj", positions, garment.mesh.faces, comment=f"beta {b.tolist()} gamma {g.tolist()}")
        if export_body:
            write_obj(out_dir / f"body_{i:02d}.obj", apply_shape(body, b), body.mesh.faces, comment=f"beta {b.tolist()}")
    weights = weights_from_mapping(config.energy.model_dump()) if config else EnergyWeights()
    metrics = validate_resizer(model, garment, body, points, weights)
    write_json(out_dir / "metrics.json", metrics)
    manifest.add_output("metrics", out_dir / "metrics.json")
    manifest.write(out_dir)
    echo_json({k: v for k, v in metrics.items() if k != "grid"})


@click.command("bench")
@click.argument("checkpoint", type=EXISTING, required=False)
@data_options
@click.option("--poses", "poses_path", type=EXISTING, default=None, help="Pose file; random poses when omitted")
@click.option("--num-poses", type=int, default=256, show_default=True, help="Random poses when --poses is omitted")
@click.option("--batch-sizes", default="1,16", show_default=True, help="Comma separated batch sizes")
@click.option("--repeat", type=int, default=5, show_default=True)
@click.option("--synthetic-vertices", type=int, default=None, help="Benchmark an untrained model on a synthetic outfit of about this size")
@click.option("--out-dir", type=PATH, default=Path("runs/bench"), show_default=True, help="Where bench.json and the manifest go")
@click.option("--force", is_flag=True, help="Ignore garment/body hash mismatches")
@log_level_option
@handle_command_errors
def bench_command(
    checkpoint: Optional[Path],
    config_path: Optional[Path],
    body_path: Optional[Path],
    garment_path: Optional[Path],
    poses_path: Optional[Path],
    num_poses: int,
    batch_sizes: str,
    repeat: int,
    synthetic_vertices: Optional[int],
    out_dir: Path,
    force: bool,
    log_level: Optional[str],
) -> None:
    """Forward-pass throughput in poses per second for each batch size."""
    start_run(log_level)
    sizes = parse_ints(batch_sizes, "--batch-sizes")
    manifest = RunManifest.start("bench", {"batch_sizes": sizes, "repeat": repeat, "synthetic_vertices": synthetic_vertices})
    if synthetic_vertices is not None:
        body = synth_humanoid()
        garment = dense_outfit(synthetic_vertices)
        model = build_model(garment, body)
    else:
        if checkpoint is None:
            raise ConfigError("bench needs a CHECKPOINT or --synthetic-vertices")
        body, garment, body_file, garment_file = load_scene(optional_config(config_path), body_path, garment_path)
        model = load_pose_model(checkpoint, garment, body, force)
        add_scene_inputs(manifest, body_file, garment_file)
        manifest.add_input("checkpoint", checkpoint)
    if poses_path is not None:
        poses = load_poses(poses_path, body.num_joints)
        manifest.add_input("poses", poses_path)
    else:
        poses = random_pose_pool(body.skeleton, num_poses, seed=0)
    table = InferenceService.bench(model, garment, body, poses, sizes, repeat)
    click.echo(
        f"outfit: {garment.num_vertices} vertices, {garment.mesh.num_faces} faces; {len(poses)} poses per repeat"
    )
    click.echo(table.to_string(index=False, float_format=lambda v: f"{v:.1f}"))
    write_json(out_dir / "bench.json", {**table.attrs, "rows": table.to_dict(orient="records")})
    manifest.add_output("bench", out_dir / "bench.json")
    manifest.write(out_dir)
