"""
Synthetic data set: procedural humanoid, two-layer outfit, raw pose pool and a
ready-to-run TOML config, so every command works without licensed data.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pbns.ml.body import HumanoidDims, save_body, synth_humanoid
from pbns.ml.garment import make_outfit, save_garment
from pbns.ml.poses import random_pose_pool, save_poses
from pbns.utils.config import RunConfig, parse_config
from pbns.utils.exceptions import ConfigError
from pbns.utils.io_utils import PathLike, atomic_write

logger = logging.getLogger(__name__)

BODY_FILE = "body.pbnsbody"
GARMENT_FILE = "outfit.obj"
POSES_FILE = "poses.pbnspose"
CONFIG_FILE = "config.toml"


@dataclass
class FixturePaths:
    directory: Path
    body: Path
    garment: Path
    poses: Path
    config: Path


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if value is None:
        raise ConfigError("TOML has no null value")
    text = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{text}"'


def render_toml(values: Mapping[str, Mapping[str, Any]]) -> str:
    """Two-level mapping as TOML tables; ``None`` entries are left out."""
    lines = []
    for section, entries in values.items():
        lines.append(f"[{section}]")
        for key, value in entries.items():
            if value is not None:
                lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def fixture_config(overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {
        "data": {"body": BODY_FILE, "garment": GARMENT_FILE, "poses": POSES_FILE},
        "sampling": {"n": 3000, "d_min": 0.5, "split": 0.85, "seed": 0},
        "model": {"embedding_mode": "mlp", "width": 32, "depth": 4, "final_relu": True, "trainable_weights": False},
        "train": {"batch_size": 16, "epochs": 30, "learning_rate": 1e-3, "seed": 0},
        "output": {"dir": "runs/latest"},
    }
    for section, entries in (overrides or {}).items():
        values.setdefault(section, {}).update(entries)
    return values


def make_fixture(
    out_dir: PathLike,
    pool_size: int = 6000,
    segments: int = 48,
    ring_spacing: float = 0.02,
    interpenetrate: bool = False,
    trainable_weights: bool = False,
    seed: int = 0,
    dims: Optional[HumanoidDims] = None,
    config_overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> FixturePaths:
    """
    Write the synthetic data set into ``out_dir``.

    Args:
        out_dir: target directory (created)
        pool_size: raw poses in the pose file, sampled down by the ``sampling`` config
        segments: vertices around each garment ring
        ring_spacing: vertical distance between garment rings, meters
        interpenetrate: pull the vest's bottom rim inside the skirt
        trainable_weights: mark the outfit for blend-weight optimisation
        seed: seed of the pose pool
        dims: humanoid dimensions
        config_overrides: per-section values merged into the written config

    Returns:
        FixturePaths: paths of the written files
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = synth_humanoid(dims)
    outfit = make_outfit(dims, segments, ring_spacing, interpenetrate, trainable_weights)
    poses = random_pose_pool(body.skeleton, pool_size, seed=seed)
    paths = FixturePaths(out, out / BODY_FILE, out / GARMENT_FILE, out / POSES_FILE, out / CONFIG_FILE)
    save_body(body, paths.body)
    save_garment(outfit, paths.garment)
    save_poses(paths.poses, poses)

    values = fixture_config(config_overrides)
    config: RunConfig = parse_config(values)
    with atomic_write(paths.config, "w") as handle:
        handle.write(render_toml(values))
    logger.info(
        "Wrote fixture to %s: body %d vertices, outfit %d vertices in %d layers, %d raw poses (sampling n=%d)",
        out,
        body.num_vertices,
        outfit.num_vertices,
        outfit.num_layers,
        len(poses),
        config.sampling.n,
    )
    return paths
