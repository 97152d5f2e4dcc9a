"""
``make-fixture``: write the synthetic data set.
"""

import logging
from pathlib import Path
from typing import Optional

import click

from pbns.commands.common import PATH, echo_json, log_level_option
from pbns.services.fixture_service import make_fixture
from pbns.services.manifest_service import RunManifest
from pbns.utils.exceptions import ConfigError
from pbns.utils.middleware import handle_command_errors, start_run

logger = logging.getLogger(__name__)


@click.command("make-fixture")
@click.argument("out_dir", type=PATH)
@click.option("--pool-size", type=int, default=6000, show_default=True, help="Raw poses written to the pose file")
@click.option("--sample-n", type=int, default=3000, show_default=True, help="sampling.n of the written config")
@click.option("--epochs", type=int, default=30, show_default=True, help="train.epochs of the written config")
@click.option("--segments", type=int, default=48, show_default=True, help="Vertices per garment ring")
@click.option("--ring-spacing", type=float, default=0.02, show_default=True, help="Garment ring spacing, meters")
@click.option("--interpenetrate", is_flag=True, help="Start the vest inside the skirt's waistband")
@click.option("--trainable-weights", is_flag=True, help="Optimise garment blend weights too")
@click.option("--no-gravity", is_flag=True, help="Write energy.use_gravity = false")
@click.option("--seed", type=int, default=0, show_default=True)
@log_level_option
@handle_command_errors
def make_fixture_command(
    out_dir: Path,
    pool_size: int,
    sample_n: int,
    epochs: int,
    segments: int,
    ring_spacing: float,
    interpenetrate: bool,
    trainable_weights: bool,
    no_gravity: bool,
    seed: int,
    log_level: Optional[str],
) -> None:
    """Write a synthetic body, two-layer outfit, pose pool and config into OUT_DIR."""
    start_run(log_level)
    if pool_size < 1 or segments < 3 or ring_spacing <= 0:
        raise ConfigError("--pool-size must be positive, --segments at least 3 and --ring-spacing positive")
    overrides = {
        "sampling": {"n": sample_n, "seed": seed},
        "train": {"epochs": epochs, "seed": seed},
        "model": {"trainable_weights": trainable_weights},
    }
    if no_gravity:
        overrides["energy"] = {"use_gravity": False}
    options = {
        "pool_size": pool_size,
        "segments": segments,
        "ring_spacing": ring_spacing,
        "interpenetrate": interpenetrate,
        "trainable_weights": trainable_weights,
        "seed": seed,
    }
    manifest = RunManifest.start("make-fixture", {**options, "overrides": overrides}, seed=seed)
    paths = make_fixture(out_dir, config_overrides=overrides, **options)
    for name in ("body", "garment", "poses", "config"):
        manifest.add_output(name, getattr(paths, name))
    manifest.write(out_dir)
    echo_json({name: getattr(paths, name) for name in ("body", "garment", "poses", "config")})
