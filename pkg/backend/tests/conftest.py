import logging
import os
import sys

import numpy as np
import pytest

# Add the backend directory to the Python path
backend_dir = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from pbns.ml.body import synth_humanoid
from pbns.ml.garment import make_outfit
from pbns.ml.mesh import TriMesh
from pbns.ml.poses import random_pose_pool
from pbns.services.fixture_service import make_fixture
from pbns.services.training_service import build_model
from pbns.utils.config import ModelConfig

# Coarse outfit used throughout the tests: 9 skirt rings and 7 vest rings of 16 vertices
OUTFIT_SEGMENTS = 16
OUTFIT_RING_SPACING = 0.05

SMALL_MODEL = ModelConfig(width=8, depth=2)


@pytest.fixture(scope="session")
def body():
    """The procedural humanoid with its two shape blend shapes."""
    return synth_humanoid()


@pytest.fixture(scope="session")
def outfit():
    """Two-layer skirt and vest outfit over the humanoid."""
    return make_outfit(segments=OUTFIT_SEGMENTS, ring_spacing=OUTFIT_RING_SPACING)


@pytest.fixture(scope="session")
def poses(body):
    """Eight random poses within the humanoid's joint limits."""
    return random_pose_pool(body.skeleton, 8, seed=1)


@pytest.fixture
def model(outfit, body):
    """A fresh, small garment network (MLP width 8, depth 2)."""
    return build_model(outfit, body, SMALL_MODEL, seed=0)


@pytest.fixture
def tetrahedron():
    """Closed tetrahedron with outward-facing, counter-clockwise faces."""
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh.from_arrays(vertices, faces)


@pytest.fixture
def grid_mesh():
    """Flat 4 x 4 vertex grid in the z = 0 plane, normals along +z."""
    n = 4
    xs, ys = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    vertices = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces.append((a, b, c))
            faces.append((a, c, d))
    return TriMesh.from_arrays(vertices, np.asarray(faces))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Synthetic data set on disk with a config sized for fast test runs."""
    out = tmp_path_factory.mktemp("fixture")
    return make_fixture(
        out,
        pool_size=60,
        segments=OUTFIT_SEGMENTS,
        ring_spacing=OUTFIT_RING_SPACING,
        seed=3,
        config_overrides={
            "sampling": {"n": 10, "d_min": 0.0},
            "model": {"width": 8, "depth": 2},
            "train": {"epochs": 1, "batch_size": 8, "checkpoint_every": 1, "warmup_steps": 0},
            "resize": {"samples_per_epoch": 4},
        },
    )


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop the command-line log handler after each test; it is bound to that test's stdout."""
    yield
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, "_pbns_handler", False)]:
        root.removeHandler(handler)
