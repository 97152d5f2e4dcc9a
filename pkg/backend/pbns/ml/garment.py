"""
Garment templates: rest-pose outfit meshes with layer order, fabric multipliers
and pinned vertices, their files, and the procedural fixture outfits.

A garment is stored as an OBJ mesh plus a JSON sidecar with the same stem::

    {"name": "...", "layers": [...], "stretch": [...], "bend": [...],
     "pinned": [vertex indices], "trainable_weights": false}
"""

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from pbns.ml import tensor as T
from pbns.ml.body import HumanoidDims
from pbns.ml.mesh import TriMesh, edge_lengths, read_obj, write_obj
from pbns.utils.exceptions import DataError, MeshError
from pbns.utils.io_utils import PathLike, arrays_sha256, atomic_write

logger = logging.getLogger(__name__)

# gap between a fixture garment and the body surface at rest, meters
FIXTURE_CLEARANCE = 0.015


@dataclass(eq=False)
class GarmentTemplate:
    mesh: TriMesh
    layers: np.ndarray
    stretch: np.ndarray
    bend: np.ndarray
    pinned: np.ndarray
    trainable_weights: bool = False
    name: str = "garment"

    def __post_init__(self) -> None:
        n = self.mesh.num_vertices
        self.layers = np.asarray(self.layers, dtype=np.int64).ravel()
        self.stretch = np.asarray(self.stretch, dtype=np.float64).ravel()
        self.bend = np.asarray(self.bend, dtype=np.float64).ravel()
        self.pinned = np.asarray(self.pinned, dtype=bool).ravel()
        problems = [
            f"{label} has {len(values)} entries for {n} vertices"
            for label, values in (("layers", self.layers), ("stretch", self.stretch), ("bend", self.bend), ("pinned", self.pinned))
            if len(values) != n
        ]
        if not problems:
            present = np.unique(self.layers)
            if len(present) and not np.array_equal(present, np.arange(present[-1] + 1)):
                problems.append(f"layer indices must be contiguous from 0, got {present.tolist()}")
            if not (np.all(self.stretch > 0) and np.all(self.bend > 0)):
                problems.append("fabric multipliers must be positive")
        if problems:
            raise DataError("invalid garment template: " + "; ".join(problems), details={"problems": problems})

    @classmethod
    def uniform(cls, mesh: TriMesh, name: str = "garment", trainable_weights: bool = False) -> "GarmentTemplate":
        """Single layer, unit fabric multipliers, nothing pinned."""
        n = mesh.num_vertices
        return cls(mesh, np.zeros(n), np.ones(n), np.ones(n), np.zeros(n, dtype=bool), trainable_weights, name)

    @property
    def num_vertices(self) -> int:
        return self.mesh.num_vertices

    @property
    def num_layers(self) -> int:
        return int(self.layers.max()) + 1 if len(self.layers) else 0

    @cached_property
    def rest_edge_lengths(self) -> torch.Tensor:
        with torch.no_grad():
            return edge_lengths(self.mesh, T.as_tensor(self.mesh.vertices))

    @cached_property
    def rest_tensor(self) -> torch.Tensor:
        return T.as_tensor(self.mesh.vertices)

    def content_hash(self) -> str:
        return arrays_sha256(self.mesh.vertices, self.mesh.faces, self.layers, self.stretch, self.bend, self.pinned)


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_garment(garment: GarmentTemplate, path: PathLike) -> Path:
    path = Path(path)
    write_obj(path, garment.mesh.vertices, garment.mesh.faces, comment=f"garment {garment.name}")
    sidecar = {
        "name": garment.name,
        "layers": garment.layers.tolist(),
        "stretch": garment.stretch.tolist(),
        "bend": garment.bend.tolist(),
        "pinned": np.flatnonzero(garment.pinned).tolist(),
        "trainable_weights": garment.trainable_weights,
    }
    with atomic_write(sidecar_path(path), "w") as handle:
        json.dump(sidecar, handle)
    logger.info("Saved garment '%s' (%d vertices, %d layers) to %s", garment.name, garment.num_vertices, garment.num_layers, path)
    return path


def load_garment(path: PathLike) -> GarmentTemplate:
    """Read a garment OBJ; a missing sidecar means one layer, unit fabric and no pins."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"garment file not found: {path}")
    vertices, faces = read_obj(path)
    mesh = TriMesh.from_arrays(vertices, faces)
    side = sidecar_path(path)
    if not side.exists():
        logger.warning("No sidecar for %s; using a single layer with unit fabric weights", path)
        return GarmentTemplate.uniform(mesh, name=path.stem)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{side}: malformed sidecar: {e}") from None
    n = mesh.num_vertices
    pinned = np.zeros(n, dtype=bool)
    pins = np.asarray(meta.get("pinned", []), dtype=np.int64)
    if pins.size and (pins.min() < 0 or pins.max() >= n):
        raise DataError(f"{side}: pinned index out of range for {n} vertices")
    pinned[pins] = True
    return GarmentTemplate(
        mesh,
        meta.get("layers", np.zeros(n)),
        meta.get("stretch", np.ones(n)),
        meta.get("bend", np.ones(n)),
        pinned,
        bool(meta.get("trainable_weights", False)),
        str(meta.get("name", path.stem)),
    )


# ---------------------------------------------------------------------------
# fixture outfits over the procedural humanoid
# ---------------------------------------------------------------------------


def _open_tube(z_bottom: float, z_top: float, r_bottom: float, r_top: float, segments: int, rings: int):
    """Open surface of revolution about the z axis; rings run bottom to top, normals face outward."""
    z = np.linspace(z_bottom, z_top, rings)
    r = np.linspace(r_bottom, r_top, rings)
    phi = 2.0 * np.pi * np.arange(segments) / segments
    vertices = np.stack(
        [r[:, None] * np.cos(phi)[None, :], r[:, None] * np.sin(phi)[None, :], np.repeat(z[:, None], segments, axis=1)],
        axis=-1,
    ).reshape(-1, 3)
    faces = []
    for i in range(rings - 1):
        for j in range(segments):
            a, b = i * segments + j, i * segments + (j + 1) % segments
            c, d = (i + 1) * segments + (j + 1) % segments, (i + 1) * segments + j
            faces.append((a, b, c))
            faces.append((a, c, d))
    return vertices, np.asarray(faces, dtype=np.int64)


def tube_skirt(
    dims: Optional[HumanoidDims] = None,
    segments: int = 48,
    ring_spacing: float = 0.02,
    length: float = 0.40,
    clearance: float = FIXTURE_CLEARANCE,
    flare: float = 0.25,
    pin_waist: bool = True,
) -> GarmentTemplate:
    """
    Flared open tube hanging from the waist of the procedural humanoid.

    The waistband ring is pinned when ``pin_waist`` is set.
    """
    dims = dims or HumanoidDims()
    base = dims.torso_bottom + dims.torso_cap
    z_top = base + 0.15 * dims.torso_length
    r_top = dims.waist_radius + clearance
    # the tube must clear the widest part of the hips below the waist
    flare = max(flare, (dims.hip_radius + clearance - r_top) / max(z_top - base, 1e-6) + 0.05)
    rings = max(2, int(round(length / ring_spacing)) + 1)
    vertices, faces = _open_tube(z_top - length, z_top, r_top + flare * length, r_top, segments, rings)
    mesh = TriMesh.from_arrays(vertices, faces)
    n = mesh.num_vertices
    pinned = np.zeros(n, dtype=bool)
    if pin_waist:
        pinned[-segments:] = True
    return GarmentTemplate(mesh, np.zeros(n), np.ones(n), np.ones(n), pinned, name="tube_skirt")


def vest(
    dims: Optional[HumanoidDims] = None,
    segments: int = 48,
    ring_spacing: float = 0.02,
    clearance: float = FIXTURE_CLEARANCE,
    interpenetrate: bool = False,
) -> GarmentTemplate:
    """
    Open tube around the torso from below the waistband to under the arms.

    With ``interpenetrate`` the bottom rim is pulled inside the skirt's
    waistband (still outside the body), for collision-recovery experiments.
    """
    dims = dims or HumanoidDims()
    base = dims.torso_bottom + dims.torso_cap
    z_bottom = base + 0.07 * dims.torso_length
    z_top = base + 0.57 * dims.torso_length
    r_top = dims.chest_radius + 1.5 * clearance
    if interpenetrate:
        r_bottom = 0.5 * (dims.waist_radius + dims.hip_radius) + 0.6 * clearance
    else:
        r_bottom = dims.hip_radius + 2.0 * clearance
    rings = max(2, int(round((z_top - z_bottom) / ring_spacing)) + 1)
    vertices, faces = _open_tube(z_bottom, z_top, r_bottom, r_top, segments, rings)
    mesh = TriMesh.from_arrays(vertices, faces)
    n = mesh.num_vertices
    return GarmentTemplate(mesh, np.zeros(n), np.ones(n), np.ones(n), np.zeros(n, dtype=bool), name="vest")


def combine_garments(garments: Sequence[GarmentTemplate], name: str = "outfit", trainable_weights: bool = False) -> GarmentTemplate:
    """Stack garments into one outfit; garment i becomes layer i (inner to outer)."""
    vertices, faces, layers, stretch, bend, pinned = [], [], [], [], [], []
    offset = 0
    for layer, garment in enumerate(garments):
        vertices.append(garment.mesh.vertices)
        faces.append(garment.mesh.faces + offset)
        layers.append(np.full(garment.num_vertices, layer))
        stretch.append(garment.stretch)
        bend.append(garment.bend)
        pinned.append(garment.pinned)
        offset += garment.num_vertices
    mesh = TriMesh.from_arrays(np.concatenate(vertices), np.concatenate(faces))
    return GarmentTemplate(
        mesh,
        np.concatenate(layers),
        np.concatenate(stretch),
        np.concatenate(bend),
        np.concatenate(pinned),
        trainable_weights,
        name,
    )


def make_outfit(
    dims: Optional[HumanoidDims] = None,
    segments: int = 48,
    ring_spacing: float = 0.02,
    interpenetrate: bool = False,
    trainable_weights: bool = False,
) -> GarmentTemplate:
    """Two-layer fixture outfit: tube skirt (layer 0) under a vest (layer 1)."""
    skirt = tube_skirt(dims, segments, ring_spacing)
    top = vest(dims, segments, ring_spacing, interpenetrate=interpenetrate)
    return combine_garments([skirt, top], name="skirt_vest", trainable_weights=trainable_weights)


def dense_outfit(target_vertices: int, dims: Optional[HumanoidDims] = None) -> GarmentTemplate:
    """Fixture outfit refined until it has roughly ``target_vertices`` vertices."""
    if target_vertices < 100:
        raise MeshError(f"dense outfit needs at least 100 vertices, got {target_vertices}")
    base = make_outfit(dims)
    scale = np.sqrt(target_vertices / base.num_vertices)
    return make_outfit(dims, segments=max(8, int(round(48 * scale))), ring_spacing=0.02 / scale)
