"""
Body models: container, file format, shape blend shapes and a procedural humanoid.

Body file layout (little endian)::

    8 bytes   magic b"PBNSBODY"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: version, name, K, N, N_F, S, joint_names,
              parents, has_regressor
    blocks    float32 vertices (N x 3), uint32 faces (N_F x 3),
              float32 rest joints (K x 3), float32 blend weights (N x K),
              float32 blend shapes (S x N x 3) when S > 0,
              float32 joint regressor (K x N) when has_regressor

Arrays are held in float64 after loading; every value is float32-representable
so a save/load round trip is bit-exact.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from pbns.ml import tensor as T
from pbns.ml.mesh import TriMesh, mean_edge_length, vertex_normals
from pbns.ml.rig import Skeleton, skin, validate_tree
from pbns.utils.exceptions import BodyModelError, DataError
from pbns.utils.io_utils import PathLike, arrays_sha256, atomic_write

logger = logging.getLogger(__name__)

BODY_MAGIC = b"PBNSBODY"
BODY_FORMAT_VERSION = 1

SYNTH_JOINT_NAMES = [
    "root",
    "spine",
    "chest",
    "head",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
    "l_shoulder",
    "l_elbow",
    "r_shoulder",
    "r_elbow",
]
SYNTH_PARENTS = [-1, 0, 1, 2, 0, 4, 0, 6, 2, 8, 2, 10]

# self-collision stand-in: pairs closer than this many mean edge lengths are tested
SELF_COLLISION_RADIUS_EDGES = 1.5


@dataclass(eq=False)
class BodyModel:
    name: str
    mesh: TriMesh
    skeleton: Skeleton
    weights: np.ndarray
    shape_blendshapes: Optional[np.ndarray] = None
    joint_regressor: Optional[np.ndarray] = None
    # connected component of each vertex of the procedural humanoid; not stored in files
    part_labels: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_joints(self) -> int:
        return self.skeleton.num_joints

    @property
    def num_vertices(self) -> int:
        return self.mesh.num_vertices

    @property
    def num_shapes(self) -> int:
        return 0 if self.shape_blendshapes is None else len(self.shape_blendshapes)

    @cached_property
    def weights_tensor(self) -> torch.Tensor:
        return T.as_tensor(self.weights)

    def rest_normals(self, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        positions = T.as_tensor(self.mesh.vertices if vertices is None else vertices)
        with torch.no_grad():
            return vertex_normals(self.mesh, positions).numpy()

    def content_hash(self) -> str:
        arrays = [self.mesh.vertices, self.mesh.faces, self.skeleton.parents, self.skeleton.joints, self.weights]
        if self.shape_blendshapes is not None:
            arrays.append(self.shape_blendshapes)
        if self.joint_regressor is not None:
            arrays.append(self.joint_regressor)
        return arrays_sha256(*arrays)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_body(body: BodyModel, path: PathLike) -> Path:
    header = {
        "version": BODY_FORMAT_VERSION,
        "name": body.name,
        "K": body.num_joints,
        "N": body.num_vertices,
        "N_F": body.mesh.num_faces,
        "S": body.num_shapes,
        "joint_names": list(body.skeleton.names or [f"joint_{k}" for k in range(body.num_joints)]),
        "parents": [int(p) for p in body.skeleton.parents],
        "has_regressor": body.joint_regressor is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    with atomic_write(path, "wb") as handle:
        handle.write(BODY_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        handle.write(body.mesh.vertices.astype("<f4").tobytes())
        handle.write(body.mesh.faces.astype("<u4").tobytes())
        handle.write(body.skeleton.joints.astype("<f4").tobytes())
        handle.write(body.weights.astype("<f4").tobytes())
        if body.shape_blendshapes is not None:
            handle.write(body.shape_blendshapes.astype("<f4").tobytes())
        if body.joint_regressor is not None:
            handle.write(body.joint_regressor.astype("<f4").tobytes())
    logger.info("Saved body model '%s' (%d vertices, %d joints) to %s", body.name, body.num_vertices, body.num_joints, path)
    return Path(path)


def load_body(path: PathLike, check_self_collision: bool = True) -> BodyModel:
    """
    Load and validate a body-model file.

    Raises:
        BodyModelError: listing every violated invariant, or naming the byte
            offset where a block is truncated
    """
    if not Path(path).exists():
        raise BodyModelError(f"body model not found: {path}")
    data = Path(path).read_bytes()
    if data[:8] != BODY_MAGIC:
        raise BodyModelError(f"{path}: not a body-model file (bad magic)")
    if len(data) < 12:
        raise BodyModelError(f"{path}: truncated header at byte offset 8")
    (header_len,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BodyModelError(f"{path}: malformed header: {e}") from None
    if header.get("version") != BODY_FORMAT_VERSION:
        raise BodyModelError(f"{path}: unsupported body format version {header.get('version')}")
    try:
        k, n, nf, s = (int(header[key]) for key in ("K", "N", "N_F", "S"))
        parents = np.asarray(header["parents"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise BodyModelError(f"{path}: header is missing field {e}") from None

    blocks: List[Tuple[str, str, Tuple[int, ...]]] = [
        ("vertices", "<f4", (n, 3)),
        ("faces", "<u4", (nf, 3)),
        ("joints", "<f4", (k, 3)),
        ("weights", "<f4", (n, k)),
    ]
    if s > 0:
        blocks.append(("blendshapes", "<f4", (s, n, 3)))
    if header.get("has_regressor"):
        blocks.append(("regressor", "<f4", (k, n)))

    offset = 12 + header_len
    arrays: Dict[str, np.ndarray] = {}
    for name, dtype, shape in blocks:
        size = int(np.prod(shape)) * 4
        if offset + size > len(data):
            raise BodyModelError(
                f"{path}: truncated {name} block at byte offset {offset}: need {size} bytes, have {len(data) - offset}",
                details={"block": name, "offset": offset},
            )
        arrays[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += size
    if offset != len(data):
        raise BodyModelError(f"{path}: {len(data) - offset} trailing bytes after byte offset {offset}")

    vertices = arrays["vertices"].astype(np.float64)
    faces = arrays["faces"].astype(np.int64)
    weights = arrays["weights"].astype(np.float64)
    problems = _body_problems(vertices, faces, parents, weights, header)
    if problems:
        raise BodyModelError(f"{path}: invalid body model: " + "; ".join(problems), details={"problems": problems})

    body = BodyModel(
        name=str(header.get("name", Path(path).stem)),
        mesh=TriMesh.from_arrays(vertices, faces),
        skeleton=Skeleton(parents, arrays["joints"].astype(np.float64), list(header.get("joint_names") or []) or None),
        weights=weights,
        shape_blendshapes=arrays["blendshapes"].astype(np.float64) if "blendshapes" in arrays else None,
        joint_regressor=arrays["regressor"].astype(np.float64) if "regressor" in arrays else None,
    )
    if check_self_collision:
        colliding = body_self_collisions(body, body.mesh.vertices)
        if len(colliding):
            raise BodyModelError(
                f"{path}: rest mesh self-collides at {len(colliding)} vertices",
                details={"vertices": colliding[:20].tolist()},
            )
    logger.info("Loaded body model '%s' from %s", body.name, path)
    return body


def _body_problems(vertices: np.ndarray, faces: np.ndarray, parents: np.ndarray, weights: np.ndarray, header: dict) -> List[str]:
    problems = list(validate_tree(parents))
    k = len(parents)
    if header.get("joint_names") and len(header["joint_names"]) != k:
        problems.append(f"{len(header['joint_names'])} joint names for K={k}")
    if faces.size and faces.max() >= len(vertices):
        problems.append(f"face index {int(faces.max())} out of range for N={len(vertices)}")
        return problems
    sums = weights.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(sums - 1.0) > 1e-5)
    for row in bad_rows[:10]:
        problems.append(f"weight row {int(row)} sums to {sums[row]:.6g}")
    if len(bad_rows) > 10:
        problems.append(f"... {len(bad_rows) - 10} more weight rows do not sum to 1")
    if np.any(weights < 0):
        problems.append("negative blend weights")
    if not np.all(np.isfinite(vertices)):
        problems.append("non-finite vertex positions")
    elif faces.size:
        a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        degenerate = np.flatnonzero(areas <= 1e-12)
        if len(degenerate):
            problems.append(f"{len(degenerate)} degenerate faces, first {int(degenerate[0])}")
    return problems


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def apply_shape(body: BodyModel, beta: Sequence[float]) -> np.ndarray:
    """Rest vertices plus sum_s beta_s * blendshape_s."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if len(beta) != body.num_shapes:
        raise DataError(f"beta has {len(beta)} components, body has {body.num_shapes} blend shapes")
    if body.num_shapes == 0:
        return body.mesh.vertices.copy()
    return body.mesh.vertices + np.tensordot(beta, body.shape_blendshapes, axes=1)


def shaped_skeleton(body: BodyModel, vertices: np.ndarray) -> Skeleton:
    """Joints regressed from shaped vertices when a regressor exists, else the fixed rest joints."""
    if body.joint_regressor is None:
        return body.skeleton
    return Skeleton(body.skeleton.parents, body.joint_regressor @ vertices, body.skeleton.names)


def pose_body(
    body: BodyModel,
    theta: torch.Tensor,
    translation: Optional[torch.Tensor] = None,
    vertices: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Skinned body vertices (constants, no gradient) for one pose or a batch."""
    rest = body.mesh.vertices if vertices is None else vertices
    skeleton = body.skeleton if vertices is None else shaped_skeleton(body, vertices)
    with torch.no_grad():
        return skin(T.as_tensor(rest, dtype=theta.dtype), theta.detach(), body.weights_tensor, skeleton, translation)


# ---------------------------------------------------------------------------
# valid-pose check
# ---------------------------------------------------------------------------


def body_self_collisions(
    body: BodyModel,
    positions: np.ndarray,
    radius: Optional[float] = None,
    rings: Optional[int] = None,
) -> np.ndarray:
    """
    Vertices of a (posed) body that lie behind the surface of a distant part of the same body.

    Pairs of vertices closer than ``radius`` but more than ``rings`` edges apart
    are tested with the vertex-vs-body collision test: vertex i collides when
    (x_i - x_j) . n_j < 0. Deep penetrations farther than ``radius`` from any
    surface vertex are not detected.
    """
    mesh = body.mesh
    edge = mean_edge_length(mesh)
    radius = SELF_COLLISION_RADIUS_EDGES * edge if radius is None else radius
    rings = int(np.ceil(np.pi * radius / max(edge, 1e-12))) + 1 if rings is None else rings
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64)
    near = mesh.ring_neighbourhood(rings)
    geodesic_close = np.asarray(near[pairs[:, 0], pairs[:, 1]]).ravel() > 0
    pairs = pairs[~geodesic_close]
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.int64)
    normals = body.rest_normals(positions)
    i, j = pairs[:, 0], pairs[:, 1]
    d = positions[i] - positions[j]
    hit_i = np.einsum("ij,ij->i", d, normals[j]) < 0
    hit_j = np.einsum("ij,ij->i", -d, normals[i]) < 0
    return np.unique(np.concatenate([i[hit_i], j[hit_j]]))


# ---------------------------------------------------------------------------
# procedural humanoid
# ---------------------------------------------------------------------------


@dataclass
class HumanoidDims:
    """Dimensions of the procedural humanoid in meters (z up, +y forward, +x left)."""

    hip_height: float = 0.92
    hip_offset: float = 0.10
    leg_length: float = 0.80
    leg_radius: float = 0.065
    knee_ratio: float = 0.5
    torso_bottom: float = 1.0
    torso_length: float = 0.60
    torso_cap: float = 0.08
    waist_radius: float = 0.14
    hip_radius: float = 0.15
    chest_radius: float = 0.16
    neck_radius: float = 0.06
    head_radius: float = 0.10
    arm_length: float = 0.55
    arm_radius: float = 0.045
    shoulder_gap: float = 0.035
    elbow_ratio: float = 0.5
    blend_band: float = 0.04
    min_gap: float = 0.005
    girth_scale: float = 0.1
    belly_depth: float = 0.04

    def problems(self) -> List[str]:
        problems = [f"{name} must be positive" for name, value in vars(self).items() if not value > 0]
        if 2 * self.hip_offset < 2 * self.leg_radius + self.min_gap:
            problems.append("legs overlap: hip_offset too small for leg_radius")
        if self.torso_bottom < self.hip_height + self.leg_radius + self.min_gap:
            problems.append("torso bottom intersects the top of the legs")
        if self.shoulder_gap < self.min_gap:
            problems.append("arms touch the torso: shoulder_gap below min_gap")
        if not 0 < self.knee_ratio < 1 or not 0 < self.elbow_ratio < 1:
            problems.append("knee_ratio and elbow_ratio must lie in (0, 1)")
        return problems


def _frame(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(helper, axis)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def _tube(origin: np.ndarray, axis: np.ndarray, profile: Sequence[Tuple[float, float]], segments: int):
    """
    Closed surface of revolution around ``axis``.

    ``profile`` lists (axial offset, radius) rows; the first and last rows are
    poles. Faces are counter-clockwise seen from outside.
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    u, v = _frame(axis)
    angles = 2.0 * np.pi * np.arange(segments) / segments
    radial = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
    rings = profile[1:-1]
    verts = [origin + profile[0][0] * axis]
    axial = [profile[0][0]]
    for s, r in rings:
        verts.extend(origin + s * axis + r * radial)
        axial.extend([s] * segments)
    verts.append(origin + profile[-1][0] * axis)
    axial.append(profile[-1][0])

    def ring(i: int, j: int) -> int:
        return 1 + i * segments + (j % segments)

    faces = []
    last_pole = 1 + len(rings) * segments
    for j in range(segments):
        faces.append((0, ring(0, j + 1), ring(0, j)))
        for i in range(len(rings) - 1):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
        last = len(rings) - 1
        faces.append((ring(last, j), ring(last, j + 1), last_pole))
    return np.asarray(verts), np.asarray(faces, dtype=np.int64), np.asarray(axial)


def _capsule_profile(length: float, radius: float, body_rings: int, cap_rings: int) -> List[Tuple[float, float]]:
    phis = np.linspace(0.0, np.pi / 2, cap_rings + 1)
    top = [(-radius * np.cos(p), radius * np.sin(p)) for p in phis]
    middle = [(length * t, radius) for t in np.linspace(0.0, 1.0, body_rings + 1)[1:-1]]
    bottom = [(length + radius * np.cos(p), radius * np.sin(p)) for p in phis[::-1]]
    return top + middle + bottom


def _torso_profile(dims: HumanoidDims, cap_rings: int) -> List[Tuple[float, float]]:
    h, length = dims.torso_cap, dims.torso_length
    phis = np.linspace(0.0, np.pi / 2, cap_rings + 1)
    profile = [(h * (1 - np.cos(p)), dims.hip_radius * np.sin(p)) for p in phis]
    body = [
        (0.12, dims.waist_radius),
        (0.25, dims.waist_radius),
        (0.40, 0.5 * (dims.waist_radius + dims.chest_radius)),
        (0.58, dims.chest_radius),
        (0.78, dims.chest_radius),
        (0.87, 0.5 * (dims.chest_radius + dims.neck_radius)),
        (0.93, dims.neck_radius),
        (1.00, dims.neck_radius),
    ]
    profile += [(h + f * length, r) for f, r in body]
    centre = h + length + 0.8 * dims.head_radius
    for p in np.linspace(-np.pi / 3, np.pi / 2, cap_rings + 4):
        profile.append((centre + dims.head_radius * np.sin(p), dims.head_radius * np.cos(p)))
    return profile


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _chain_weights(coord: np.ndarray, joints: Sequence[int], bounds: Sequence[float], band: float, k: int) -> np.ndarray:
    """Weights along a chain: region i (between bounds i-1 and i) belongs to joints[i], blended across each bound."""
    weights = np.zeros((len(coord), k))
    weights[:, joints[0]] = 1.0
    for i, bound in enumerate(bounds):
        w = _smoothstep((coord - (bound - band)) / (2.0 * band))
        moved = weights[:, joints[i]] * w
        weights[:, joints[i]] -= moved
        weights[:, joints[i + 1]] += moved
    return weights


def synth_humanoid(
    dims: Optional[HumanoidDims] = None,
    segments: int = 24,
    with_blendshapes: bool = True,
    name: str = "synth_humanoid",
) -> BodyModel:
    """
    Capsule-limb humanoid with 12 joints and smooth distance-falloff weights.

    The torso (with head), both legs and both arms are separate closed surfaces
    kept apart by small gaps, so the rest pose is free of self-collisions. With
    ``with_blendshapes`` two shape blend shapes are attached: a girth scale
    about the root joint and a belly bulge.
    """
    dims = dims or HumanoidDims()
    problems = dims.problems()
    if segments < 6:
        problems.append("segments must be at least 6")
    if problems:
        raise BodyModelError("invalid humanoid dimensions: " + "; ".join(problems), details={"problems": problems})

    k = len(SYNTH_PARENTS)
    base = dims.torso_bottom + dims.torso_cap
    shoulder_x = dims.chest_radius + dims.shoulder_gap + dims.arm_radius
    shoulder_z = base + 0.72 * dims.torso_length
    joints = np.zeros((k, 3))
    joints[0] = (0.0, 0.0, dims.hip_height)
    joints[1] = (0.0, 0.0, base + 0.25 * dims.torso_length)
    joints[2] = (0.0, 0.0, base + 0.55 * dims.torso_length)
    joints[3] = (0.0, 0.0, base + 0.93 * dims.torso_length)
    for side, hip, knee in ((1.0, 4, 5), (-1.0, 6, 7)):
        joints[hip] = (side * dims.hip_offset, 0.0, dims.hip_height)
        joints[knee] = (side * dims.hip_offset, 0.0, dims.hip_height - dims.knee_ratio * dims.leg_length)
    for side, shoulder, elbow in ((1.0, 8, 9), (-1.0, 10, 11)):
        joints[shoulder] = (side * shoulder_x, 0.0, shoulder_z)
        joints[elbow] = (side * (shoulder_x + dims.elbow_ratio * dims.arm_length), 0.0, shoulder_z)

    cap_rings = max(3, segments // 6)
    parts = []
    # torso + head
    v, f, _ = _tube(np.array([0.0, 0.0, dims.torso_bottom]), np.array([0.0, 0.0, 1.0]), _torso_profile(dims, cap_rings), segments)
    w = _chain_weights(v[:, 2], [0, 1, 2, 3], joints[1:4, 2], dims.blend_band, k)
    parts.append((v, f, w))
    # legs
    leg_profile = _capsule_profile(dims.leg_length, dims.leg_radius, max(8, int(dims.leg_length / 0.04)), cap_rings)
    for hip, knee in ((4, 5), (6, 7)):
        v, f, s = _tube(joints[hip], np.array([0.0, 0.0, -1.0]), leg_profile, segments)
        w = _chain_weights(s, [hip, knee], [dims.knee_ratio * dims.leg_length], dims.blend_band, k)
        parts.append((v, f, w))
    # arms
    arm_profile = _capsule_profile(dims.arm_length, dims.arm_radius, max(8, int(dims.arm_length / 0.04)), cap_rings)
    for side, shoulder, elbow in ((1.0, 8, 9), (-1.0, 10, 11)):
        v, f, s = _tube(joints[shoulder], np.array([side, 0.0, 0.0]), arm_profile, segments)
        w = _chain_weights(s, [shoulder, elbow], [dims.elbow_ratio * dims.arm_length], dims.blend_band, k)
        parts.append((v, f, w))

    offset = 0
    all_v, all_f, all_w, labels = [], [], [], []
    for label, (v, f, w) in enumerate(parts):
        all_v.append(v)
        all_f.append(f + offset)
        all_w.append(w)
        labels.append(np.full(len(v), label))
        offset += len(v)
    vertices = _f32(np.concatenate(all_v))
    faces = np.concatenate(all_f)
    weights = np.concatenate(all_w)
    # snap to float32 and renormalise so rows still sum to 1 in float64
    weights = _f32(weights)
    weights[:, :] = weights / weights.sum(axis=1, keepdims=True)
    weights = _f32(weights)

    blendshapes = None
    if with_blendshapes:
        girth = dims.girth_scale * (vertices - joints[0])
        belly_centre = np.array([0.0, dims.waist_radius, base + 0.2 * dims.torso_length])
        sigma = 0.08
        falloff = np.exp(-((vertices - belly_centre) ** 2).sum(axis=1) / (2.0 * sigma * sigma))
        belly = dims.belly_depth * falloff[:, None] * np.array([0.0, 1.0, 0.0])
        blendshapes = _f32(np.stack([girth, belly]))

    body = BodyModel(
        name=name,
        mesh=TriMesh.from_arrays(vertices, faces),
        skeleton=Skeleton(np.asarray(SYNTH_PARENTS), _f32(joints), list(SYNTH_JOINT_NAMES)),
        weights=weights,
        shape_blendshapes=blendshapes,
        part_labels=np.concatenate(labels),
    )
    colliding = body_self_collisions(body, body.mesh.vertices)
    if len(colliding):
        raise BodyModelError(f"humanoid dimensions produce {len(colliding)} self-colliding vertices at rest")
    return body


def _f32(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float32).astype(np.float64)
