"""
Pose files, procedural pose pools and the pose-database sampler.

Pose file layout (little endian)::

    8 bytes   magic b"PBNSPOSE"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: version, frames, K, has_translation
    blocks    float32 theta (frames x K x 3), float32 translations (frames x 3)

Files that do not start with the magic are read as CSV with 3K or 3K + 3
numeric columns per row.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pbns.ml.rig import Pose, Skeleton
from pbns.utils.exceptions import DataError, PoseFileError
from pbns.utils.io_utils import PathLike, atomic_write

logger = logging.getLogger(__name__)

POSE_MAGIC = b"PBNSPOSE"
POSE_FORMAT_VERSION = 1

# entries of the pose vector holding the root orientation
ROOT_ORIENTATION = 3

# (low, high) axis-angle bounds per joint of the procedural humanoid, radians
JOINT_LIMITS: Dict[str, Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = {
    "root": ((-0.15, -0.15, -0.6), (0.15, 0.15, 0.6)),
    "spine": ((-0.3, -0.2, -0.3), (0.3, 0.2, 0.3)),
    "chest": ((-0.2, -0.15, -0.2), (0.2, 0.15, 0.2)),
    "head": ((-0.4, -0.3, -0.5), (0.4, 0.3, 0.5)),
    "l_hip": ((-0.5, -0.4, -0.3), (1.2, 0.15, 0.3)),
    "r_hip": ((-0.5, -0.15, -0.3), (1.2, 0.4, 0.3)),
    "l_knee": ((-1.4, 0.0, 0.0), (0.0, 0.0, 0.0)),
    "r_knee": ((-1.4, 0.0, 0.0), (0.0, 0.0, 0.0)),
    "l_shoulder": ((-0.4, -0.3, -0.6), (0.4, 1.2, 0.6)),
    "r_shoulder": ((-0.4, -1.2, -0.6), (0.4, 0.3, 0.6)),
    "l_elbow": ((0.0, 0.0, 0.0), (0.0, 0.0, 1.5)),
    "r_elbow": ((0.0, 0.0, -1.5), (0.0, 0.0, 0.0)),
}


@dataclass
class PoseDatabase:
    """Accepted poses with disjoint train and validation index sets."""

    poses: List[Pose]
    train_index: np.ndarray
    validation_index: np.ndarray

    def __post_init__(self) -> None:
        self.train_index = np.asarray(self.train_index, dtype=np.int64)
        self.validation_index = np.asarray(self.validation_index, dtype=np.int64)
        if np.intersect1d(self.train_index, self.validation_index).size:
            raise DataError("a pose appears in both the train and the validation split")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def train(self) -> List[Pose]:
        return [self.poses[i] for i in self.train_index]

    @property
    def validation(self) -> List[Pose]:
        return [self.poses[i] for i in self.validation_index]


def pose_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Max-abs distance between pose vectors, ignoring the root orientation entries."""
    return np.abs(np.asarray(a)[..., ROOT_ORIENTATION:] - np.asarray(b)[..., ROOT_ORIENTATION:]).max(axis=-1)


def sample_pose_database(
    raw_poses: Sequence[Pose],
    n: int,
    d_min: float = 0.5,
    split: float = 0.85,
    seed: int = 0,
) -> PoseDatabase:
    """
    Greedy rejection sampling of a diverse pose set.

    Candidates are drawn without replacement in a seeded random order; a
    candidate is accepted when its distance to every accepted pose is at least
    ``d_min``. The first ``round(split * accepted)`` accepted poses form the
    training split, the rest the validation split.
    """
    if n < 1:
        raise DataError(f"requested pose count must be positive, got {n}")
    if not 0.0 <= split <= 1.0:
        raise DataError(f"split fraction must lie in [0, 1], got {split}")
    rng = np.random.default_rng(seed)
    vectors = np.stack([p.vector() for p in raw_poses]) if len(raw_poses) else np.zeros((0, 3))
    accepted: List[int] = []
    kept = np.zeros((0, vectors.shape[1]))
    for candidate in rng.permutation(len(raw_poses)):
        if len(accepted) == n:
            break
        if len(kept) and pose_distance(kept, vectors[candidate]).min() < d_min:
            continue
        accepted.append(int(candidate))
        kept = np.vstack([kept, vectors[candidate]])
    if len(accepted) < n:
        logger.warning("Pose pool exhausted: accepted %d of %d requested poses (d_min=%g)", len(accepted), n, d_min)
    poses = [raw_poses[i] for i in accepted]
    num_train = int(round(split * len(poses)))
    index = np.arange(len(poses))
    logger.info("Sampled %d poses: %d train, %d validation", len(poses), num_train, len(poses) - num_train)
    return PoseDatabase(poses, index[:num_train], index[num_train:])


def random_pose_pool(
    skeleton: Skeleton,
    n: int,
    seed: int = 0,
    max_angle: float = 0.5,
    translation_range: float = 0.0,
) -> List[Pose]:
    """
    Uniformly random poses within per-joint angle limits.

    Joints named in ``JOINT_LIMITS`` use those bounds; other joints use
    ``[-max_angle, max_angle]`` on every component.
    """
    rng = np.random.default_rng(seed)
    k = skeleton.num_joints
    names = skeleton.names or [""] * k
    low = np.full((k, 3), -max_angle)
    high = np.full((k, 3), max_angle)
    for joint, name in enumerate(names):
        if name in JOINT_LIMITS:
            low[joint], high[joint] = JOINT_LIMITS[name]
    theta = rng.uniform(low, high, size=(n, k, 3))
    if translation_range > 0:
        translation = rng.uniform(-translation_range, translation_range, size=(n, 3))
        return [Pose(theta[i], translation[i]) for i in range(n)]
    return [Pose(theta[i]) for i in range(n)]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_poses(path: PathLike, poses: Sequence[Pose]) -> Path:
    if not poses:
        raise PoseFileError("cannot write an empty pose file")
    k = poses[0].num_joints
    if any(p.num_joints != k for p in poses):
        raise PoseFileError("all poses in a file must have the same joint count")
    has_translation = any(p.translation is not None for p in poses)
    header = json.dumps(
        {"version": POSE_FORMAT_VERSION, "frames": len(poses), "K": k, "has_translation": has_translation}
    ).encode("utf-8")
    theta = np.stack([p.theta for p in poses])
    with atomic_write(path, "wb") as handle:
        handle.write(POSE_MAGIC)
        handle.write(struct.pack("<I", len(header)))
        handle.write(header)
        handle.write(theta.astype("<f4").tobytes())
        if has_translation:
            translation = np.stack([p.translation if p.translation is not None else np.zeros(3) for p in poses])
            handle.write(translation.astype("<f4").tobytes())
    return Path(path)


def load_poses(path: PathLike, num_joints: Optional[int] = None) -> List[Pose]:
    """
    Read a pose file (binary, or CSV fallback).

    Args:
        path: pose file
        num_joints: expected K; required to tell 3K + 3 CSV columns from 3K

    Raises:
        PoseFileError: on malformed content or a joint-count mismatch
    """
    path = Path(path)
    if not path.exists():
        raise PoseFileError(f"pose file not found: {path}")
    with open(path, "rb") as handle:
        magic = handle.read(len(POSE_MAGIC))
    poses = _load_binary(path) if magic == POSE_MAGIC else _load_csv(path, num_joints)
    if num_joints is not None and poses and poses[0].num_joints != num_joints:
        raise PoseFileError(f"{path}: poses have {poses[0].num_joints} joints, skeleton has {num_joints}")
    logger.info("Loaded %d poses from %s", len(poses), path)
    return poses


def _load_binary(path: Path) -> List[Pose]:
    data = path.read_bytes()
    if len(data) < 12:
        raise PoseFileError(f"{path}: truncated header at byte offset {len(POSE_MAGIC)}")
    (header_len,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
        frames, k = int(header["frames"]), int(header["K"])
        has_translation = bool(header.get("has_translation", False))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise PoseFileError(f"{path}: malformed header: {e}") from None
    if header.get("version") != POSE_FORMAT_VERSION:
        raise PoseFileError(f"{path}: unsupported pose format version {header.get('version')}")
    offset = 12 + header_len
    expected = frames * k * 3 * 4 + (frames * 3 * 4 if has_translation else 0)
    if len(data) - offset != expected:
        raise PoseFileError(
            f"{path}: pose blocks at byte offset {offset} hold {len(data) - offset} bytes, expected {expected}"
        )
    theta = np.frombuffer(data, dtype="<f4", count=frames * k * 3, offset=offset).reshape(frames, k, 3)
    translation = None
    if has_translation:
        translation = np.frombuffer(data, dtype="<f4", count=frames * 3, offset=offset + frames * k * 12).reshape(frames, 3)
    return [
        Pose(theta[i].astype(np.float64), None if translation is None else translation[i].astype(np.float64))
        for i in range(frames)
    ]


def _load_csv(path: Path, num_joints: Optional[int]) -> List[Pose]:
    try:
        frame = pd.read_csv(path, header=None, comment="#")
        if not all(pd.api.types.is_numeric_dtype(t) for t in frame.dtypes):
            frame = pd.read_csv(path, header=0, comment="#")
        values = frame.to_numpy(dtype=np.float64)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError, UnicodeDecodeError) as e:
        raise PoseFileError(f"{path}: not a pose file: {e}") from None
    columns = values.shape[1]
    if num_joints is None:
        if columns % 3:
            raise PoseFileError(f"{path}: {columns} columns is not a multiple of 3")
        num_joints = columns // 3
    if columns == 3 * num_joints:
        return [Pose(row.reshape(num_joints, 3)) for row in values]
    if columns == 3 * num_joints + 3:
        return [Pose(row[:-3].reshape(num_joints, 3), row[-3:]) for row in values]
    raise PoseFileError(f"{path}: {columns} columns, expected {3 * num_joints} or {3 * num_joints + 3} for K={num_joints}")
