"""
Skeleton kinematics, Linear Blend Skinning and blend-weight transfer.

Joint transforms are rest-pose relative: a joint at rest maps rest positions to
themselves, so skinning applies directly to rest-pose vertices. Root
translation is added after skinning as a global offset.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence

import numpy as np
import torch

from pbns.ml import tensor as T
from pbns.ml.mesh import NNIndex, TriMesh, mean_edge_length
from pbns.utils.exceptions import BodyModelError, DataError

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-6
MAX_INFLUENCES = 4

# initial share of the skeletal-neighbour joints added to a trainable weight row
NEIGHBOUR_INIT_WEIGHT = 1e-3


@dataclass(eq=False)
class Skeleton:
    """
    Joint tree. ``parents[0] == -1`` is the root; every other joint has one parent.
    """

    parents: np.ndarray
    joints: np.ndarray
    names: Optional[List[str]] = None
    order: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.parents = np.asarray(self.parents, dtype=np.int64).ravel()
        self.joints = np.ascontiguousarray(self.joints, dtype=np.float64)
        k = len(self.parents)
        problems = validate_tree(self.parents)
        if self.joints.shape != (k, 3):
            problems.append(f"rest joints must be {k} x 3, got {self.joints.shape}")
        if self.names is not None and len(self.names) != k:
            problems.append(f"{len(self.names)} joint names for {k} joints")
        if problems:
            raise BodyModelError("invalid skeleton: " + "; ".join(problems), details={"problems": problems})
        self.order = _topological_order(self.parents)

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def children(self, joint: int) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.parents == joint)]

    def neighbours(self, joint: int) -> List[int]:
        """Parent and children of ``joint``."""
        parent = int(self.parents[joint])
        return ([parent] if parent >= 0 else []) + self.children(joint)

    @cached_property
    def joints_tensor(self) -> torch.Tensor:
        return T.as_tensor(self.joints)


def validate_tree(parents: np.ndarray) -> List[str]:
    """Problems that keep ``parents`` from being a single-rooted tree with root 0."""
    problems = []
    k = len(parents)
    if k == 0:
        return ["skeleton has no joints"]
    if parents[0] != -1:
        problems.append("joint 0 must be the root (parent -1)")
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        problems.append(f"expected exactly one root, found {len(roots)}")
    if np.any(parents >= k) or np.any(parents < -1):
        problems.append("parent index out of range")
        return problems
    for joint in range(k):
        seen = set()
        node = joint
        while node >= 0:
            if node in seen:
                problems.append(f"cycle through joint {joint}")
                return problems
            seen.add(node)
            node = int(parents[node])
    return problems


def _topological_order(parents: np.ndarray) -> np.ndarray:
    order = [0]
    head = 0
    while head < len(order):
        node = order[head]
        head += 1
        order.extend(int(c) for c in np.flatnonzero(parents == node))
    return np.asarray(order, dtype=np.int64)


@dataclass
class Pose:
    """Axis-angle rotation per joint (radians) and an optional root translation (meters)."""

    theta: np.ndarray
    translation: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        if self.translation is not None:
            self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.theta)):
            raise DataError("pose angles must be finite")

    @property
    def num_joints(self) -> int:
        return len(self.theta)

    def vector(self) -> np.ndarray:
        return self.theta.ravel()


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """3 x 3 rotation matrix of an axis-angle vector (zero maps to identity)."""
    return T.batched_rodrigues(axis_angle.reshape(1, 3))[0]


def global_transforms(skeleton: Skeleton, theta: torch.Tensor) -> torch.Tensor:
    """
    Rest-relative 4 x 4 transform of every joint.

    Args:
        skeleton: joint tree
        theta: (..., K, 3) axis-angle rotations

    Returns:
        (..., K, 4, 4) transforms G_k with G_k = G_parent(k) . local(R_k, J_k) composed
        with the inverse rest transform of joint k
    """
    k = skeleton.num_joints
    if theta.shape[-2:] != (k, 3):
        raise DataError(f"pose has shape {list(theta.shape)}, skeleton expects (..., {k}, 3)")
    rotations = T.batched_rodrigues(theta)
    joints = skeleton.joints_tensor.to(theta.dtype)
    parents = skeleton.parents
    world_rot: List[Optional[torch.Tensor]] = [None] * k
    world_pos: List[Optional[torch.Tensor]] = [None] * k
    for joint in skeleton.order:
        local = rotations[..., joint, :, :]
        parent = parents[joint]
        if parent < 0:
            world_rot[joint] = local
            world_pos[joint] = joints[joint].expand(theta.shape[:-2] + (3,))
        else:
            bone = T.sub(joints[joint], joints[parent])
            world_rot[joint] = T.matmul(world_rot[parent], local)
            world_pos[joint] = T.add(world_pos[parent], T.matmul(world_rot[parent], bone[:, None])[..., 0])
    rot = torch.stack(world_rot, dim=-3)
    pos = torch.stack(world_pos, dim=-2)
    trans = T.sub(pos, T.matmul(rot, joints[:, :, None])[..., 0])
    top = T.concat([rot, trans[..., None]], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype)
    bottom[..., 0, 3] = 1.0
    return T.concat([top, bottom], dim=-2)


def check_weights(weights: torch.Tensor) -> None:
    sums = weights.detach().sum(dim=-1)
    bad = torch.nonzero((sums - 1.0).abs() > WEIGHT_SUM_TOLERANCE).ravel()
    if len(bad):
        row = int(bad[0])
        raise DataError(
            f"blend weight row {row} sums to {float(sums[row]):.9g}, expected 1",
            details={"rows": bad[:20].tolist()},
        )
    if bool((weights.detach() < 0).any()):
        raise DataError("blend weights must be nonnegative")


def skin(
    positions: torch.Tensor,
    theta: torch.Tensor,
    weights: torch.Tensor,
    skeleton: Skeleton,
    translation: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Linear Blend Skinning: v'_i = sum_k w_ik G_k v_i, plus the root translation.

    Args:
        positions: (..., N, 3) rest-pose vertices
        theta: (..., K, 3) pose
        weights: (N, K) convex blend weights
        skeleton: joint tree
        translation: optional (..., 3) root translation

    Returns:
        (..., N, 3) posed vertices
    """
    n, k = weights.shape
    if positions.shape[-2:] != (n, 3):
        raise DataError(f"positions {list(positions.shape)} do not match {n} weight rows")
    if k != skeleton.num_joints:
        raise DataError(f"weights have {k} columns, skeleton has {skeleton.num_joints} joints")
    check_weights(weights)
    transforms = global_transforms(skeleton, theta)[..., :3, :]
    flat = transforms.reshape(transforms.shape[:-3] + (k, 12))
    blended = T.matmul(weights.to(flat.dtype), flat).reshape(flat.shape[:-2] + (n, 3, 4))
    ones = torch.ones(positions.shape[:-1] + (1,), dtype=positions.dtype)
    homogeneous = T.concat([positions, ones], dim=-1)
    posed = T.matmul(blended, homogeneous[..., None])[..., 0]
    if translation is not None:
        posed = T.add(posed, translation[..., None, :])
    return posed


def prune_weights(weights: np.ndarray, max_influences: int = MAX_INFLUENCES) -> np.ndarray:
    """Keep the ``max_influences`` largest entries of rows that exceed it and renormalise those rows."""
    weights = np.array(weights, dtype=np.float64, copy=True)
    crowded = np.flatnonzero((weights > 0).sum(axis=1) > max_influences)
    if len(crowded):
        rows = weights[crowded]
        drop = np.argsort(-rows, axis=1, kind="stable")[:, max_influences:]
        np.put_along_axis(rows, drop, 0.0, axis=1)
        weights[crowded] = rows / rows.sum(axis=1, keepdims=True)
    return weights


def transfer_weights(garment: TriMesh, body: TriMesh, body_weights: np.ndarray) -> np.ndarray:
    """Copy to each garment vertex the weight row of its nearest rest body vertex."""
    cell = 2.0 * max(mean_edge_length(body), 1e-6)
    index = NNIndex.build(body.vertices, cell)
    nearest = index.query(garment.vertices)
    return prune_weights(np.asarray(body_weights, dtype=np.float64)[nearest])


def expanded_support(weights: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Joints present in each row plus their skeletal neighbours."""
    support = weights > 0
    expanded = support.copy()
    for joint in range(skeleton.num_joints):
        rows = support[:, joint]
        for neighbour in skeleton.neighbours(joint):
            expanded[rows, neighbour] = True
    return expanded


class SkinningWeights(torch.nn.Module):
    """
    Garment blend weights, either frozen or trainable.

    Trainable weights are unconstrained logits passed through a row-wise softmax
    restricted to each row's initial support and its skeletal neighbours, so the
    rows stay convex while they are optimised.

    Each added neighbour joint starts with mass ``NEIGHBOUR_INIT_WEIGHT`` and the
    row is renormalised, so the initial trainable weights are the transferred
    weights scaled by ``1 / (1 + NEIGHBOUR_INIT_WEIGHT * added)``. A zero-mass
    start would give the neighbours no gradient.
    """

    def __init__(self, initial: np.ndarray, skeleton: Optional[Skeleton] = None, trainable: bool = False):
        super().__init__()
        initial = np.asarray(initial, dtype=np.float64)
        check_weights(torch.as_tensor(initial))
        self.trainable = trainable
        if trainable:
            # without a skeleton every joint is allowed (checkpoint loading overwrites the mask)
            mask = expanded_support(initial, skeleton) if skeleton is not None else np.ones(initial.shape, dtype=bool)
            seeded = np.where(initial > 0, initial, np.where(mask, NEIGHBOUR_INIT_WEIGHT, 1.0))
            self.register_buffer("mask", torch.as_tensor(mask))
            self.logits = torch.nn.Parameter(T.as_tensor(np.log(seeded)))
        else:
            self.register_buffer("frozen", T.as_tensor(initial))

    def forward(self) -> torch.Tensor:
        if self.trainable:
            return T.softmax_masked(self.logits, self.mask)
        return self.frozen


def pose_tensor(poses: Sequence[Pose]) -> torch.Tensor:
    return T.as_tensor(np.stack([p.theta for p in poses]))


def translation_tensor(poses: Sequence[Pose]) -> Optional[torch.Tensor]:
    if all(p.translation is None for p in poses):
        return None
    return T.as_tensor(np.stack([p.translation if p.translation is not None else np.zeros(3) for p in poses]))
