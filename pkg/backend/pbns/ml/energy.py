"""
The unsupervised physics loss and its evaluation metrics.

Every term is computed per batch sample, so positions may be shaped (N, 3) or
(B, N, 3); the loss is the mean over samples of

    L = edge + bend + collision + gravity + pin

Collision correspondences are found by exact nearest neighbour, layer by layer:
layer l is matched against the body plus every garment layer below it. The
matching and the target normals are constants of the step.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from pbns.ml import tensor as T
from pbns.ml.garment import GarmentTemplate
from pbns.ml.mesh import NNIndex, TriMesh, edge_lengths, face_normals, mean_edge_length, normal_laplacian, vertex_normals
from pbns.utils.exceptions import ConfigError, MeshError

logger = logging.getLogger(__name__)

TERMS = ("edge", "bend", "collision", "gravity", "pin")


@dataclass
class EnergyWeights:
    edge: float = 15.0
    bend: float = 2e-4
    collision: float = 25.0
    epsilon: float = 0.004
    pin: float = 10.0
    density: float = 0.15
    gravity: float = 9.81
    up_axis: int = 2
    use_gravity: bool = True

    def __post_init__(self) -> None:
        for name in ("edge", "bend", "collision", "pin", "density", "gravity"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"energy.{name} must be positive, got {getattr(self, name)}")
        if self.epsilon < 0:
            raise ConfigError(f"energy.epsilon must be nonnegative, got {self.epsilon}")
        if self.up_axis not in (0, 1, 2):
            raise ConfigError(f"energy.up_axis must be 0, 1 or 2, got {self.up_axis}")


@dataclass
class Correspondences:
    """Per layer, (B, n_l) indices into the stacked [body; garment] vertex array of each sample."""

    layers: List[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0] if self.layers else 0


@dataclass
class EnergyReport:
    total: torch.Tensor
    per_sample: torch.Tensor
    term_tensors: Dict[str, torch.Tensor]
    correspondences: Correspondences
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return int(self.per_sample.shape[0])

    @property
    def terms(self) -> Dict[str, float]:
        return {name: float(value.detach().mean()) for name, value in self.term_tensors.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {"loss": float(self.total.detach()), **self.terms, **self.metrics}


class EnergyContext:
    """
    Per-garment constants of the loss: rest edges, fabric multipliers per edge
    and per face, gravity coefficients, pinned mask and layer membership.
    """

    def __init__(self, garment: GarmentTemplate, body_mesh: TriMesh, weights: Optional[EnergyWeights] = None):
        self.garment = garment
        self.mesh = garment.mesh
        self.body_mesh = body_mesh
        self.weights = weights or EnergyWeights()
        mesh = garment.mesh
        self.rest_edges = garment.rest_edge_lengths
        self.edge_fabric = T.as_tensor(0.5 * (garment.stretch[mesh.edges[:, 0]] + garment.stretch[mesh.edges[:, 1]]))
        self.face_fabric = T.as_tensor(garment.bend[mesh.faces].mean(axis=1))
        masses = self.weights.density * mesh.vertex_areas()
        self.gravity_k = T.as_tensor(masses * self.weights.gravity)
        self.pinned = T.as_tensor(garment.pinned.astype(np.float64))
        self.layer_vertices = [np.flatnonzero(garment.layers == layer) for layer in range(garment.num_layers)]
        self.cell_size = 2.0 * max(mean_edge_length(body_mesh), 1e-6)


# ---------------------------------------------------------------------------
# energy terms, per sample
# ---------------------------------------------------------------------------


def edge_energy(lengths: torch.Tensor, rest_lengths: torch.Tensor, fabric: torch.Tensor, weight: float) -> torch.Tensor:
    """weight * sum_e fabric_e (E_e - E_T,e)^2 over the last axis."""
    if lengths.shape[-1] != rest_lengths.shape[-1]:
        raise MeshError(f"{lengths.shape[-1]} edge lengths against {rest_lengths.shape[-1]} rest lengths")
    stretch = T.square(T.sub(lengths, rest_lengths.to(lengths.dtype)))
    return T.scalar_mul(T.sum(T.mul(stretch, fabric.to(lengths.dtype)), dim=-1), weight)


def bend_energy(normals: torch.Tensor, mesh: TriMesh, fabric: torch.Tensor, weight: float) -> torch.Tensor:
    """weight * sum_f fabric_f |Laplacian(N)_f|^2."""
    laplacian = normal_laplacian(mesh, normals)
    per_face = T.sum(T.square(laplacian), dim=-1)
    return T.scalar_mul(T.sum(T.mul(per_face, fabric.to(normals.dtype)), dim=-1), weight)


def _gather_batched(values: torch.Tensor, index: np.ndarray) -> torch.Tensor:
    """values (..., M, 3) gathered by index (..., n) sample by sample."""
    index = np.asarray(index, dtype=np.int64)
    if values.dim() == 2:
        return T.gather_rows(values, index)
    batch, m = values.shape[0], values.shape[1]
    flat_index = (index + m * np.arange(batch)[:, None]).ravel()
    gathered = T.gather_rows(values.reshape(batch * m, 3), flat_index)
    return gathered.reshape(batch, index.shape[1], 3)


def collision_energy(
    sources: torch.Tensor,
    targets: torch.Tensor,
    target_normals: torch.Tensor,
    correspondences: np.ndarray,
    epsilon: float,
    weight: float,
) -> torch.Tensor:
    """
    weight * sum_i min((x_i - x_j) . n_j - epsilon, 0)^2 with j = correspondences[i].

    Target normals are used as constants; gradients reach both the source and
    the target positions.
    """
    if targets.shape[-2] == 0:
        raise MeshError("collision target set is empty")
    matched = _gather_batched(targets, correspondences)
    normals = _gather_batched(target_normals.detach(), correspondences)
    offset = T.dot_rows(T.sub(sources, matched), normals)
    violation = T.clamp_max_zero(T.sub(offset, torch.tensor(float(epsilon), dtype=offset.dtype)))
    return T.scalar_mul(T.sum(T.square(violation), dim=-1), weight)


def gravity_energy(positions: torch.Tensor, gravity_k: torch.Tensor, up_axis: int = 2) -> torch.Tensor:
    """sum_i k_i * height_i."""
    heights = positions[..., up_axis]
    return T.sum(T.mul(heights, gravity_k.to(positions.dtype)), dim=-1)


def pin_energy(deformation: torch.Tensor, pinned: torch.Tensor, weight: float) -> torch.Tensor:
    """weight * sum_i b_i |dt_i|^2; regularises the PSD offsets, not the posed positions."""
    per_vertex = T.sum(T.square(deformation), dim=-1)
    return T.scalar_mul(T.sum(T.mul(per_vertex, pinned.to(deformation.dtype)), dim=-1), weight)


# ---------------------------------------------------------------------------
# correspondences and the full loss
# ---------------------------------------------------------------------------


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 3 else x.unsqueeze(0)


def compute_correspondences(ctx: EnergyContext, garment_positions: np.ndarray, body_positions: np.ndarray) -> Correspondences:
    """Nearest target of every garment vertex, per layer, against the body plus lower layers."""
    garment_positions = np.asarray(garment_positions).reshape(-1, ctx.garment.num_vertices, 3)
    body_positions = np.asarray(body_positions).reshape(-1, ctx.body_mesh.num_vertices, 3)
    num_body = body_positions.shape[1]
    layers = []
    for layer, members in enumerate(ctx.layer_vertices):
        lower = np.concatenate([ctx.layer_vertices[k] for k in range(layer)]) if layer else np.zeros(0, dtype=np.int64)
        stacked_ids = np.concatenate([np.arange(num_body), num_body + lower])
        rows = []
        for sample in range(len(garment_positions)):
            targets = np.concatenate([body_positions[sample], garment_positions[sample][lower]])
            index = NNIndex.build(targets, ctx.cell_size)
            rows.append(stacked_ids[index.query(garment_positions[sample][members])])
        layers.append(np.stack(rows))
    return Correspondences(layers)


def layered_collision_energy(
    ctx: EnergyContext,
    garment_positions: torch.Tensor,
    body_positions: torch.Tensor,
    body_normals: torch.Tensor,
    correspondences: Correspondences,
) -> torch.Tensor:
    """Collision energy of all layers, per sample."""
    w = ctx.weights
    garment_normals = vertex_normals(ctx.mesh, garment_positions.detach())
    stacked = T.concat([body_positions.to(garment_positions.dtype), garment_positions], dim=-2)
    stacked_normals = torch.cat([body_normals.to(garment_positions.dtype), garment_normals], dim=-2)
    total = None
    for members, index in zip(ctx.layer_vertices, correspondences.layers):
        sources = T.gather_rows(garment_positions, members)
        term = collision_energy(sources, stacked, stacked_normals, index, w.epsilon, w.collision)
        total = term if total is None else T.add(total, term)
    return total


def body_normals_of(ctx: EnergyContext, body_positions: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return vertex_normals(ctx.body_mesh, body_positions)


def total_energy(
    ctx: EnergyContext,
    garment_positions: torch.Tensor,
    deformation: torch.Tensor,
    body_positions: torch.Tensor,
    body_normals: Optional[torch.Tensor] = None,
    rest_edges: Optional[torch.Tensor] = None,
    correspondences: Optional[Correspondences] = None,
    with_metrics: bool = False,
) -> EnergyReport:
    """
    Full loss for a batch of posed garments.

    Args:
        ctx: garment constants
        garment_positions: (B, N, 3) or (N, 3) world-space garment vertices
        deformation: PSD offsets dT of the same shape, for the pin term
        body_positions: body vertices of the same batch layout (constants)
        body_normals: body vertex normals; computed when omitted
        rest_edges: per-sample rest edge lengths overriding the template's
        correspondences: frozen collision matches to reuse instead of recomputing
        with_metrics: also compute the evaluation metrics

    Returns:
        EnergyReport whose ``total`` is the batch mean of the per-sample sums
    """
    w = ctx.weights
    positions = _batched(garment_positions)
    deformation = _batched(deformation)
    body_positions = _batched(body_positions.detach())
    body_normals = body_normals_of(ctx, body_positions) if body_normals is None else _batched(body_normals.detach())
    if correspondences is None:
        correspondences = compute_correspondences(ctx, positions.detach().numpy(), body_positions.numpy())
    rest = ctx.rest_edges if rest_edges is None else rest_edges

    lengths = edge_lengths(ctx.mesh, positions)
    terms = {
        "edge": edge_energy(lengths, rest, ctx.edge_fabric, w.edge),
        "bend": bend_energy(face_normals(ctx.mesh, positions), ctx.mesh, ctx.face_fabric, w.bend),
        "collision": layered_collision_energy(ctx, positions, body_positions, body_normals, correspondences),
        "gravity": (
            gravity_energy(positions, ctx.gravity_k, w.up_axis)
            if w.use_gravity
            else torch.zeros(positions.shape[0], dtype=positions.dtype)
        ),
        "pin": pin_energy(deformation, ctx.pinned, w.pin),
    }
    per_sample = terms["edge"]
    for name in TERMS[1:]:
        per_sample = T.add(per_sample, terms[name])
    report = EnergyReport(T.mean(per_sample), per_sample, terms, correspondences)
    with torch.no_grad():
        report.metrics["edge_mm"] = float((lengths - rest.to(lengths.dtype)).abs().mean() * 1000.0)
        if with_metrics:
            report.metrics.update(
                collision_metrics(ctx, positions.detach(), body_positions, body_normals, correspondences)
            )
            report.metrics.update(deformation_metrics(ctx, positions.detach(), deformation.detach()))
    return report


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def collision_metrics(
    ctx: EnergyContext,
    garment_positions: torch.Tensor,
    body_positions: torch.Tensor,
    body_normals: torch.Tensor,
    correspondences: Correspondences,
) -> Dict[str, Any]:
    """
    Strict d . n < 0 ratios: all garment vertices against the body, and each
    layer against its own target set (body plus lower layers).
    """
    garment_positions = _batched(garment_positions).numpy()
    body_positions = _batched(body_positions).numpy()
    body_normals_np = _batched(body_normals).numpy()
    garment_normals = vertex_normals(ctx.mesh, torch.from_numpy(garment_positions)).numpy()
    colliding = 0
    for sample in range(len(garment_positions)):
        nearest = NNIndex.build(body_positions[sample], ctx.cell_size).query(garment_positions[sample])
        d = garment_positions[sample] - body_positions[sample][nearest]
        colliding += int((np.einsum("ij,ij->i", d, body_normals_np[sample][nearest]) < 0).sum())
    total = garment_positions.shape[0] * garment_positions.shape[1]

    per_layer = []
    for members, matches in zip(ctx.layer_vertices, correspondences.layers):
        hits = 0
        for sample in range(len(garment_positions)):
            stacked = np.concatenate([body_positions[sample], garment_positions[sample]])
            normals = np.concatenate([body_normals_np[sample], garment_normals[sample]])
            d = garment_positions[sample][members] - stacked[matches[sample]]
            hits += int((np.einsum("ij,ij->i", d, normals[matches[sample]]) < 0).sum())
        per_layer.append(hits / max(len(members) * len(garment_positions), 1))
    return {"collision_ratio": colliding / max(total, 1), "per_layer_collision": per_layer}


def deformation_metrics(ctx: EnergyContext, garment_positions: torch.Tensor, deformation: torch.Tensor) -> Dict[str, float]:
    """Mean height of the garment and mean |dt| of pinned and free vertices."""
    magnitude = torch.linalg.vector_norm(deformation, dim=-1)
    pinned = torch.as_tensor(ctx.garment.pinned)
    metrics = {"mean_height": float(garment_positions[..., ctx.weights.up_axis].mean())}
    metrics["pinned_displacement"] = float(magnitude[..., pinned].mean()) if bool(pinned.any()) else 0.0
    metrics["free_displacement"] = float(magnitude[..., ~pinned].mean()) if bool((~pinned).any()) else 0.0
    return metrics


def aggregate_reports(reports: Sequence[EnergyReport]) -> Dict[str, Any]:
    """Sample-weighted mean of report values; lists (per-layer ratios) are averaged element-wise."""
    if not reports:
        return {}
    weights = np.array([r.batch_size for r in reports], dtype=np.float64)
    weights /= weights.sum()
    rows = [r.to_dict() for r in reports]
    result: Dict[str, Any] = {}
    for key in rows[0]:
        values = [row[key] for row in rows]
        if isinstance(values[0], list):
            result[key] = (np.asarray(values, dtype=np.float64) * weights[:, None]).sum(axis=0).tolist()
        else:
            result[key] = float(np.dot(np.asarray(values, dtype=np.float64), weights))
    return result


def weights_from_mapping(values: Dict[str, Any]) -> EnergyWeights:
    known = {f.name for f in fields(EnergyWeights)}
    return EnergyWeights(**{k: v for k, v in values.items() if k in known})
