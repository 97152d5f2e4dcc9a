"""
Outfit resizing: a network mapping body shape beta and tightness gamma to an
unskinned, resized garment in rest space.

The garment inherits the body's first two shape blend shapes by proximity; they
are smoothed and combined as ``beta[:2] + gamma`` to estimate the rest edge
lengths the resized garment should keep. Collisions are taken against the
beta-shaped body at rest.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch

from pbns.ml import tensor as T
from pbns.ml.body import BodyModel, apply_shape
from pbns.ml.energy import EnergyContext, EnergyReport, EnergyWeights, aggregate_reports, total_energy
from pbns.ml.garment import GarmentTemplate
from pbns.ml.mesh import NNIndex, TriMesh, edge_lengths, mean_edge_length
from pbns.ml.model import build_mlp, register_checkpoint_model, run_mlp
from pbns.services.training_service import EnergyTrainer, TrainResult
from pbns.utils.config import ModelConfig, ResizeConfig, TrainConfig
from pbns.utils.exceptions import ConfigError, DataError
from pbns.utils.io_utils import PathLike

logger = logging.getLogger(__name__)

NUM_GARMENT_SHAPES = 2
TIGHTNESS_SIZE = 2


@register_checkpoint_model("resize")
class ResizeModel(torch.nn.Module):
    """
    X = f([beta || gamma]), resized garment T + sum_i X_i D_i. No skinning.

    The transferred garment blend shapes are kept as a buffer so a checkpoint
    carries everything needed to estimate rest edge lengths.
    """

    def __init__(
        self,
        num_vertices: int,
        num_shapes: int,
        width: int = 32,
        depth: int = 4,
        final_relu: bool = True,
        seed: int = 0,
        blendshapes: Optional[np.ndarray] = None,
    ):
        super().__init__()
        if width < 1 or depth < 1:
            raise ConfigError("model.width and model.depth must be positive")
        self.num_vertices = int(num_vertices)
        self.num_shapes = int(num_shapes)
        self.width = int(width)
        self.depth = int(depth)
        self.final_relu = bool(final_relu)
        self.seed = int(seed)
        self.input_size = self.num_shapes + TIGHTNESS_SIZE
        self.layers = build_mlp([self.input_size] + [self.width] * self.depth, self.seed)
        self.psd = torch.nn.Parameter(torch.zeros(self.width, self.num_vertices, 3, dtype=T.DTYPE))
        if blendshapes is None:
            blendshapes = np.zeros((NUM_GARMENT_SHAPES, self.num_vertices, 3))
        blendshapes = np.asarray(blendshapes, dtype=np.float64)
        if blendshapes.shape != (NUM_GARMENT_SHAPES, self.num_vertices, 3):
            raise DataError(f"garment blend shapes must be {NUM_GARMENT_SHAPES} x {self.num_vertices} x 3, got {blendshapes.shape}")
        self.register_buffer("blendshapes", T.as_tensor(blendshapes))

    @property
    def embedding_size(self) -> int:
        return self.width

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "num_vertices": self.num_vertices,
            "num_shapes": self.num_shapes,
            "width": self.width,
            "depth": self.depth,
            "final_relu": self.final_relu,
            "seed": self.seed,
        }

    @classmethod
    def from_hyperparameters(cls, hyperparameters: Dict[str, Any]) -> "ResizeModel":
        return cls(**hyperparameters)

    def network_parameters(self) -> List[torch.nn.Parameter]:
        return list(self.parameters())

    def weight_parameters(self) -> List[torch.nn.Parameter]:
        return []

    def inputs(self, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        if beta.shape[-1] != self.num_shapes or gamma.shape[-1] != TIGHTNESS_SIZE:
            raise ConfigError(
                f"resize input needs {self.num_shapes} shape and {TIGHTNESS_SIZE} tightness values, "
                f"got {beta.shape[-1]} and {gamma.shape[-1]}"
            )
        return T.concat([beta, gamma.to(beta.dtype)], dim=-1)

    def forward(self, beta: torch.Tensor, gamma: torch.Tensor, template: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Resized garment and its deformation, for one (beta, gamma) or a batch."""
        x = run_mlp(self.layers, self.inputs(beta, gamma), self.final_relu)
        flat = self.psd.to(x.dtype).reshape(self.width, self.num_vertices * 3)
        deformation = T.matmul(x, flat).reshape(x.shape[:-1] + (self.num_vertices, 3))
        return T.add(template.to(x.dtype), deformation), deformation

    def parameter_summary(self) -> Dict[str, Any]:
        tensors = [{"name": name, "shape": list(p.shape), "count": p.numel()} for name, p in self.named_parameters()]
        mlp = sum(t["count"] for t in tensors if t["name"].startswith("layers."))
        return {
            "mode": "resize",
            "input_size": self.input_size,
            "embedding_size": self.embedding_size,
            "num_vertices": self.num_vertices,
            "num_shapes": self.num_shapes,
            "parameters": tensors,
            "mlp_parameters": mlp,
            "psd_parameters": self.psd.numel(),
            "total_parameters": mlp + self.psd.numel(),
        }


@dataclass
class TightnessRange:
    """Uniform sampling bounds for body shape and garment tightness."""

    beta_low: np.ndarray
    beta_high: np.ndarray
    gamma_low: np.ndarray
    gamma_high: np.ndarray

    def __post_init__(self) -> None:
        self.beta_low = np.asarray(self.beta_low, dtype=np.float64).ravel()
        self.beta_high = np.asarray(self.beta_high, dtype=np.float64).ravel()
        self.gamma_low = np.asarray(self.gamma_low, dtype=np.float64).ravel()
        self.gamma_high = np.asarray(self.gamma_high, dtype=np.float64).ravel()
        bounds = (self.beta_low, self.beta_high, self.gamma_low, self.gamma_high)
        if not all(np.all(np.isfinite(b)) for b in bounds):
            raise ConfigError("resize bounds must be finite")
        if len(self.beta_low) != len(self.beta_high) or len(self.gamma_low) != TIGHTNESS_SIZE or len(self.gamma_high) != TIGHTNESS_SIZE:
            raise ConfigError(f"resize bounds need matching beta lengths and {TIGHTNESS_SIZE} gamma values")
        if np.any(self.beta_low > self.beta_high) or np.any(self.gamma_low > self.gamma_high):
            raise ConfigError("resize lower bounds must not exceed upper bounds")

    @classmethod
    def from_config(cls, config: ResizeConfig) -> "TightnessRange":
        return cls(config.beta_low, config.beta_high, config.gamma_low, config.gamma_high)

    @property
    def num_shapes(self) -> int:
        return len(self.beta_low)

    def sample(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
        beta = rng.uniform(self.beta_low, self.beta_high, size=(n, self.num_shapes))
        gamma = rng.uniform(self.gamma_low, self.gamma_high, size=(n, TIGHTNESS_SIZE))
        return beta, gamma

    def grid(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Three body shapes (low, middle, high) by two tightness values (low, high)."""
        betas = [self.beta_low, 0.5 * (self.beta_low + self.beta_high), self.beta_high]
        gammas = [self.gamma_low, self.gamma_high]
        return [(beta, gamma) for gamma in gammas for beta in betas]


# ---------------------------------------------------------------------------
# garment blend shapes
# ---------------------------------------------------------------------------


def smooth_field(mesh: TriMesh, field: np.ndarray, iterations: int = 100, step: float = 0.5) -> np.ndarray:
    """
    Uniform Laplacian smoothing: f <- f + step * (mean of neighbours - f), repeated.

    Vertices without neighbours are left unchanged.
    """
    field = np.array(field, dtype=np.float64, copy=True)
    adjacency = mesh.vertex_adjacency
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    average = sp.diags(inv) @ adjacency
    connected = (degree > 0).reshape((-1,) + (1,) * (field.ndim - 1))
    for _ in range(iterations):
        field = field + step * np.where(connected, average @ field - field, 0.0)
    return field


def transfer_blendshapes(
    garment: GarmentTemplate,
    body: BodyModel,
    iterations: int = 100,
    step: float = 0.5,
    keep: int = NUM_GARMENT_SHAPES,
) -> np.ndarray:
    """Nearest-body-vertex copy of the first ``keep`` body blend shapes, smoothed per shape."""
    if body.num_shapes < keep:
        raise DataError(f"body '{body.name}' has {body.num_shapes} shape blend shapes, resizing needs {keep}")
    cell = 2.0 * max(mean_edge_length(body.mesh), 1e-6)
    nearest = NNIndex.build(body.mesh.vertices, cell).query(garment.mesh.vertices)
    transferred = body.shape_blendshapes[:keep, nearest]
    smoothed = np.stack([smooth_field(garment.mesh, shape, iterations, step) for shape in transferred])
    logger.info("Transferred %d blend shapes to '%s' (%d smoothing iterations)", keep, garment.name, iterations)
    return smoothed


def combination(beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """beta truncated or zero padded to two components, plus gamma; works on batches."""
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    head = np.zeros(beta.shape[:-1] + (NUM_GARMENT_SHAPES,))
    take = min(NUM_GARMENT_SHAPES, beta.shape[-1])
    head[..., :take] = beta[..., :take]
    return head + gamma


def rest_edge_estimate(mesh: TriMesh, blendshapes: np.ndarray, beta: np.ndarray, gamma: np.ndarray) -> torch.Tensor:
    """Edge lengths of T + sum_s (beta_s + gamma_s) B_s; (N_E,) or (B, N_E) for batched inputs."""
    coefficients = combination(beta, gamma)
    blendshapes = np.asarray(blendshapes, dtype=np.float64)
    deformed = mesh.vertices + np.tensordot(coefficients, blendshapes, axes=([-1], [0]))
    with torch.no_grad():
        return edge_lengths(mesh, T.as_tensor(deformed))


def resize_forward(model: ResizeModel, garment: GarmentTemplate, beta: Any, gamma: Any) -> torch.Tensor:
    """Resized garment for shape ``beta`` and tightness ``gamma`` (single or batched)."""
    positions, _ = model(T.as_tensor(beta), T.as_tensor(gamma), garment.rest_tensor)
    return positions


def shaped_bodies(body: BodyModel, betas: np.ndarray) -> torch.Tensor:
    return T.as_tensor(np.stack([apply_shape(body, beta) for beta in np.atleast_2d(betas)]))


def build_resizer(
    garment: GarmentTemplate,
    body: BodyModel,
    config: Optional[ModelConfig] = None,
    resize: Optional[ResizeConfig] = None,
    seed: int = 0,
) -> ResizeModel:
    config = config or ModelConfig()
    resize = resize or ResizeConfig()
    blendshapes = transfer_blendshapes(garment, body, resize.smoothing_iterations, resize.smoothing_step)
    return ResizeModel(
        garment.num_vertices,
        body.num_shapes,
        width=config.width,
        depth=config.depth,
        final_relu=config.final_relu,
        seed=seed,
        blendshapes=blendshapes,
    )


def resize_batch_report(
    model: ResizeModel,
    ctx: EnergyContext,
    body: BodyModel,
    betas: np.ndarray,
    gammas: np.ndarray,
    with_metrics: bool = False,
) -> EnergyReport:
    positions, deformation = model(T.as_tensor(betas), T.as_tensor(gammas), ctx.garment.rest_tensor)
    rest = rest_edge_estimate(ctx.mesh, model.blendshapes.numpy(), betas, gammas)
    return total_energy(ctx, positions, deformation, shaped_bodies(body, betas), rest_edges=rest, with_metrics=with_metrics)


def _check_body(model: ResizeModel, body: BodyModel, ranges: TightnessRange) -> None:
    if ranges.num_shapes != body.num_shapes or model.num_shapes != body.num_shapes:
        raise ConfigError(
            f"resize.beta bounds have {ranges.num_shapes} components and the model {model.num_shapes}; "
            f"body '{body.name}' has {body.num_shapes} blend shapes"
        )


def validate_resizer(
    model: ResizeModel,
    garment: GarmentTemplate,
    body: BodyModel,
    points: Sequence[Tuple[np.ndarray, np.ndarray]],
    weights: Optional[EnergyWeights] = None,
    ctx: Optional[EnergyContext] = None,
) -> Dict[str, Any]:
    """Metrics at every (beta, gamma) point and their mean; parameters are not touched."""
    ctx = ctx or EnergyContext(garment, body.mesh, weights)
    grid = []
    reports = []
    with torch.no_grad():
        for beta, gamma in points:
            report = resize_batch_report(model, ctx, body, np.atleast_2d(beta), np.atleast_2d(gamma), with_metrics=True)
            reports.append(report)
            grid.append({"beta": np.asarray(beta).tolist(), "gamma": np.asarray(gamma).tolist(), **report.to_dict()})
    summary = aggregate_reports(reports)
    summary["max_collision_ratio"] = max((row["collision_ratio"] for row in grid), default=0.0)
    summary["grid"] = grid
    return summary


def train_resizer(
    model: ResizeModel,
    garment: GarmentTemplate,
    body: BodyModel,
    ranges: TightnessRange,
    config: Optional[TrainConfig] = None,
    weights: Optional[EnergyWeights] = None,
    samples_per_epoch: int = 512,
    output_dir: Optional[PathLike] = None,
    workers: int = 1,
    progress: bool = False,
) -> TrainResult:
    """
    Train the resizer on uniformly sampled (beta, gamma) pairs, fresh every epoch.

    Validation runs on the 3 x 2 grid of ``ranges``.
    """
    config = config or TrainConfig()
    _check_body(model, body, ranges)
    ctx = EnergyContext(garment, body.mesh, weights)
    trainer = EnergyTrainer(
        model, config, output_dir, "resize", garment.content_hash(), body.content_hash(), workers=workers, progress=progress
    )
    logger.info("Training resizer on %d samples per epoch, %d epochs", samples_per_epoch, config.epochs)

    def epoch_items(epoch: int, rng: np.random.Generator) -> List[Tuple[np.ndarray, np.ndarray]]:
        betas, gammas = ranges.sample(rng, samples_per_epoch)
        return list(zip(betas, gammas))

    def sample_loss(items: Sequence[Tuple[np.ndarray, np.ndarray]]) -> EnergyReport:
        betas = np.stack([beta for beta, _ in items])
        gammas = np.stack([gamma for _, gamma in items])
        return resize_batch_report(model, ctx, body, betas, gammas)

    def validate_fn() -> Dict[str, Any]:
        summary = validate_resizer(model, garment, body, ranges.grid(), ctx=ctx)
        summary.pop("grid")
        return summary

    return trainer.fit(epoch_items, sample_loss, validate_fn)
