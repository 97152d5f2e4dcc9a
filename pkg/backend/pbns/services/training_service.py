"""
Unsupervised training of the garment network.

The loop minimises the physics energy over batches of poses with Adam. A batch
is split into contiguous chunks evaluated on worker threads; each worker builds
its own tape over the shared, read-only parameters and returns gradients,
which are summed in chunk order so results do not depend on scheduling.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from pbns.ml import tensor as T
from pbns.ml.body import BodyModel, pose_body
from pbns.ml.energy import EnergyContext, EnergyReport, EnergyWeights, aggregate_reports, total_energy
from pbns.ml.garment import GarmentTemplate
from pbns.ml.model import PbnsModel, save_checkpoint
from pbns.ml.poses import PoseDatabase
from pbns.ml.rig import Pose, pose_tensor, transfer_weights, translation_tensor
from pbns.utils.config import ModelConfig, TrainConfig
from pbns.utils.exceptions import NumericAbortError
from pbns.utils.io_utils import PathLike, arrays_sha256, atomic_write

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DIVERGENCE_FLOOR = 1e-6


class AdamState:
    """
    Adam over two parameter groups: network parameters, and trainable blend-weight
    logits at a reduced learning rate. The rate ramps up linearly over the
    first ``warmup_steps`` steps.
    """

    def __init__(
        self,
        network_params: Sequence[torch.nn.Parameter],
        weight_params: Sequence[torch.nn.Parameter] = (),
        lr: float = 1e-3,
        weight_lr_scale: float = 0.1,
        warmup_steps: int = 0,
    ):
        groups = [{"params": list(network_params), "lr": lr, "base_lr": lr}]
        if weight_params:
            groups.append({"params": list(weight_params), "lr": lr * weight_lr_scale, "base_lr": lr * weight_lr_scale})
        self.optimizer = torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=False)
        self.warmup_steps = warmup_steps
        self.step_count = 0

    @property
    def params(self) -> List[torch.nn.Parameter]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]

    def warmup_factor(self) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, (self.step_count + 1) / self.warmup_steps)

    def step(self, grads: Sequence[torch.Tensor], lr: Optional[float] = None) -> None:
        params = self.params
        if len(grads) != len(params):
            raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
        factor = self.warmup_factor()
        for group in self.optimizer.param_groups:
            base = group["base_lr"] if lr is None else lr * group["base_lr"] / self.optimizer.param_groups[0]["base_lr"]
            group["lr"] = base * factor
        for p, g in zip(params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {list(g.shape)} does not match parameter {list(p.shape)}")
            p.grad = g.detach().clone().to(p.dtype)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step_count += 1

    def moments(self) -> Dict[str, torch.Tensor]:
        """First/second moments keyed ``<param index>.exp_avg`` / ``.exp_avg_sq``."""
        result = {}
        for i, p in enumerate(self.params):
            state = self.optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    result[f"{i}.{key}"] = state[key]
        return result

    def load_moments(self, moments: Dict[str, torch.Tensor], step_count: int) -> None:
        for i, p in enumerate(self.params):
            if f"{i}.exp_avg" in moments:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(step_count)),
                    "exp_avg": moments[f"{i}.exp_avg"].to(p.dtype).clone(),
                    "exp_avg_sq": moments[f"{i}.exp_avg_sq"].to(p.dtype).clone(),
                }
        self.step_count = step_count


def adam_step(
    params: Sequence[torch.nn.Parameter],
    grads: Sequence[torch.Tensor],
    state: Optional[AdamState] = None,
    lr: float = 1e-3,
) -> AdamState:
    """One bias-corrected Adam update of ``params`` in place; returns the (new) state."""
    if state is None:
        state = AdamState(params, lr=lr)
    state.step(grads, lr=lr)
    return state


class MetricsLog:
    """JSON-lines metrics file, rewritten atomically after every record."""

    def __init__(self, path: Optional[PathLike] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []

    def append(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is not None:
            with atomic_write(self.path, "w") as handle:
                for row in self.records:
                    handle.write(json.dumps(row) + "\n")

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    steps: int = 0


def parameter_hash(model: torch.nn.Module) -> str:
    return arrays_sha256(*(v.detach().numpy() for v in model.state_dict().values()))


class EnergyTrainer:
    """
    Epoch/batch loop shared by pose training and resize training.

    Args:
        model: module whose parameters are optimised
        config: training hyper-parameters
        output_dir: where checkpoints and the metrics log go (None keeps everything in memory)
        mode: checkpoint mode tag
        garment_hash: stored in checkpoints
        body_hash: stored in checkpoints
        workers: batch worker threads
        progress: show a tqdm bar over epochs
    """

    def __init__(
        self,
        model: torch.nn.Module,
        config: TrainConfig,
        output_dir: Optional[PathLike] = None,
        mode: str = "pose",
        garment_hash: str = "",
        body_hash: str = "",
        workers: int = 1,
        progress: bool = False,
    ):
        self.model = model
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.mode = mode
        self.garment_hash = garment_hash
        self.body_hash = body_hash
        self.workers = max(1, int(workers))
        self.progress = progress
        weight_params = model.weight_parameters() if hasattr(model, "weight_parameters") else []
        network_params = model.network_parameters() if hasattr(model, "network_parameters") else list(model.parameters())
        self.adam = AdamState(network_params, weight_params, config.learning_rate, config.weight_lr_scale, config.warmup_steps)
        self.log = MetricsLog(self.output_dir / "metrics.jsonl" if self.output_dir else None)
        self.checkpoints: List[Path] = []
        self.initial_loss: Optional[float] = None

    @property
    def last_good(self) -> Optional[Path]:
        return self.checkpoints[-1] if self.checkpoints else None

    def _abort(self, reason: str, step: int) -> NumericAbortError:
        last = str(self.last_good) if self.last_good else None
        message = f"{reason} at step {step}; last good checkpoint: {last or 'none'}"
        return NumericAbortError(message, details={"step": step, "last_good": last})

    def batch_gradients(
        self, items: Sequence[Any], sample_loss: Callable[[Sequence[Any]], EnergyReport]
    ) -> Tuple[float, List[torch.Tensor], List[EnergyReport]]:
        """Batch-mean loss and gradients, accumulated over worker chunks in fixed order."""
        params = self.adam.params
        chunks = [c for c in np.array_split(np.arange(len(items)), min(self.workers, len(items))) if len(c)]

        def run(chunk: np.ndarray) -> Tuple[float, List[torch.Tensor], EnergyReport]:
            with T.Tape():
                report = sample_loss([items[i] for i in chunk])
                loss = T.scalar_mul(T.sum(report.per_sample), 1.0 / len(items))
                grads = T.backward(loss, list(params))
            return float(loss.detach()), [grads.get(i, torch.zeros_like(p)) for i, p in enumerate(params)], report

        if len(chunks) == 1:
            results = [run(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                results = list(pool.map(run, chunks))
        loss = 0.0
        grads = [torch.zeros_like(p) for p in params]
        for chunk_loss, chunk_grads, _ in results:
            loss += chunk_loss
            grads = [g + c for g, c in zip(grads, chunk_grads)]
        return loss, grads, [r for _, _, r in results]

    def save(self, name: str, epoch: int) -> Optional[Path]:
        if self.output_dir is None:
            return None
        path = save_checkpoint(
            self.model,
            self.output_dir / name,
            self.garment_hash,
            self.body_hash,
            mode=self.mode,
            optimizer_state=self.adam.moments(),
            trainer={"step": self.adam.step_count, "epoch": epoch},
        )
        return path

    def fit(
        self,
        epoch_items: Callable[[int, np.random.Generator], Sequence[Any]],
        sample_loss: Callable[[Sequence[Any]], EnergyReport],
        validate_fn: Optional[Callable[[], Dict[str, Any]]] = None,
    ) -> TrainResult:
        """
        Run ``config.epochs`` epochs.

        Args:
            epoch_items: returns the (shuffled) training items of an epoch
            sample_loss: energy report of a list of items, one per-sample entry each
            validate_fn: validation metrics of the current parameters

        Raises:
            NumericAbortError: on a non-finite loss or divergence, naming the last good checkpoint
        """
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        epochs = range(1, cfg.epochs + 1)
        for epoch in tqdm(epochs, desc="epochs", disable=not self.progress):
            started = time.perf_counter()
            items = epoch_items(epoch, rng)
            reports: List[EnergyReport] = []
            for start in range(0, len(items), cfg.batch_size):
                batch = items[start : start + cfg.batch_size]
                step = self.adam.step_count
                try:
                    loss, grads, batch_reports = self.batch_gradients(batch, sample_loss)
                except NumericAbortError as e:
                    raise self._abort(f"non-finite values ({e.message})", step) from None
                if not np.isfinite(loss) or not all(bool(torch.isfinite(g).all()) for g in grads):
                    raise self._abort("non-finite loss", step)
                if self.initial_loss is None:
                    self.initial_loss = loss
                if loss > cfg.divergence_factor * max(abs(self.initial_loss), DIVERGENCE_FLOOR):
                    raise self._abort(f"loss diverged ({loss:.6g} vs initial {self.initial_loss:.6g})", step)
                self.adam.step(grads)
                reports.extend(batch_reports)
            record: Dict[str, Any] = {"epoch": epoch, "step": self.adam.step_count}
            record.update(aggregate_reports(reports))
            if validate_fn is not None and epoch % cfg.validate_every == 0:
                record.update({f"val_{k}": v for k, v in validate_fn().items()})
            record["wall_time"] = time.perf_counter() - started
            self.log.append(record)
            logger.info(
                "Epoch %d: loss=%.6g edge_mm=%.4f%s",
                epoch,
                record.get("loss", float("nan")),
                record.get("edge_mm", float("nan")),
                f" val_collision_ratio={record['val_collision_ratio']:.4%}" if "val_collision_ratio" in record else "",
            )
            if epoch % cfg.checkpoint_every == 0:
                path = self.save(f"checkpoints/epoch_{epoch:04d}.ckpt", epoch)
                if path is not None:
                    self.checkpoints.append(path)
        final = self.save("model.ckpt", cfg.epochs)
        return TrainResult(self.model, list(self.log.records), list(self.checkpoints), final, self.adam.step_count)


# ---------------------------------------------------------------------------
# pose training
# ---------------------------------------------------------------------------


def build_model(garment: GarmentTemplate, body: BodyModel, config: Optional[ModelConfig] = None, seed: int = 0) -> PbnsModel:
    """Network for ``garment`` with blend weights transferred from the nearest body vertices."""
    config = config or ModelConfig()
    weights = transfer_weights(garment.mesh, body.mesh, body.weights)
    return PbnsModel(
        garment.num_vertices,
        body.num_joints,
        weights,
        body.skeleton,
        embedding_mode=config.embedding_mode,
        width=config.width,
        depth=config.depth,
        final_relu=config.final_relu,
        trainable_weights=config.trainable_weights or garment.trainable_weights,
        seed=seed,
    )


def pose_batch_report(
    model: PbnsModel,
    ctx: EnergyContext,
    body: BodyModel,
    poses: Sequence[Pose],
    with_metrics: bool = False,
) -> EnergyReport:
    theta = pose_tensor(poses)
    translation = translation_tensor(poses)
    posed, deformation = model(theta, ctx.garment.rest_tensor, body.skeleton, translation)
    body_positions = pose_body(body, theta, translation)
    return total_energy(ctx, posed, deformation, body_positions, with_metrics=with_metrics)


def validate(
    model: PbnsModel,
    garment: GarmentTemplate,
    body: BodyModel,
    poses: Sequence[Pose],
    weights: Optional[EnergyWeights] = None,
    batch_size: int = 16,
    ctx: Optional[EnergyContext] = None,
) -> Dict[str, Any]:
    """Mean loss terms and metrics over ``poses``; parameters are not touched."""
    if not poses:
        return {}
    ctx = ctx or EnergyContext(garment, body.mesh, weights)
    reports = []
    with torch.no_grad():
        for start in range(0, len(poses), batch_size):
            reports.append(pose_batch_report(model, ctx, body, poses[start : start + batch_size], with_metrics=True))
    return aggregate_reports(reports)


def train(
    model: PbnsModel,
    garment: GarmentTemplate,
    body: BodyModel,
    db: PoseDatabase,
    config: Optional[TrainConfig] = None,
    weights: Optional[EnergyWeights] = None,
    output_dir: Optional[PathLike] = None,
    workers: int = 1,
    progress: bool = False,
) -> TrainResult:
    """
    Train ``model`` on the training split of ``db``; validation metrics are
    computed on the validation split every ``config.validate_every`` epochs.
    """
    config = config or TrainConfig()
    ctx = EnergyContext(garment, body.mesh, weights)
    train_poses = db.train
    validation_poses = db.validation
    logger.info(
        "Training on %d poses (%d validation), %d epochs, batch %d, %d workers",
        len(train_poses),
        len(validation_poses),
        config.epochs,
        config.batch_size,
        workers,
    )
    trainer = EnergyTrainer(
        model, config, output_dir, "pose", garment.content_hash(), body.content_hash(), workers=workers, progress=progress
    )

    def epoch_items(epoch: int, rng: np.random.Generator) -> Sequence[Pose]:
        return [train_poses[i] for i in rng.permutation(len(train_poses))]

    def sample_loss(poses: Sequence[Pose]) -> EnergyReport:
        return pose_batch_report(model, ctx, body, poses)

    def validate_fn() -> Dict[str, Any]:
        return validate(model, garment, body, validation_poses, batch_size=config.batch_size, ctx=ctx)

    return trainer.fit(epoch_items, sample_loss, validate_fn if validation_poses else None)
