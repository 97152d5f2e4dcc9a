"""
The garment network: pose embedding MLP, PSD matrix D, posed-outfit forward pass
and checkpoint files.

Checkpoint layout (little endian)::

    8 bytes   magic b"PBNSCKPT"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header: version, mode, garment_hash, body_hash,
              hyperparameters, tensors [{name, shape, offset}], trainer,
              payload_sha256
    payload   float64 blocks in tensor-table order
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Type

import numpy as np
import torch

from pbns.ml import tensor as T
from pbns.ml.rig import Skeleton, SkinningWeights, skin
from pbns.utils.exceptions import CheckpointError, CheckpointHashError, CheckpointVersionError, ConfigError
from pbns.utils.io_utils import PathLike, atomic_write

logger = logging.getLogger(__name__)

EMBEDDING_MODES = ("mlp", "identity_theta", "identity_rotmat")

CHECKPOINT_MAGIC = b"PBNSCKPT"
CHECKPOINT_VERSION = 1
REQUIRED_HEADER_FIELDS = ("mode", "garment_hash", "body_hash", "hyperparameters", "tensors", "payload_sha256")


def build_mlp(sizes: List[int], seed: int) -> torch.nn.ModuleList:
    """Linear layers with fan-in scaled uniform weights from a seeded generator and zero biases."""
    layers = torch.nn.ModuleList()
    generator = torch.Generator().manual_seed(seed)
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layer = torch.nn.Linear(fan_in, fan_out, dtype=T.DTYPE)
        bound = 1.0 / np.sqrt(fan_in)
        with torch.no_grad():
            layer.weight.copy_((torch.rand(fan_out, fan_in, generator=generator, dtype=T.DTYPE) * 2 - 1) * bound)
            layer.bias.zero_()
        layers.append(layer)
    return layers


def run_mlp(layers: torch.nn.ModuleList, x: torch.Tensor, final_relu: bool = True) -> torch.Tensor:
    for i, layer in enumerate(layers):
        x = T.add(T.matmul(x, T.transpose_last(layer.weight.to(x.dtype))), layer.bias.to(x.dtype))
        if i < len(layers) - 1 or final_relu:
            x = T.relu(x)
    return x


class PbnsModel(torch.nn.Module):
    """
    Pose embedding X = f(theta), PSD offsets dT = sum_i X_i D_i and garment blend weights.

    Args:
        num_vertices: garment vertex count N
        num_joints: skeleton joint count K
        blend_weights: (N, K) initial garment blend weights
        skeleton: joint tree, used for the support of trainable weights
        embedding_mode: ``mlp``, ``identity_theta`` (X = theta) or
            ``identity_rotmat`` (X = flattened joint rotation matrices)
        width: MLP width, also the embedding size in ``mlp`` mode
        depth: number of fully connected layers
        final_relu: apply ReLU after the last layer too
        trainable_weights: optimise the blend weights alongside the network
        seed: seed of the MLP initialisation
    """

    def __init__(
        self,
        num_vertices: int,
        num_joints: int,
        blend_weights: Optional[np.ndarray] = None,
        skeleton: Optional[Skeleton] = None,
        embedding_mode: str = "mlp",
        width: int = 32,
        depth: int = 4,
        final_relu: bool = True,
        trainable_weights: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if embedding_mode not in EMBEDDING_MODES:
            raise ConfigError(f"model.embedding_mode must be one of {EMBEDDING_MODES}, got '{embedding_mode}'")
        if width < 1 or depth < 1:
            raise ConfigError("model.width and model.depth must be positive")
        self.num_vertices = int(num_vertices)
        self.num_joints = int(num_joints)
        self.embedding_mode = embedding_mode
        self.width = int(width)
        self.depth = int(depth)
        self.final_relu = bool(final_relu)
        self.seed = int(seed)
        self.input_size = 3 * self.num_joints

        sizes = [self.input_size] + [self.width] * self.depth if embedding_mode == "mlp" else []
        self.layers = build_mlp(sizes, self.seed)

        self.psd = torch.nn.Parameter(torch.zeros(self.embedding_size, self.num_vertices, 3, dtype=T.DTYPE))
        if blend_weights is None:
            blend_weights = np.full((self.num_vertices, self.num_joints), 1.0 / self.num_joints)
        self.skinning = SkinningWeights(blend_weights, skeleton, trainable=trainable_weights)

    @property
    def embedding_size(self) -> int:
        if self.embedding_mode == "identity_theta":
            return self.input_size
        if self.embedding_mode == "identity_rotmat":
            return 9 * self.num_joints
        return self.width

    @property
    def trainable_weights(self) -> bool:
        return self.skinning.trainable

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "num_vertices": self.num_vertices,
            "num_joints": self.num_joints,
            "embedding_mode": self.embedding_mode,
            "width": self.width,
            "depth": self.depth,
            "final_relu": self.final_relu,
            "trainable_weights": self.trainable_weights,
            "seed": self.seed,
        }

    @classmethod
    def from_hyperparameters(cls, hyperparameters: Dict[str, Any]) -> "PbnsModel":
        return cls(**hyperparameters)

    def network_parameters(self) -> List[torch.nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("skinning.")]

    def weight_parameters(self) -> List[torch.nn.Parameter]:
        return list(self.skinning.parameters())

    def embed(self, theta: torch.Tensor) -> torch.Tensor:
        """(..., K, 3) poses to (..., |X|) embeddings."""
        if theta.shape[-2:] != (self.num_joints, 3):
            raise ConfigError(f"pose has shape {list(theta.shape)}, model expects (..., {self.num_joints}, 3)")
        flat = theta.reshape(theta.shape[:-2] + (self.input_size,))
        if self.embedding_mode == "identity_theta":
            return flat
        if self.embedding_mode == "identity_rotmat":
            rotations = T.batched_rodrigues(theta)
            return rotations.reshape(theta.shape[:-2] + (9 * self.num_joints,))
        return run_mlp(self.layers, flat, self.final_relu)

    def deform(self, x: torch.Tensor) -> torch.Tensor:
        """dT = sum_i X_i D_i, shaped (..., N, 3)."""
        if x.shape[-1] != self.embedding_size:
            raise ConfigError(f"embedding has {x.shape[-1]} entries, PSD matrix expects {self.embedding_size}")
        flat = self.psd.to(x.dtype).reshape(self.embedding_size, self.num_vertices * 3)
        return T.matmul(x, flat).reshape(x.shape[:-1] + (self.num_vertices, 3))

    def blend_weights(self) -> torch.Tensor:
        return self.skinning()

    def forward(
        self,
        theta: torch.Tensor,
        template: torch.Tensor,
        skeleton: Skeleton,
        translation: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Posed outfit W(T + dT, theta) and the deformation dT."""
        deformation = self.deform(self.embed(theta))
        positions = T.add(template.to(theta.dtype), deformation)
        posed = skin(positions, theta, self.blend_weights(), skeleton, translation)
        return posed, deformation

    def parameter_summary(self) -> Dict[str, Any]:
        tensors = [{"name": name, "shape": list(p.shape), "count": p.numel()} for name, p in self.named_parameters()]
        mlp = sum(t["count"] for t in tensors if t["name"].startswith("layers."))
        psd = self.psd.numel()
        weights = sum(t["count"] for t in tensors if t["name"].startswith("skinning."))
        return {
            "embedding_mode": self.embedding_mode,
            "input_size": self.input_size,
            "embedding_size": self.embedding_size,
            "num_vertices": self.num_vertices,
            "num_joints": self.num_joints,
            "parameters": tensors,
            "mlp_parameters": mlp,
            "psd_parameters": psd,
            "weight_parameters": weights,
            "total_parameters": mlp + psd + weights,
        }


def embed(model: PbnsModel, theta: torch.Tensor) -> torch.Tensor:
    return model.embed(theta)


def deform(model: PbnsModel, x: torch.Tensor) -> torch.Tensor:
    return model.deform(x)


def pose_outfit(model: PbnsModel, garment, body, theta: torch.Tensor, translation: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Posed outfit V = W(T + f(theta) D, theta, W) for one pose or a batch."""
    if garment.num_vertices != model.num_vertices:
        raise ConfigError(f"model was built for {model.num_vertices} garment vertices, garment has {garment.num_vertices}")
    posed, _ = model(theta, garment.rest_tensor, body.skeleton, translation)
    return posed


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MODELS: Dict[str, Type[torch.nn.Module]] = {"pose": PbnsModel}


def register_checkpoint_model(mode: str) -> Callable[[Type[torch.nn.Module]], Type[torch.nn.Module]]:
    def decorator(cls: Type[torch.nn.Module]) -> Type[torch.nn.Module]:
        _CHECKPOINT_MODELS[mode] = cls
        return cls

    return decorator


def save_checkpoint(
    model: torch.nn.Module,
    path: PathLike,
    garment_hash: str,
    body_hash: str,
    mode: str = "pose",
    optimizer_state: Optional[Dict[str, torch.Tensor]] = None,
    trainer: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write parameters (and optionally optimizer moments) to a checkpoint file atomically.

    Args:
        model: a registered checkpoint model (``pose`` or ``resize`` mode)
        path: output file
        garment_hash: content hash of the garment the model was trained for
        body_hash: content hash of the body model
        mode: checkpoint mode tag
        optimizer_state: flat name -> tensor map of optimizer moments
        trainer: JSON-serialisable trainer counters (step, epoch)
    """
    if mode not in _CHECKPOINT_MODELS:
        raise CheckpointError(f"unknown checkpoint mode '{mode}'")
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"optimizer.{k}": v for k, v in (optimizer_state or {}).items()})
    table = []
    blocks = []
    offset = 0
    for name, value in tensors.items():
        data = value.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
        table.append({"name": name, "shape": list(value.shape), "offset": offset})
        blocks.append(data)
        offset += len(data)
    payload = b"".join(blocks)
    header = {
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "garment_hash": garment_hash,
        "body_hash": body_hash,
        "hyperparameters": model.hyperparameters(),
        "tensors": table,
        "trainer": trainer or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header).encode("utf-8")
    with atomic_write(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        handle.write(payload)
    logger.info("Saved %s checkpoint to %s", mode, path)
    return Path(path)


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Header and all stored tensors of a checkpoint, after integrity checks."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 12:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: corrupt header: expected a JSON object")
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this reader supports version {CHECKPOINT_VERSION}",
            details={"found": version, "supported": CHECKPOINT_VERSION},
        )
    missing = [name for name in REQUIRED_HEADER_FIELDS if name not in header]
    if missing:
        raise CheckpointError(f"{path}: header is missing field '{missing[0]}'", details={"missing": missing})
    payload = data[12 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt or truncated file)")
    tensors = {}
    for entry in header["tensors"]:
        try:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            values = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(values.astype(np.float64))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: bad tensor table entry {entry!r}: {e}") from None
    return header, tensors


def check_hashes(header: Dict[str, Any], garment_hash: Optional[str], body_hash: Optional[str], force: bool = False) -> None:
    for label, expected in (("garment", garment_hash), ("body", body_hash)):
        stored = header.get(f"{label}_hash")
        if expected is None or stored == expected:
            continue
        message = f"checkpoint was trained for {label} hash {stored}, got {label} hash {expected}"
        if not force:
            raise CheckpointHashError(message, details={"stored": stored, "given": expected, "input": label})
        logger.warning("%s (overridden by --force)", message)


def load_checkpoint(
    path: PathLike,
    garment_hash: Optional[str] = None,
    body_hash: Optional[str] = None,
    force: bool = False,
) -> Tuple[torch.nn.Module, Dict[str, Any]]:
    """
    Rebuild the model stored in a checkpoint.

    Returns:
        (model, header); optimizer moments are available as
        ``header["optimizer_state"]``
    """
    header, tensors = read_checkpoint(path)
    check_hashes(header, garment_hash, body_hash, force)
    mode = header.get("mode")
    if mode not in _CHECKPOINT_MODELS:
        raise CheckpointError(f"{path}: unknown checkpoint mode '{mode}'")
    model = _CHECKPOINT_MODELS[mode].from_hyperparameters(header["hyperparameters"])
    reference = model.state_dict()
    state = {}
    for name, value in reference.items():
        key = f"model.{name}"
        if key not in tensors or tuple(tensors[key].shape) != tuple(value.shape):
            raise CheckpointError(f"{path}: tensor '{name}' is missing or has the wrong shape")
        state[name] = tensors[key].to(value.dtype)
    model.load_state_dict(state)
    header["optimizer_state"] = {k[len("optimizer.") :]: v for k, v in tensors.items() if k.startswith("optimizer.")}
    logger.info("Loaded %s checkpoint from %s", mode, path)
    return model, header
