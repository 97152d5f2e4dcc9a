"""
Batched inference, mesh-sequence export and throughput benchmarks.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from pbns.ml import tensor as T
from pbns.ml.body import BodyModel, pose_body
from pbns.ml.garment import GarmentTemplate
from pbns.ml.mesh import write_obj
from pbns.ml.model import PbnsModel
from pbns.ml.rig import Pose, pose_tensor, translation_tensor
from pbns.utils.exceptions import ConfigError, DataError
from pbns.utils.io_utils import PathLike, atomic_write

logger = logging.getLogger(__name__)

FORMATS = ("obj", "bin")
FRAMES_INDEX = "frames.json"
FRAMES_BIN = "frames.bin"
BODY_BIN = "body_frames.bin"


@dataclass
class InferResult:
    directory: Path
    format: str
    frames: List[str] = field(default_factory=list)
    body_frames: List[str] = field(default_factory=list)


def posed_batches(
    model: PbnsModel,
    garment: GarmentTemplate,
    body: BodyModel,
    poses: Sequence[Pose],
    batch_size: int = 16,
    float32: bool = False,
    with_body: bool = False,
):
    """Yield (start index, garment (B, N, 3), body (B, N_b, 3) or None) per batch, as numpy arrays."""
    if batch_size < 1:
        raise ConfigError(f"--batch must be at least 1, got {batch_size}")
    dtype = T.INFERENCE_DTYPE if float32 else T.DTYPE
    template = garment.rest_tensor.to(dtype)
    with torch.no_grad():
        for start in range(0, len(poses), batch_size):
            chunk = poses[start : start + batch_size]
            theta = pose_tensor(chunk).to(dtype)
            translation = translation_tensor(chunk)
            if translation is not None:
                translation = translation.to(dtype)
            posed, _ = model(theta, template, body.skeleton, translation)
            body_posed = pose_body(body, theta, translation).numpy() if with_body else None
            yield start, posed.numpy(), body_posed


class InferenceService:
    @staticmethod
    def infer(
        model: PbnsModel,
        garment: GarmentTemplate,
        body: BodyModel,
        poses: Sequence[Pose],
        out_dir: PathLike,
        fmt: str = "obj",
        batch_size: int = 16,
        export_body: bool = False,
        float32: bool = False,
        source: Optional[str] = None,
    ) -> InferResult:
        """
        Pose the outfit for every pose and write the sequence.

        Args:
            model: trained garment network
            garment: the garment the model was trained for
            body: body model providing the skeleton
            poses: poses to evaluate, frame i is pose i
            out_dir: output directory
            fmt: ``obj`` (one numbered OBJ per frame) or ``bin`` (one block of N x 3 float32 per frame)
            batch_size: poses per forward pass
            export_body: also write the posed body
            float32: evaluate in 32-bit instead of 64-bit
            source: pose file name recorded in the frame index

        Returns:
            InferResult: written frame files
        """
        if fmt not in FORMATS:
            raise ConfigError(f"--format must be one of {FORMATS}, got '{fmt}'")
        if not poses:
            raise DataError("no poses to evaluate")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result = InferResult(out, fmt)
        garment_blocks: List[bytes] = []
        body_blocks: List[bytes] = []
        for start, posed, body_posed in posed_batches(model, garment, body, poses, batch_size, float32, export_body):
            for offset, frame in enumerate(posed):
                index = start + offset
                if fmt == "obj":
                    name = f"frame_{index:05d}.obj"
                    write_obj(out / name, frame, garment.mesh.faces, comment=f"frame {index}")
                    result.frames.append(name)
                    if body_posed is not None:
                        body_name = f"body_{index:05d}.obj"
                        write_obj(out / body_name, body_posed[offset], body.mesh.faces, comment=f"body frame {index}")
                        result.body_frames.append(body_name)
                else:
                    garment_blocks.append(frame.astype("<f4").tobytes())
                    if body_posed is not None:
                        body_blocks.append(body_posed[offset].astype("<f4").tobytes())
        if fmt == "bin":
            with atomic_write(out / FRAMES_BIN, "wb") as handle:
                handle.write(b"".join(garment_blocks))
            result.frames.append(FRAMES_BIN)
            if body_blocks:
                with atomic_write(out / BODY_BIN, "wb") as handle:
                    handle.write(b"".join(body_blocks))
                result.body_frames.append(BODY_BIN)

        index: Dict[str, Any] = {
            "format": fmt,
            "num_frames": len(poses),
            "num_vertices": garment.num_vertices,
            "body_vertices": body.num_vertices if export_body else None,
            "dtype": "float32" if float32 else "float64",
            "pose_source": source,
            "frames": [
                {
                    "frame": i,
                    "pose_index": i,
                    "file": result.frames[i] if fmt == "obj" else FRAMES_BIN,
                    "byte_offset": None if fmt == "obj" else i * garment.num_vertices * 12,
                }
                for i in range(len(poses))
            ],
        }
        with atomic_write(out / FRAMES_INDEX, "w") as handle:
            json.dump(index, handle, indent=2)
        logger.info("Exported %d frames (%s) to %s", len(poses), fmt, out)
        return result

    @staticmethod
    def bench(
        model: PbnsModel,
        garment: GarmentTemplate,
        body: BodyModel,
        poses: Sequence[Pose],
        batch_sizes: Sequence[int] = (1, 16),
        repeat: int = 5,
        warmup: int = 1,
    ) -> pd.DataFrame:
        """
        Throughput of the forward pass in poses per second.

        Each repeat evaluates every pose once in batches of the given size; the
        table holds the median over repeats and its spread.
        """
        if not poses:
            raise DataError("no poses to benchmark")
        if repeat < 1:
            raise ConfigError(f"--repeat must be at least 1, got {repeat}")
        rows = []
        for batch_size in batch_sizes:
            for _ in range(warmup):
                for _ in posed_batches(model, garment, body, poses, batch_size):
                    pass
            rates = []
            for _ in range(repeat):
                started = time.perf_counter()
                for _ in posed_batches(model, garment, body, poses, batch_size):
                    pass
                rates.append(len(poses) / max(time.perf_counter() - started, 1e-12))
            rates_arr = np.asarray(rates)
            rows.append(
                {
                    "batch_size": int(batch_size),
                    "median_pps": float(np.median(rates_arr)),
                    "min_pps": float(rates_arr.min()),
                    "max_pps": float(rates_arr.max()),
                    "spread_pps": float(rates_arr.max() - rates_arr.min()),
                    "repeats": int(repeat),
                }
            )
            logger.info("Batch %d: %.1f poses/s (median of %d)", batch_size, rows[-1]["median_pps"], repeat)
        table = pd.DataFrame(rows)
        table.attrs["num_vertices"] = garment.num_vertices
        table.attrs["num_faces"] = garment.mesh.num_faces
        table.attrs["num_poses"] = len(poses)
        return table
