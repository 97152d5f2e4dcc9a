"""
Run manifests.

Every command writes ``manifest.json`` next to its outputs. The manifest holds
the command, the validated config snapshot, content hashes of every input file,
the seed, the tool version and the wall time, which is enough to rerun it.
"""

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pbns import __version__
from pbns.utils.io_utils import PathLike, atomic_write, file_sha256
from pbns.utils.run_id import get_run_id

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    status: str = "ok"
    version: str = __version__
    run_id: Optional[str] = None
    started_at: str = ""
    wall_time: float = 0.0
    python: str = field(default_factory=platform.python_version)
    _clock: float = field(default=0.0, repr=False)

    @classmethod
    def start(cls, command: str, config: Optional[Mapping[str, Any]] = None, seed: Optional[int] = None) -> "RunManifest":
        """Begin a manifest for ``command``; the clock starts now."""
        return cls(
            command=command,
            config=dict(config or {}),
            seed=seed,
            run_id=get_run_id(),
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            _clock=time.perf_counter(),
        )

    def add_input(self, name: str, path: Optional[PathLike]) -> None:
        if path is None:
            return
        path = Path(path)
        self.inputs[name] = {"path": str(path), "sha256": file_sha256(path)}

    def add_output(self, name: str, path: PathLike) -> None:
        self.outputs[name] = str(path)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("_clock")
        return data

    def write(self, directory: PathLike) -> Path:
        """Stop the clock and write the manifest atomically into ``directory``."""
        self.wall_time = time.perf_counter() - self._clock
        path = Path(directory) / MANIFEST_NAME
        with atomic_write(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, default=str)
        logger.info("Wrote run manifest %s (%.2fs)", path, self.wall_time)
        return path


def read_manifest(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text(encoding="utf-8"))
