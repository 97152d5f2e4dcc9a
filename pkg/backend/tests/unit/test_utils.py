import json
import logging

import numpy as np
import pytest

from pbns.services.manifest_service import MANIFEST_NAME, RunManifest, read_manifest
from pbns.utils.exceptions import (
    BodyModelError,
    CheckpointHashError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    MeshError,
    NumericAbortError,
    PbnsError,
    PoseFileError,
    TensorShapeError,
)
from pbns.utils.io_utils import arrays_sha256, atomic_write, file_sha256
from pbns.utils.logging_config import LOG_FORMAT, RunFormatter, configure_logging
from pbns.utils.middleware import handle_command_errors
from pbns.utils.run_id import generate_run_id, get_run_id, set_run_id


@pytest.mark.unit
class TestExceptions:
    """Tests for the error hierarchy."""

    @pytest.mark.parametrize(
        "error_class, exit_code",
        [
            (PbnsError, 1),
            (ConfigError, 2),
            (DataError, 3),
            (MeshError, 3),
            (BodyModelError, 3),
            (PoseFileError, 3),
            (CheckpointVersionError, 3),
            (CheckpointHashError, 3),
            (TensorShapeError, 3),
            (NumericAbortError, 4),
        ],
    )
    def test_exit_codes(self, error_class, exit_code):
        """Test the exit code of each error class."""
        assert error_class().exit_code == exit_code

    def test_to_dict(self):
        """Test the dictionary form with and without details."""
        error = NumericAbortError("loss diverged", details={"step": 3})

        assert error.to_dict() == {
            "error": "numeric_abort",
            "message": "loss diverged",
            "exit_code": 4,
            "details": {"step": 3},
        }
        assert "details" not in MeshError().to_dict()
        assert MeshError().message == "The mesh is invalid"

    def test_hierarchy(self):
        """Test that file errors are data errors."""
        assert issubclass(CheckpointHashError, DataError)
        assert issubclass(PoseFileError, DataError)
        assert not issubclass(NumericAbortError, DataError)


@pytest.mark.unit
class TestMiddleware:
    """Tests for command error handling."""

    @pytest.mark.parametrize(
        "error, exit_code",
        [(ConfigError("bad"), 2), (MeshError("bad"), 3), (NumericAbortError("nan"), 4), (RuntimeError("boom"), 1)],
    )
    def test_errors_become_exit_codes(self, error, exit_code, capsys):
        """Test that raised errors exit with their code and a message on stderr."""

        @handle_command_errors
        def command():
            raise error

        with pytest.raises(SystemExit) as info:
            command()

        assert info.value.code == exit_code
        assert capsys.readouterr().err.startswith("error:")

    def test_success_passes_through(self):
        """Test that return values are kept."""

        @handle_command_errors
        def command(x):
            return x * 2

        assert command(4) == 8


@pytest.mark.unit
class TestRunId:
    """Tests for run IDs."""

    def test_generate(self):
        """Test that generated IDs are short and unique."""
        ids = {generate_run_id() for _ in range(20)}

        assert len(ids) == 20
        assert all(len(i) == 12 and int(i, 16) >= 0 for i in ids)

    def test_set_and_get(self):
        """Test that an explicit ID is kept and None generates one."""
        assert set_run_id("abc123") == "abc123"
        assert get_run_id() == "abc123"

        generated = set_run_id()
        assert get_run_id() == generated != "abc123"


@pytest.mark.unit
class TestLogging:
    """Tests for logging configuration."""

    def test_formatter_adds_run_id(self):
        """Test that records carry the active run ID."""
        set_run_id("feedc0de0000")
        record = logging.LogRecord("pbns.test", logging.INFO, __file__, 1, "hello", None, None)

        line = RunFormatter(LOG_FORMAT).format(record)

        assert "[feedc0de0000]" in line
        assert line.endswith("INFO - hello")

    def test_handler_installed_once(self):
        """Test that configuring twice keeps a single handler and updates its level."""
        root = logging.getLogger()
        level = root.level
        try:
            configure_logging("INFO")
            configure_logging("debug")
            handlers = [h for h in root.handlers if getattr(h, "_pbns_handler", False)]

            assert len(handlers) == 1
            assert handlers[0].level == logging.DEBUG
        finally:
            for handler in [h for h in root.handlers if getattr(h, "_pbns_handler", False)]:
                root.removeHandler(handler)
            root.setLevel(level)


@pytest.mark.unit
class TestFiles:
    """Tests for atomic writes and hashing."""

    def test_atomic_write_keeps_old_file_on_error(self, tmp_path):
        """Test that a failed write leaves the previous content and no temporary file."""
        path = tmp_path / "out.txt"
        path.write_text("old")

        with pytest.raises(RuntimeError):
            with atomic_write(path, "w") as handle:
                handle.write("new")
                raise RuntimeError("interrupted")

        assert path.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]

    def test_atomic_write_creates_parents(self, tmp_path):
        """Test that missing parent directories are created."""
        path = tmp_path / "a" / "b" / "out.bin"
        with atomic_write(path) as handle:
            handle.write(b"\x00\x01")

        assert path.read_bytes() == b"\x00\x01"
        assert len(file_sha256(path)) == 64

    def test_arrays_sha256(self):
        """Test that the hash covers values, dtype and shape."""
        a = np.arange(6, dtype=np.float64)

        assert arrays_sha256(a) == arrays_sha256(a.copy())
        assert arrays_sha256(a) != arrays_sha256(a.reshape(2, 3))
        assert arrays_sha256(a) != arrays_sha256(a.astype(np.float32))
        assert arrays_sha256(a, a) != arrays_sha256(a)


@pytest.mark.unit
class TestManifest:
    """Tests for run manifests."""

    def test_write_and_read(self, tmp_path):
        """Test that inputs are hashed and the manifest reads back."""
        data = tmp_path / "input.txt"
        data.write_text("payload")
        set_run_id("0123456789ab")
        manifest = RunManifest.start("train", {"train": {"epochs": 1}}, seed=5)
        manifest.add_input("garment", data)
        manifest.add_input("poses", None)
        manifest.add_output("checkpoint", tmp_path / "model.ckpt")

        path = manifest.write(tmp_path)
        stored = read_manifest(tmp_path)

        assert path.name == MANIFEST_NAME
        assert stored["command"] == "train"
        assert stored["seed"] == 5
        assert stored["run_id"] == "0123456789ab"
        assert stored["inputs"] == {"garment": {"path": str(data), "sha256": file_sha256(data)}}
        assert stored["outputs"]["checkpoint"] == str(tmp_path / "model.ckpt")
        assert stored["status"] == "ok"
        assert stored["wall_time"] >= 0.0
        assert "_clock" not in stored
        assert json.loads(path.read_text()) == stored
