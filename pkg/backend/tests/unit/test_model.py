import json
import struct

import numpy as np
import pytest
import torch

from pbns.ml import tensor as T
from pbns.ml.model import (
    CHECKPOINT_MAGIC,
    PbnsModel,
    deform,
    embed,
    load_checkpoint,
    pose_outfit,
    read_checkpoint,
    save_checkpoint,
)
from pbns.ml.rig import pose_tensor, skin
from pbns.services.training_service import build_model
from pbns.utils.config import ModelConfig
from pbns.utils.exceptions import CheckpointError, CheckpointHashError, CheckpointVersionError, ConfigError
from pbns.utils.run_id import set_run_id


def _rewrite_header(path, drop=(), **changes):
    data = path.read_bytes()
    (length,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + length])
    header.update(changes)
    for name in drop:
        del header[name]
    blob = json.dumps(header).encode("utf-8")
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + data[12 + length :])


@pytest.mark.unit
class TestPbnsModel:
    """Tests for the garment network."""

    @pytest.mark.parametrize(
        "mode, size",
        [("mlp", 8), ("identity_theta", 36), ("identity_rotmat", 108)],
    )
    def test_embedding_sizes(self, mode, size):
        """Test the embedding size of each mode for a 12-joint skeleton."""
        model = PbnsModel(10, 12, embedding_mode=mode, width=8, depth=2)
        x = embed(model, T.as_tensor(np.zeros((3, 12, 3))))

        assert model.embedding_size == size
        assert x.shape == (3, size)
        assert model.psd.shape == (size, 10, 3)

    def test_identity_theta_embedding(self):
        """Test that identity_theta returns the flattened pose."""
        model = PbnsModel(4, 2, embedding_mode="identity_theta")
        theta = T.as_tensor(np.arange(6.0).reshape(2, 3))

        assert embed(model, theta).tolist() == list(np.arange(6.0))

    def test_invalid_configuration(self):
        """Test that unknown modes and empty networks are rejected."""
        with pytest.raises(ConfigError, match="embedding_mode"):
            PbnsModel(4, 2, embedding_mode="fourier")
        with pytest.raises(ConfigError, match="positive"):
            PbnsModel(4, 2, width=0)

    def test_pose_shape_checked(self, model):
        """Test that poses for another skeleton are rejected."""
        with pytest.raises(ConfigError, match="model expects"):
            model.embed(T.as_tensor(np.zeros((5, 3))))

    def test_seeded_initialisation(self):
        """Test that the same seed gives the same weights and another seed does not."""
        a = PbnsModel(4, 3, width=8, depth=3, seed=1)
        b = PbnsModel(4, 3, width=8, depth=3, seed=1)
        c = PbnsModel(4, 3, width=8, depth=3, seed=2)

        assert torch.equal(a.layers[0].weight, b.layers[0].weight)
        assert not torch.equal(a.layers[0].weight, c.layers[0].weight)
        assert torch.all(a.layers[1].bias == 0)
        assert torch.all(a.layers[0].weight.abs() <= 1.0 / np.sqrt(9))

    def test_deform_is_linear_in_embedding(self):
        """Test dT = sum_i X_i D_i."""
        model = PbnsModel(3, 2, embedding_mode="identity_theta")
        with torch.no_grad():
            model.psd.copy_(torch.randn(6, 3, 3, dtype=torch.float64))
        x = T.as_tensor(np.eye(6)[2])

        assert torch.allclose(deform(model, x), model.psd[2])

    def test_zero_psd_is_plain_skinning(self, model, outfit, body, poses):
        """Test that the initial (zero) PSD matrix gives the skinned template."""
        theta = pose_tensor(poses[:2])
        posed = pose_outfit(model, outfit, body, theta)
        expected = skin(outfit.rest_tensor, theta, model.blend_weights(), body.skeleton)

        assert posed.shape == (2, outfit.num_vertices, 3)
        assert torch.allclose(posed, expected)

    def test_rest_pose_without_deformation(self, model, outfit, body):
        """Test that the zero pose with zero PSD leaves the garment at rest."""
        posed = pose_outfit(model, outfit, body, T.as_tensor(np.zeros((body.num_joints, 3))))

        np.testing.assert_allclose(posed.detach().numpy(), outfit.mesh.vertices, atol=1e-5)
    def test_vertex_count_checked(self, model, body):
        """Test that a model cannot pose another garment."""
        from pbns.ml.garment import tube_skirt

        with pytest.raises(ConfigError, match="garment vertices"):
            pose_outfit(model, tube_skirt(segments=8, ring_spacing=0.1), body, T.as_tensor(np.zeros((12, 3))))

    def test_parameter_summary(self, model, outfit):
        """Test that the summary counts MLP, PSD and weight parameters."""
        summary = model.parameter_summary()

        assert summary["psd_parameters"] == 8 * outfit.num_vertices * 3
        assert summary["mlp_parameters"] == (36 * 8 + 8) + (8 * 8 + 8)
        assert summary["weight_parameters"] == 0
        assert summary["total_parameters"] == summary["psd_parameters"] + summary["mlp_parameters"]

    def test_trainable_weights_are_a_separate_group(self, outfit, body):
        """Test that trainable blend weights are not network parameters."""
        model = build_model(outfit, body, ModelConfig(width=4, depth=1, trainable_weights=True))

        assert model.trainable_weights
        assert len(model.weight_parameters()) == 1
        assert all(p is not model.skinning.logits for p in model.network_parameters())


@pytest.mark.unit
class TestCheckpoints:
    """Tests for checkpoint files."""

    def test_round_trip(self, tmp_path, model, outfit, body):
        """Test that a saved checkpoint rebuilds an identical model."""
        with torch.no_grad():
            model.psd.add_(0.01)
        path = save_checkpoint(model, tmp_path / "model.ckpt", outfit.content_hash(), body.content_hash())

        loaded, header = load_checkpoint(path, outfit.content_hash(), body.content_hash())
        assert isinstance(loaded, PbnsModel)
        assert header["mode"] == "pose"
        for name, value in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], value), name
        assert header["optimizer_state"] == {}

    def test_trainable_weights_round_trip(self, tmp_path, outfit, body):
        """Test that trainable logits and their support mask survive a round trip."""
        model = build_model(outfit, body, ModelConfig(width=4, depth=1, trainable_weights=True))
        path = save_checkpoint(model, tmp_path / "w.ckpt", "g", "b")
        loaded, _ = load_checkpoint(path)

        assert torch.equal(loaded.blend_weights(), model.blend_weights())

    def test_optimizer_state_and_trainer(self, tmp_path, model):
        """Test that optimizer moments and trainer counters are stored."""
        moments = {"0.exp_avg": torch.ones(3, dtype=torch.float64)}
        path = save_checkpoint(model, tmp_path / "m.ckpt", "g", "b", optimizer_state=moments, trainer={"step": 7})

        _, header = load_checkpoint(path)
        assert header["trainer"] == {"step": 7}
        assert torch.equal(header["optimizer_state"]["0.exp_avg"], moments["0.exp_avg"])

    def test_hash_mismatch(self, tmp_path, model, caplog):
        """Test that a mismatched garment hash is refused unless forced."""
        path = save_checkpoint(model, tmp_path / "model.ckpt", "garment-a", "body-a")

        with pytest.raises(CheckpointHashError, match="garment hash") as info:
            load_checkpoint(path, "garment-b", "body-a")
        assert info.value.details["input"] == "garment"

        load_checkpoint(path, "garment-b", "body-a", force=True)
        assert "overridden by --force" in caplog.text

    def test_version_mismatch(self, tmp_path, model):
        """Test that another format version is refused naming both versions."""
        path = save_checkpoint(model, tmp_path / "model.ckpt", "g", "b")
        _rewrite_header(path, version=99)

        with pytest.raises(CheckpointVersionError, match="version 99") as info:
            read_checkpoint(path)
        assert info.value.details == {"found": 99, "supported": 1}

    @pytest.mark.parametrize("field", ["tensors", "hyperparameters", "mode", "payload_sha256"])
    def test_missing_header_field(self, tmp_path, model, field):
        """Test that a header without a required field is a checkpoint error naming the field."""
        path = save_checkpoint(model, tmp_path / "model.ckpt", "g", "b")
        _rewrite_header(path, drop=(field,))

        with pytest.raises(CheckpointError, match=f"missing field '{field}'") as info:
            load_checkpoint(path)
        assert info.value.exit_code == 3

    def test_malformed_tensor_table(self, tmp_path, model):
        """Test that a tensor entry without a shape is a checkpoint error."""
        path = save_checkpoint(model, tmp_path / "model.ckpt", "g", "b")
        _rewrite_header(path, tensors=[{"name": "model.psd", "offset": 0}])

        with pytest.raises(CheckpointError, match="bad tensor table entry"):
            read_checkpoint(path)

    def test_corrupt_payload(self, tmp_path, model):
        """Test that a flipped payload byte fails the checksum."""
        path = save_checkpoint(model, tmp_path / "model.ckpt", "g", "b")
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))

        with pytest.raises(CheckpointError, match="checksum"):
            read_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        """Test that arbitrary files and missing files are rejected."""
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world, not a checkpoint")

        with pytest.raises(CheckpointError, match="not a checkpoint"):
            read_checkpoint(path)
        with pytest.raises(CheckpointError, match="not found"):
            read_checkpoint(tmp_path / "missing.ckpt")

    def test_same_seed_checkpoints_are_byte_identical(self, tmp_path, outfit, body):
        """Test that checkpoints of same-seed models match byte for byte across runs."""
        paths = []
        for run in ("0123456789ab", "ba9876543210"):
            set_run_id(run)
            model = build_model(outfit, body, ModelConfig(width=4, depth=1), seed=0)
            paths.append(save_checkpoint(model, tmp_path / f"{run}.ckpt", "g", "b", trainer={"step": 1}))

        assert paths[0].read_bytes() == paths[1].read_bytes()
        header, _ = read_checkpoint(paths[0])
        assert "run_id" not in header

    def test_unknown_mode(self, tmp_path, model):
        """Test that saving under an unregistered mode is refused."""
        with pytest.raises(CheckpointError, match="unknown checkpoint mode"):
            save_checkpoint(model, tmp_path / "model.ckpt", "g", "b", mode="cloth")

    def test_no_partial_file_on_failure(self, tmp_path, model, mocker):
        """Test that a failed write leaves no checkpoint behind."""
        mocker.patch("pbns.ml.model.struct.pack", side_effect=RuntimeError("disk full"))

        with pytest.raises(RuntimeError):
            save_checkpoint(model, tmp_path / "model.ckpt", "g", "b")
        assert list(tmp_path.iterdir()) == []
