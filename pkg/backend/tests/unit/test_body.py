import numpy as np
import pytest
import torch

from pbns.ml import tensor as T
from pbns.ml.body import (
    BODY_MAGIC,
    HumanoidDims,
    apply_shape,
    body_self_collisions,
    load_body,
    pose_body,
    save_body,
    synth_humanoid,
)
from pbns.ml.poses import random_pose_pool
from pbns.ml.rig import pose_tensor
from pbns.utils.exceptions import BodyModelError, DataError


@pytest.mark.unit
class TestBodyFiles:
    """Tests for body-model files."""

    def test_round_trip_is_exact(self, tmp_path, body):
        """Test that saving and loading reproduces every array bit for bit."""
        path = save_body(body, tmp_path / "body.pbnsbody")
        loaded = load_body(path)

        assert loaded.name == body.name
        assert np.array_equal(loaded.mesh.vertices, body.mesh.vertices)
        assert np.array_equal(loaded.mesh.faces, body.mesh.faces)
        assert np.array_equal(loaded.weights, body.weights)
        assert np.array_equal(loaded.shape_blendshapes, body.shape_blendshapes)
        assert loaded.skeleton.names == body.skeleton.names
        assert loaded.content_hash() == body.content_hash()

    def test_bad_magic(self, tmp_path):
        """Test that a file without the magic is rejected."""
        path = tmp_path / "bad.pbnsbody"
        path.write_bytes(b"NOTABODY" + b"\x00" * 16)

        with pytest.raises(BodyModelError, match="bad magic"):
            load_body(path)

    def test_missing_file(self, tmp_path):
        """Test the error for a missing file."""
        with pytest.raises(BodyModelError, match="not found"):
            load_body(tmp_path / "missing.pbnsbody")

    def test_truncated_block_names_offset(self, tmp_path, body):
        """Test that truncation reports the block and its byte offset."""
        path = save_body(body, tmp_path / "body.pbnsbody")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])

        with pytest.raises(BodyModelError, match="truncated .* block at byte offset") as info:
            load_body(path)
        assert "offset" in info.value.details

    def test_trailing_bytes(self, tmp_path, body):
        """Test that extra bytes after the last block are rejected."""
        path = save_body(body, tmp_path / "body.pbnsbody")
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")

        with pytest.raises(BodyModelError, match="trailing bytes"):
            load_body(path)

    def test_lists_every_problem(self, tmp_path, body):
        """Test that an invalid body reports all violated invariants at once."""
        broken = synth_humanoid()
        broken.weights = broken.weights.copy()
        broken.weights[0] *= 0.5
        broken.weights[1, 0] = -1.0
        path = save_body(broken, tmp_path / "broken.pbnsbody")

        with pytest.raises(BodyModelError) as info:
            load_body(path)
        problems = info.value.details["problems"]
        assert any("weight row 0" in p for p in problems)
        assert any("negative" in p for p in problems)

    def test_magic_constant(self):
        """Test the file magic."""
        assert BODY_MAGIC == b"PBNSBODY"


@pytest.mark.unit
class TestShapeAndPose:
    """Tests for shape blend shapes and body posing."""

    def test_apply_shape_zero_is_rest(self, body):
        """Test that beta = 0 gives the rest mesh."""
        assert np.array_equal(apply_shape(body, np.zeros(body.num_shapes)), body.mesh.vertices)

    def test_apply_shape_is_linear(self, body):
        """Test that shaped vertices are linear in beta."""
        beta = np.array([0.5, -1.0])
        expected = body.mesh.vertices + 0.5 * body.shape_blendshapes[0] - body.shape_blendshapes[1]

        np.testing.assert_allclose(apply_shape(body, beta), expected)

    def test_apply_shape_length_mismatch(self, body):
        """Test that beta must have one entry per blend shape."""
        with pytest.raises(DataError, match="components"):
            apply_shape(body, np.zeros(body.num_shapes + 1))

    def test_pose_body_rest(self, body):
        """Test that the zero pose leaves the body at rest and carries no gradient."""
        posed = pose_body(body, T.as_tensor(np.zeros((body.num_joints, 3))))

        assert not posed.requires_grad
        # float32-snapped weight rows sum to one within about 1e-7
        np.testing.assert_allclose(posed.numpy(), body.mesh.vertices, atol=1e-5)

    def test_pose_body_batch(self, body):
        """Test that a batch of poses gives one posed body each."""
        poses = random_pose_pool(body.skeleton, 3, seed=5)
        posed = pose_body(body, pose_tensor(poses))

        assert posed.shape == (3, body.num_vertices, 3)
        assert torch.isfinite(posed).all()


@pytest.mark.unit
class TestHumanoid:
    """Tests for the procedural humanoid."""

    def test_structure(self, body):
        """Test joint count, blend shapes and convex weights."""
        assert body.num_joints == 12
        assert body.num_shapes == 2
        assert body.skeleton.names[0] == "root"
        np.testing.assert_allclose(body.weights.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(body.weights >= 0)
        assert len(np.unique(body.part_labels)) == 5

    def test_rest_pose_free_of_self_collisions(self, body):
        """Test that the rest mesh passes the self-collision check."""
        assert len(body_self_collisions(body, body.mesh.vertices)) == 0

    def test_without_blendshapes(self):
        """Test that blend shapes are optional."""
        plain = synth_humanoid(with_blendshapes=False)
        assert plain.num_shapes == 0
        assert np.array_equal(apply_shape(plain, []), plain.mesh.vertices)

    def test_invalid_dimensions(self):
        """Test that overlapping limbs are rejected before meshing."""
        with pytest.raises(BodyModelError, match="legs overlap"):
            synth_humanoid(HumanoidDims(hip_offset=0.05))

    def test_content_hash_changes_with_geometry(self, body):
        """Test that the content hash follows the vertex data."""
        other = synth_humanoid(HumanoidDims(leg_length=0.82))
        assert other.content_hash() != body.content_hash()
