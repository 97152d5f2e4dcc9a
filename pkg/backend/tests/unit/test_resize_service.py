import dataclasses

import numpy as np
import pytest
import torch

from pbns.ml.model import load_checkpoint, save_checkpoint
from pbns.services.resize_service import (
    ResizeModel,
    TightnessRange,
    build_resizer,
    combination,
    resize_forward,
    rest_edge_estimate,
    shaped_bodies,
    smooth_field,
    train_resizer,
    transfer_blendshapes,
    validate_resizer,
)
from pbns.services.training_service import parameter_hash
from pbns.utils.config import ModelConfig, ResizeConfig, TrainConfig
from pbns.utils.exceptions import ConfigError, DataError

TINY_MODEL = ModelConfig(width=4, depth=1)
FAST_RESIZE = ResizeConfig(smoothing_iterations=5)


@pytest.fixture
def resizer(outfit, body):
    return build_resizer(outfit, body, TINY_MODEL, FAST_RESIZE, seed=0)


@pytest.mark.unit
class TestBlendShapes:
    """Tests for garment blend shape transfer."""

    def test_smoothing_step(self, tetrahedron):
        """Test one uniform Laplacian step on a complete graph."""
        field = np.zeros((4, 3))
        field[0] = 1.0

        smoothed = smooth_field(tetrahedron, field, iterations=1, step=0.5)

        np.testing.assert_allclose(smoothed[:, 0], [0.5, 1 / 6, 1 / 6, 1 / 6])
        assert field[0, 0] == 1.0

    def test_smoothing_scalar_field(self, grid_mesh):
        """Test that a constant field is a fixed point and a spike spreads."""
        constant = np.full(grid_mesh.num_vertices, 2.0)
        spike = np.zeros(grid_mesh.num_vertices)
        spike[5] = 1.0

        np.testing.assert_allclose(smooth_field(grid_mesh, constant, iterations=20), constant)
        smoothed = smooth_field(grid_mesh, spike, iterations=3)
        assert smoothed.shape == spike.shape
        assert smoothed[5] < 1.0
        assert smoothed[6] > 0.0

    def test_smoothing_keeps_mean(self, tetrahedron):
        """Test that smoothing conserves the field mean when every vertex has the same degree."""
        field = np.random.default_rng(4).normal(size=(4, 3))

        smoothed = smooth_field(tetrahedron, field, iterations=7)

        np.testing.assert_allclose(smoothed.mean(axis=0), field.mean(axis=0), atol=1e-9)

    def test_zero_iterations(self, grid_mesh):
        """Test that zero iterations copy the field."""
        field = np.arange(grid_mesh.num_vertices * 3, dtype=np.float64).reshape(-1, 3)

        np.testing.assert_array_equal(smooth_field(grid_mesh, field, iterations=0), field)

    def test_transfer_shape(self, outfit, body):
        """Test that two blend shapes come back, one offset per garment vertex."""
        shapes = transfer_blendshapes(outfit, body, iterations=5)

        assert shapes.shape == (2, outfit.num_vertices, 3)
        assert np.abs(shapes).max() > 0.0

    def test_transfer_needs_two_shapes(self, outfit, body):
        """Test that a body with a single blend shape cannot drive resizing."""
        single = dataclasses.replace(body, shape_blendshapes=body.shape_blendshapes[:1])

        with pytest.raises(DataError, match="resizing needs 2"):
            transfer_blendshapes(outfit, single)

    def test_combination(self):
        """Test that beta is truncated or padded to two entries before adding gamma."""
        gamma = np.array([0.5, 0.5])

        np.testing.assert_allclose(combination(np.array([1.0, 2.0, 3.0]), gamma), [1.5, 2.5])
        np.testing.assert_allclose(combination(np.array([1.0]), gamma), [1.5, 0.5])
        np.testing.assert_allclose(combination(np.zeros((4, 2)), np.ones((4, 2))), np.ones((4, 2)))

    def test_rest_edges_at_neutral(self, outfit, resizer):
        """Test that beta + gamma = 0 keeps the template's rest edge lengths."""
        rest = rest_edge_estimate(outfit.mesh, resizer.blendshapes.numpy(), np.array([0.5, -0.5]), np.array([-0.5, 0.5]))

        assert torch.allclose(rest, outfit.rest_edge_lengths)

    def test_rest_edges_direct(self, outfit, resizer):
        """Test the estimate against edges of the explicitly deformed template."""
        shapes = resizer.blendshapes.numpy()
        deformed = outfit.mesh.vertices + 1.5 * shapes[0]

        rest = rest_edge_estimate(outfit.mesh, shapes, np.array([1.0, 0.0]), np.array([0.5, 0.0]))

        expected = np.linalg.norm(deformed[outfit.mesh.edges[:, 0]] - deformed[outfit.mesh.edges[:, 1]], axis=1)
        np.testing.assert_allclose(rest.numpy(), expected, rtol=1e-12)

    def test_looser_is_longer(self, outfit, resizer):
        """Test that raising the first tightness value lengthens edges on the girth blend shape."""
        shapes = resizer.blendshapes.numpy()
        beta = np.zeros(2)
        means = [
            float(rest_edge_estimate(outfit.mesh, shapes, beta, np.array([g, 0.0])).mean()) for g in (-0.5, 0.0, 0.5)
        ]

        assert means[0] < means[1] < means[2]

    def test_rest_edges_batched(self, outfit, resizer):
        """Test that batched inputs give one row of edge lengths per sample."""
        rest = rest_edge_estimate(outfit.mesh, resizer.blendshapes.numpy(), np.zeros((3, 2)), np.ones((3, 2)))

        assert rest.shape == (3, outfit.mesh.num_edges)
        assert not torch.allclose(rest[0], outfit.rest_edge_lengths)


@pytest.mark.unit
class TestTightnessRange:
    """Tests for shape and tightness sampling."""

    def test_grid(self):
        """Test the three shapes by two tightness values, tightness-major."""
        ranges = TightnessRange.from_config(ResizeConfig())
        grid = ranges.grid()

        assert len(grid) == 6
        assert grid[0][0].tolist() == [-2.0, -2.0] and grid[0][1].tolist() == [-1.0, -1.0]
        assert grid[1][0].tolist() == [0.0, 0.0]
        assert grid[3][0].tolist() == [-2.0, -2.0] and grid[3][1].tolist() == [1.0, 1.0]

    def test_sample_within_bounds(self):
        """Test that samples are seeded and inside the box."""
        ranges = TightnessRange([0.0, -1.0], [1.0, 1.0], [0.0, 0.0], [0.5, 0.5])
        beta, gamma = ranges.sample(np.random.default_rng(0), 50)
        again, _ = ranges.sample(np.random.default_rng(0), 50)

        assert beta.shape == (50, 2) and gamma.shape == (50, 2)
        assert np.all((beta >= [0.0, -1.0]) & (beta <= [1.0, 1.0]))
        assert np.all((gamma >= 0.0) & (gamma <= 0.5))
        np.testing.assert_array_equal(beta, again)

    @pytest.mark.parametrize(
        "bounds",
        [
            ([1.0], [0.0], [0.0, 0.0], [1.0, 1.0]),
            ([0.0], [1.0, 2.0], [0.0, 0.0], [1.0, 1.0]),
            ([0.0], [1.0], [0.0], [1.0]),
            ([0.0], [np.inf], [0.0, 0.0], [1.0, 1.0]),
        ],
    )
    def test_invalid_bounds(self, bounds):
        """Test that inconsistent bounds are configuration errors."""
        with pytest.raises(ConfigError):
            TightnessRange(*bounds)


@pytest.mark.unit
class TestResizeModel:
    """Tests for the resizing network."""

    def test_zero_deformation_is_template(self, outfit, resizer):
        """Test that the initial network returns the template for any input."""
        positions = resize_forward(resizer, outfit, [1.0, -1.0], [0.3, 0.3])

        assert torch.equal(positions, outfit.rest_tensor)

    def test_batched_forward(self, outfit, resizer):
        """Test that a batch of inputs gives a batch of garments."""
        positions = resize_forward(resizer, outfit, np.zeros((3, 2)), np.zeros((3, 2)))

        assert positions.shape == (3, outfit.num_vertices, 3)

    def test_input_sizes_checked(self, outfit, resizer):
        """Test that wrong shape or tightness lengths are rejected."""
        with pytest.raises(ConfigError, match="resize input"):
            resize_forward(resizer, outfit, [0.0, 0.0, 0.0], [0.0, 0.0])

    def test_bad_blendshapes(self):
        """Test that blend shapes of the wrong size are rejected."""
        with pytest.raises(DataError, match="blend shapes"):
            ResizeModel(5, 2, blendshapes=np.zeros((2, 4, 3)))

    def test_checkpoint_round_trip(self, tmp_path, outfit, body, resizer):
        """Test that a resize checkpoint restores parameters and blend shapes."""
        path = save_checkpoint(resizer, tmp_path / "resize.ckpt", outfit.content_hash(), body.content_hash(), mode="resize")

        loaded, header = load_checkpoint(path, outfit.content_hash(), body.content_hash())
        assert isinstance(loaded, ResizeModel)
        assert header["mode"] == "resize"
        assert torch.equal(loaded.blendshapes, resizer.blendshapes)
        assert parameter_hash(loaded) == parameter_hash(resizer)

    def test_parameter_summary(self, resizer, outfit):
        """Test the resize parameter counts."""
        summary = resizer.parameter_summary()

        assert summary["mode"] == "resize"
        assert summary["mlp_parameters"] == 4 * 4 + 4
        assert summary["psd_parameters"] == 4 * outfit.num_vertices * 3

    def test_shaped_bodies(self, body):
        """Test that zero beta keeps the rest body."""
        shaped = shaped_bodies(body, np.zeros((2, 2)))

        assert shaped.shape == (2, body.num_vertices, 3)
        np.testing.assert_allclose(shaped[0].numpy(), body.mesh.vertices)


@pytest.mark.unit
class TestResizeTraining:
    """Tests for resize training and validation."""

    def test_validate_grid(self, outfit, body, resizer):
        """Test per-point metrics and their worst collision ratio."""
        ranges = TightnessRange.from_config(ResizeConfig())
        summary = validate_resizer(resizer, outfit, body, ranges.grid())

        assert len(summary["grid"]) == 6
        assert summary["max_collision_ratio"] == max(row["collision_ratio"] for row in summary["grid"])
        assert {"beta", "gamma", "loss", "edge_mm"} <= set(summary["grid"][0])

    def test_short_training(self, tmp_path, outfit, body, resizer):
        """Test that a short run updates the network and writes a resize checkpoint."""
        before = parameter_hash(resizer)
        ranges = TightnessRange.from_config(ResizeConfig())
        config = TrainConfig(epochs=1, batch_size=2, warmup_steps=0)

        result = train_resizer(resizer, outfit, body, ranges, config, samples_per_epoch=4, output_dir=tmp_path)

        assert result.steps == 2
        assert parameter_hash(resizer) != before
        assert "val_max_collision_ratio" in result.log[0]
        _, header = load_checkpoint(result.final_checkpoint)
        assert header["mode"] == "resize"

    def test_bounds_must_match_body(self, outfit, body, resizer):
        """Test that beta bounds must have one entry per body shape."""
        ranges = TightnessRange([0.0], [1.0], [0.0, 0.0], [1.0, 1.0])

        with pytest.raises(ConfigError, match="blend shapes"):
            train_resizer(resizer, outfit, body, ranges, TrainConfig(epochs=1))
