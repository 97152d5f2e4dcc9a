import math

import numpy as np
import pytest
import torch

from pbns.ml import tensor as T
from pbns.ml.mesh import TriMesh
from pbns.ml.rig import (
    NEIGHBOUR_INIT_WEIGHT,
    Pose,
    Skeleton,
    SkinningWeights,
    check_weights,
    global_transforms,
    pose_tensor,
    prune_weights,
    rodrigues,
    skin,
    transfer_weights,
    translation_tensor,
)
from pbns.utils.exceptions import BodyModelError, DataError


@pytest.fixture
def chain():
    """Three joints in a line along +x: root at the origin, then x = 1 and x = 2."""
    return Skeleton(np.array([-1, 0, 1]), np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))


@pytest.mark.unit
class TestSkeleton:
    """Tests for skeleton validation."""

    def test_valid_chain(self, chain):
        """Test topology helpers of a valid chain."""
        assert chain.num_joints == 3
        assert chain.children(0) == [1]
        assert chain.neighbours(1) == [0, 2]
        assert chain.order.tolist() == [0, 1, 2]

    @pytest.mark.parametrize(
        "parents, message",
        [
            ([0, 0, 1], "root"),
            ([-1, -1, 1], "exactly one root"),
            ([-1, 2, 1], "cycle"),
            ([-1, 5, 1], "out of range"),
        ],
    )
    def test_invalid_trees(self, parents, message):
        """Test that malformed parent arrays are rejected with the reason."""
        with pytest.raises(BodyModelError, match=message):
            Skeleton(np.array(parents), np.zeros((3, 3)))

    def test_joint_count_mismatch(self):
        """Test that rest joints must match the parent array."""
        with pytest.raises(BodyModelError, match="rest joints"):
            Skeleton(np.array([-1, 0]), np.zeros((3, 3)))


@pytest.mark.unit
class TestKinematics:
    """Tests for forward kinematics and skinning."""

    def test_rest_pose_is_identity(self, chain):
        """Test that a zero pose yields identity transforms."""
        transforms = global_transforms(chain, T.as_tensor(np.zeros((3, 3))))
        expected = torch.eye(4, dtype=torch.float64).expand(3, 4, 4)

        assert torch.allclose(transforms, expected)

    def test_child_rotation_about_its_joint(self, chain):
        """Test that rotating the middle joint moves the tip about that joint."""
        theta = np.zeros((3, 3))
        theta[1] = [0.0, 0.0, math.pi / 2]
        transforms = global_transforms(chain, T.as_tensor(theta))

        tip = transforms[2] @ T.as_tensor([2.0, 0.0, 0.0, 1.0])
        assert torch.allclose(tip[:3], T.as_tensor([1.0, 1.0, 0.0]), atol=1e-12)
        # joint 1 itself stays in place
        joint = transforms[1] @ T.as_tensor([1.0, 0.0, 0.0, 1.0])
        assert torch.allclose(joint[:3], T.as_tensor([1.0, 0.0, 0.0]), atol=1e-12)

    def test_pose_shape_checked(self, chain):
        """Test that the pose must have one row per joint."""
        with pytest.raises(DataError, match="skeleton expects"):
            global_transforms(chain, T.as_tensor(np.zeros((2, 3))))

    def test_rodrigues_helper(self):
        """Test the single-vector rotation helper."""
        assert torch.allclose(rodrigues(T.as_tensor([0.0, 0.0, 0.0])), torch.eye(3, dtype=torch.float64))

    def test_skin_rest_and_translation(self, chain):
        """Test that the rest pose reproduces the rest vertices, shifted by the root translation."""
        vertices = T.as_tensor([[0.5, 0.2, 0.0], [1.5, -0.1, 0.3]])
        weights = T.as_tensor([[0.7, 0.3, 0.0], [0.0, 0.5, 0.5]])
        posed = skin(vertices, T.as_tensor(np.zeros((3, 3))), weights, chain, T.as_tensor([0.0, 0.0, 1.0]))

        assert torch.allclose(posed, vertices + T.as_tensor([0.0, 0.0, 1.0]))

    def test_skin_batch_matches_single(self, chain):
        """Test that a batch of poses equals poses skinned one at a time."""
        rng = np.random.default_rng(2)
        vertices = T.as_tensor(rng.normal(size=(5, 3)))
        weights = T.as_tensor(np.full((5, 3), 1.0 / 3.0))
        thetas = rng.normal(scale=0.3, size=(4, 3, 3))

        batch = skin(vertices, T.as_tensor(thetas), weights, chain)
        for i in range(4):
            single = skin(vertices, T.as_tensor(thetas[i]), weights, chain)
            assert torch.allclose(batch[i], single, atol=1e-12)

    def test_skin_rejects_bad_weights(self, chain):
        """Test that non-convex weight rows are rejected."""
        vertices = T.as_tensor(np.zeros((1, 3)))
        with pytest.raises(DataError, match="sums to"):
            skin(vertices, T.as_tensor(np.zeros((3, 3))), T.as_tensor([[0.5, 0.2, 0.0]]), chain)
        with pytest.raises(DataError, match="columns"):
            skin(vertices, T.as_tensor(np.zeros((3, 3))), T.as_tensor([[0.5, 0.5]]), chain)

    def test_check_weights_negative(self):
        """Test that negative weights are rejected even when rows sum to one."""
        with pytest.raises(DataError, match="nonnegative"):
            check_weights(T.as_tensor([[1.5, -0.5]]))


@pytest.mark.unit
class TestBlendWeights:
    """Tests for weight transfer and trainable weights."""

    def test_prune_weights(self):
        """Test that only the largest influences survive and rows are renormalised."""
        weights = np.array([[0.1, 0.2, 0.3, 0.25, 0.15], [0.5, 0.5, 0.0, 0.0, 0.0]])
        pruned = prune_weights(weights, max_influences=2)

        assert np.count_nonzero(pruned[0]) == 2
        assert pruned[0, 2] == pytest.approx(0.3 / 0.55)
        assert pruned[0, 3] == pytest.approx(0.25 / 0.55)
        np.testing.assert_array_equal(pruned[1], weights[1])

    def test_transfer_weights_copies_nearest_row(self, tetrahedron):
        """Test that each garment vertex takes the row of its nearest body vertex."""
        body_weights = np.eye(4)
        garment = TriMesh.from_arrays(tetrahedron.vertices * 1.01, tetrahedron.faces)

        transferred = transfer_weights(garment, tetrahedron, body_weights)
        np.testing.assert_array_equal(transferred, body_weights)

    def test_frozen_weights(self):
        """Test that frozen weights are returned as given and expose no parameters."""
        initial = np.array([[0.25, 0.75], [1.0, 0.0]])
        module = SkinningWeights(initial)

        assert list(module.parameters()) == []
        np.testing.assert_array_equal(module().numpy(), initial)

    def test_trainable_weights_start_renormalised(self, chain):
        """Test that each added neighbour joint takes 1e-3 mass before the row is renormalised."""
        initial = np.array([[0.6, 0.4, 0.0], [0.0, 0.0, 1.0]])
        weights = SkinningWeights(initial, chain, trainable=True)()

        expected = np.array([[0.6, 0.4, NEIGHBOUR_INIT_WEIGHT], [0.0, NEIGHBOUR_INIT_WEIGHT, 1.0]])
        expected /= 1.0 + NEIGHBOUR_INIT_WEIGHT
        np.testing.assert_allclose(weights.detach().numpy(), expected, rtol=1e-12, atol=1e-15)

    def test_trainable_weights_stay_convex(self, chain):
        """Test that trainable rows start at the initial weights and stay on their support."""
        initial = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        module = SkinningWeights(initial, chain, trainable=True)

        weights = module()
        assert torch.allclose(weights.sum(dim=1), torch.ones(2, dtype=torch.float64))
        # row 0 may spread to joint 1 (neighbour of joint 0) but never to joint 2
        assert weights[0, 2].item() == 0.0
        assert weights[0, 0].item() > 0.99
        with torch.no_grad():
            module.logits.add_(torch.randn_like(module.logits))
        moved = module()
        assert torch.allclose(moved.sum(dim=1), torch.ones(2, dtype=torch.float64))
        assert moved[0, 2].item() == 0.0


@pytest.mark.unit
class TestPoses:
    """Tests for the pose container."""

    def test_pose_vector_and_tensors(self):
        """Test stacking poses with and without translations."""
        a = Pose(np.zeros((2, 3)))
        b = Pose(np.ones((2, 3)), np.array([1.0, 2.0, 3.0]))

        assert pose_tensor([a, b]).shape == (2, 2, 3)
        assert translation_tensor([a]) is None
        assert translation_tensor([a, b]).tolist() == [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]
        assert a.vector().shape == (6,)

    def test_non_finite_pose(self):
        """Test that NaN angles are rejected."""
        with pytest.raises(DataError, match="finite"):
            Pose(np.array([[np.nan, 0.0, 0.0]]))
