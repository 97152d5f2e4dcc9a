import numpy as np
import pytest

from pbns.ml.poses import (
    JOINT_LIMITS,
    PoseDatabase,
    load_poses,
    pose_distance,
    random_pose_pool,
    sample_pose_database,
    save_poses,
)
from pbns.ml.rig import Pose
from pbns.utils.exceptions import DataError, PoseFileError


@pytest.mark.unit
class TestPoseSampling:
    """Tests for the pose-database sampler."""

    def test_distance_ignores_root_orientation(self):
        """Test that the first three entries do not count towards the distance."""
        a = np.zeros(9)
        b = np.zeros(9)
        b[:3] = 5.0
        b[5] = 0.25

        assert pose_distance(a, b) == pytest.approx(0.25)

    def test_accepted_poses_are_diverse(self, body):
        """Test that every pair of accepted poses is at least d_min apart."""
        pool = random_pose_pool(body.skeleton, 300, seed=0)
        db = sample_pose_database(pool, 40, d_min=0.5, seed=1)

        vectors = np.stack([p.vector() for p in db.poses])
        for i in range(len(vectors)):
            others = np.delete(vectors, i, axis=0)
            assert pose_distance(others, vectors[i]).min() >= 0.5

    def test_split_is_disjoint_and_sized(self, body):
        """Test the train/validation split sizes and disjointness."""
        pool = random_pose_pool(body.skeleton, 50, seed=0)
        db = sample_pose_database(pool, 20, d_min=0.0, split=0.75, seed=0)

        assert len(db) == 20
        assert len(db.train) == 15
        assert len(db.validation) == 5
        assert not set(db.train_index) & set(db.validation_index)

    def test_sampling_is_deterministic(self, body):
        """Test that the same seed selects the same poses."""
        pool = random_pose_pool(body.skeleton, 100, seed=0)
        first = sample_pose_database(pool, 10, d_min=0.3, seed=7)
        second = sample_pose_database(pool, 10, d_min=0.3, seed=7)

        assert [p.vector().tolist() for p in first.poses] == [p.vector().tolist() for p in second.poses]

    def test_pool_exhaustion_warns(self, body, caplog):
        """Test that an exhausted pool returns fewer poses with a warning."""
        pool = [Pose(np.zeros((body.num_joints, 3))) for _ in range(5)]
        db = sample_pose_database(pool, 3, d_min=0.1, seed=0)

        assert len(db) == 1
        assert "exhausted" in caplog.text

    def test_invalid_arguments(self, poses):
        """Test that a non-positive count and an out-of-range split are rejected."""
        with pytest.raises(DataError, match="positive"):
            sample_pose_database(poses, 0)
        with pytest.raises(DataError, match="split"):
            sample_pose_database(poses, 2, split=1.5)

    def test_overlapping_split_rejected(self, poses):
        """Test that a database cannot hold a pose in both splits."""
        with pytest.raises(DataError, match="both"):
            PoseDatabase(list(poses), [0, 1], [1, 2])

    def test_random_pool_respects_limits(self, body):
        """Test that named joints stay within their limits."""
        pool = random_pose_pool(body.skeleton, 200, seed=3)
        theta = np.stack([p.theta for p in pool])
        knee = body.skeleton.names.index("l_knee")
        low, high = JOINT_LIMITS["l_knee"]

        assert np.all(theta[:, knee] >= np.asarray(low))
        assert np.all(theta[:, knee] <= np.asarray(high))

    def test_random_pool_translation(self, body):
        """Test that a translation range adds root translations."""
        pool = random_pose_pool(body.skeleton, 4, seed=0, translation_range=0.1)

        assert all(p.translation is not None and np.all(np.abs(p.translation) <= 0.1) for p in pool)


@pytest.mark.unit
class TestPoseFiles:
    """Tests for binary and CSV pose files."""

    def test_binary_round_trip(self, tmp_path, poses):
        """Test that poses survive a save/load at float32 precision."""
        path = save_poses(tmp_path / "poses.pbnspose", poses)
        loaded = load_poses(path, num_joints=poses[0].num_joints)

        assert len(loaded) == len(poses)
        np.testing.assert_allclose(loaded[3].theta, poses[3].theta, atol=1e-6)
        assert loaded[0].translation is None

    def test_binary_with_translation(self, tmp_path):
        """Test that translations are stored when any pose has one."""
        poses = [Pose(np.zeros((2, 3))), Pose(np.ones((2, 3)), np.array([0.5, 0.25, 0.0]))]
        loaded = load_poses(save_poses(tmp_path / "t.pbnspose", poses))

        assert loaded[0].translation.tolist() == [0.0, 0.0, 0.0]
        assert loaded[1].translation.tolist() == [0.5, 0.25, 0.0]

    def test_joint_count_mismatch(self, tmp_path, poses):
        """Test that poses for another skeleton are rejected."""
        path = save_poses(tmp_path / "poses.pbnspose", poses)

        with pytest.raises(PoseFileError, match="joints"):
            load_poses(path, num_joints=poses[0].num_joints + 1)

    def test_truncated_binary(self, tmp_path, poses):
        """Test that a truncated block is reported with its offset."""
        path = save_poses(tmp_path / "poses.pbnspose", poses)
        path.write_bytes(path.read_bytes()[:-8])

        with pytest.raises(PoseFileError, match="byte offset"):
            load_poses(path)

    def test_csv_without_translation(self, tmp_path):
        """Test a headerless CSV with 3K columns."""
        path = tmp_path / "poses.csv"
        path.write_text("0.1,0.2,0.3,0.4,0.5,0.6\n0,0,0,0,0,0\n")

        loaded = load_poses(path, num_joints=2)
        assert len(loaded) == 2
        assert loaded[0].theta.tolist() == [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]
        assert loaded[0].translation is None

    def test_csv_with_header_and_translation(self, tmp_path):
        """Test a CSV with a header row and 3K + 3 columns."""
        path = tmp_path / "poses.csv"
        path.write_text("a,b,c,tx,ty,tz\n0.1,0.2,0.3,1,2,3\n")

        loaded = load_poses(path, num_joints=1)
        assert loaded[0].theta.tolist() == [[0.1, 0.2, 0.3]]
        assert loaded[0].translation.tolist() == [1.0, 2.0, 3.0]

    def test_csv_wrong_columns(self, tmp_path):
        """Test that a column count matching neither layout is rejected."""
        path = tmp_path / "poses.csv"
        path.write_text("1,2,3,4\n")

        with pytest.raises(PoseFileError, match="columns"):
            load_poses(path, num_joints=2)

    def test_missing_file(self, tmp_path):
        """Test the error for a missing pose file."""
        with pytest.raises(PoseFileError, match="not found"):
            load_poses(tmp_path / "missing.pbnspose")

    def test_empty_save_rejected(self, tmp_path):
        """Test that an empty pose list cannot be written."""
        with pytest.raises(PoseFileError, match="empty"):
            save_poses(tmp_path / "empty.pbnspose", [])
