import numpy as np
import pytest

from multiscan.evaluation import associate_timestamps, evaluate_ape, umeyama_alignment
from multiscan.geometry import Pose


def random_poses(rng, n, spread=10.0):
    poses = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        poses.append(Pose(axis * rng.uniform(0, 2.5), rng.uniform(-spread, spread, 3)))
    return poses


class TestUmeyama:
    def test_identity_for_equal_sets(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(30, 3))
        pose = umeyama_alignment(pts, pts)
        assert np.linalg.norm(pose.rotvec) < 1e-10
        assert np.linalg.norm(pose.trans) < 1e-10

    def test_recovers_random_rigid_transform(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50, 3)) * [3.0, 1.0, 0.5]
        truth = random_poses(rng, 1)[0]
        moved = truth.apply(pts)
        est = umeyama_alignment(pts, moved)
        assert np.allclose(est.apply(pts), moved, atol=1e-9)

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            umeyama_alignment(np.zeros((2, 3)), np.zeros((2, 3)))


class TestAssociation:
    def test_nearest_within_window(self):
        idx_a, idx_b = associate_timestamps(
            np.array([0.0, 0.1, 0.25]), np.array([0.001, 0.102, 0.5]), max_dt=0.01
        )
        assert list(idx_a) == [0, 1]
        assert list(idx_b) == [0, 1]

    def test_empty_inputs(self):
        idx_a, idx_b = associate_timestamps(np.zeros(0), np.array([1.0]))
        assert len(idx_a) == 0 and len(idx_b) == 0


class TestEvaluateApe:
    def test_identical_trajectories_zero(self):
        rng = np.random.default_rng(2)
        times = np.sort(rng.uniform(0, 10, 50))
        poses = random_poses(rng, 50)
        result = evaluate_ape(times, poses, times, poses)
        assert result.rmse < 1e-12
        assert result.max_error < 1e-12
        assert result.n_pairs == 50

    def test_rigid_offset_absorbed(self):
        rng = np.random.default_rng(3)
        times = np.sort(rng.uniform(0, 10, 100))
        ref = random_poses(rng, 100)
        gauge = random_poses(rng, 1)[0]
        est = [gauge.compose(p) for p in ref]
        result = evaluate_ape(times, est, times, ref)
        assert result.rmse < 1e-9

    def test_gaussian_noise_matches_expectation(self):
        # iid N(0, sigma^2 I) translation noise has rms norm sqrt(3) sigma
        rng = np.random.default_rng(4)
        sigma = 0.01
        times = np.arange(1000) * 0.1
        ref = random_poses(rng, 1000, spread=50.0)
        est = [Pose(p.rotvec, p.trans + rng.normal(0, sigma, 3)) for p in ref]
        result = evaluate_ape(times, est, times, ref)
        expected = np.sqrt(3.0) * sigma
        assert abs(result.rmse - expected) / expected < 0.15

    def test_too_few_matches_raises(self):
        times = np.array([0.0, 1.0])
        poses = random_poses(np.random.default_rng(5), 2)
        with pytest.raises(ValueError, match="at least 3"):
            evaluate_ape(times, poses, times + 100.0, poses)
