import math

import numpy as np
import pytest
import yaml

from helpers import fk_matrix_chain_oracle
from trigait.skeleton import (
    CanonicalLayout,
    CapsuleProjector,
    Skeleton,
    SmplPoseSequence,
    default_skeleton,
    forward_kinematics,
    project_silhouette,
    rest_pose_canonical_coords,
    rotation_matrices,
)

# frozen from the bundled skeleton at H=15, W=10 (documented convention:
# higher joint -> row 0, anatomical right -> column 0)
GOLDEN_LAYOUT_15x10 = [
    (6, 5), (7, 6), (7, 4), (5, 5), (10, 6), (10, 4), (4, 5), (14, 6), (14, 4),
    (3, 5), (15, 6), (15, 4), (1, 5), (2, 6), (2, 4), (0, 5), (2, 7), (2, 3),
    (3, 8), (3, 2), (4, 9), (4, 1), (4, 10), (4, 0),
]

SYMMETRIC_PAIRS = [(1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23)]


def two_joint_skeleton(offset=(0.0, 1.0, 0.0), radius=0.1):
    return Skeleton(
        joint_names=("base", "tip"),
        parent_index=(-1, 0),
        bone_offset=np.array([[0.0, 0.0, 0.0], list(offset)]),
        capsule_radius=np.array([radius, radius]),
    )


class TestSkeletonValidation:
    def test_default_skeleton_loads(self):
        sk = default_skeleton()
        assert sk.num_joints == 24
        assert sk.parent_index[0] == -1
        assert all(sk.parent_index[j] < j for j in range(1, 24))

    def test_rejects_bad_parent(self):
        with pytest.raises(ValueError, match="parent_index"):
            Skeleton(("a", "b", "c"), (-1, 2, 1), np.zeros((3, 3)), np.ones(3))

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError, match="radii"):
            two_joint_skeleton(radius=0.0)

    def test_rejects_nonfinite_offset(self):
        with pytest.raises(ValueError, match="finite"):
            two_joint_skeleton(offset=(0.0, np.inf, 0.0))

    def test_yaml_round_trip(self, tmp_path):
        sk = default_skeleton()
        path = tmp_path / "sk.yaml"
        sk.save(path)
        again = Skeleton.load(path)
        assert again.joint_names == sk.joint_names
        assert again.parent_index == sk.parent_index
        np.testing.assert_allclose(again.bone_offset, sk.bone_offset)
        np.testing.assert_allclose(again.capsule_radius, sk.capsule_radius)

    def test_load_rejects_unknown_version(self, tmp_path):
        data = default_skeleton().to_dict()
        data["format_version"] = 99
        path = tmp_path / "sk.yaml"
        path.write_text(yaml.safe_dump(data))
        with pytest.raises(ValueError, match="format_version"):
            Skeleton.load(path)


class TestForwardKinematics:
    def test_identity_pose_accumulates_offsets(self):
        sk = default_skeleton()
        pos = forward_kinematics(np.zeros((24, 3)), sk, np.zeros(3))
        expected = np.zeros((24, 3))
        expected[0] = sk.bone_offset[0]
        for j in range(1, 24):
            expected[j] = expected[sk.parent_index[j]] + sk.bone_offset[j]
        np.testing.assert_allclose(pos, expected, atol=1e-12)

    def test_translation_equivariance(self, rng):
        sk = default_skeleton()
        pose = rng.normal(0, 0.4, size=(24, 3))
        base = forward_kinematics(pose, sk, np.zeros(3))
        for _ in range(50):
            t = rng.normal(0, 2, size=3)
            shifted = forward_kinematics(pose, sk, t)
            np.testing.assert_allclose(shifted, base + t, atol=1e-9)

    def test_root_rotation_rotates_about_root(self, rng):
        sk = default_skeleton()
        rest = forward_kinematics(np.zeros((24, 3)), sk, np.zeros(3))
        pose = np.zeros((24, 3))
        pose[0] = [0.0, math.pi / 2, 0.0]
        rotated = forward_kinematics(pose, sk, np.zeros(3))
        R = rotation_matrices(pose[0])
        expected = rest[0] + (rest - rest[0]) @ R.T
        np.testing.assert_allclose(rotated, expected, atol=1e-9)

    def test_root_rotation_equivariance_random_poses(self, rng):
        sk = default_skeleton()
        for _ in range(50):
            pose = rng.normal(0, 0.5, size=(24, 3))
            pre = rng.normal(0, 1, size=3)
            base = forward_kinematics(pose, sk, np.zeros(3))
            pose_rot = pose.copy()
            R_pre = rotation_matrices(pre)
            R_old = rotation_matrices(pose[0])
            combined = R_pre @ R_old
            angle = math.acos(min(1.0, max(-1.0, (np.trace(combined) - 1.0) / 2.0)))
            if angle < 1e-8 or abs(angle - math.pi) < 1e-6:
                continue
            axis = (
                np.array(
                    [
                        combined[2, 1] - combined[1, 2],
                        combined[0, 2] - combined[2, 0],
                        combined[1, 0] - combined[0, 1],
                    ]
                )
                / (2.0 * math.sin(angle))
            )
            pose_rot[0] = axis * angle
            rotated = forward_kinematics(pose_rot, sk, np.zeros(3))
            expected = base[0] + (base - base[0]) @ R_pre.T
            np.testing.assert_allclose(rotated, expected, atol=1e-9)

    def test_matches_matrix_chain_oracle(self, rng):
        sk = default_skeleton()
        for _ in range(25):
            pose = rng.normal(0, 0.6, size=(24, 3))
            trans = rng.normal(0, 1, size=3)
            ours = forward_kinematics(pose, sk, trans)
            oracle = fk_matrix_chain_oracle(pose, sk, trans)
            np.testing.assert_allclose(ours, oracle, atol=1e-10)

    def test_rejects_nonfinite(self):
        sk = default_skeleton()
        pose = np.zeros((24, 3))
        pose[3, 1] = np.nan
        with pytest.raises(ValueError, match="finite"):
            forward_kinematics(pose, sk, np.zeros(3))


class TestPoseSequence:
    def test_valid_sequence(self):
        seq = SmplPoseSequence(pose=np.zeros((5, 24, 3)), betas=np.zeros(10), trans=np.zeros((5, 3)))
        assert seq.num_frames == 5

    def test_rejects_large_axis_angle(self):
        pose = np.zeros((2, 24, 3))
        pose[0, 0, 0] = 7.0
        with pytest.raises(ValueError, match="2\\*pi"):
            SmplPoseSequence(pose=pose, betas=np.zeros(10), trans=np.zeros((2, 3)))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            SmplPoseSequence(pose=np.zeros((0, 24, 3)), betas=np.zeros(10), trans=np.zeros((0, 3)))


class TestProjector:
    def test_rest_pose_front_view(self):
        sk = default_skeleton()
        mask = project_silhouette(sk.rest_positions(), 0.0, (64, 64), sk)
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.sum() > 0
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        assert rows.max() - rows.min() > cols.max() - cols.min()

    def test_mirror_symmetry_0_vs_180(self, rng):
        sk = default_skeleton()
        pose = rng.normal(0, 0.3, size=(24, 3))
        pos = forward_kinematics(pose, sk, np.zeros(3))
        front = project_silhouette(pos, 0.0, (64, 64), sk)
        back = project_silhouette(pos, 180.0, (64, 64), sk)
        np.testing.assert_array_equal(front, np.fliplr(back))

    def test_translation_invariance(self, rng):
        sk = default_skeleton()
        pose = rng.normal(0, 0.3, size=(24, 3))
        a = project_silhouette(forward_kinematics(pose, sk, np.zeros(3)), 30.0, (64, 64), sk)
        b = project_silhouette(forward_kinematics(pose, sk, np.array([3.0, -1.0, 2.0])), 30.0, (64, 64), sk)
        np.testing.assert_array_equal(a, b)

    def test_capsule_area_matches_closed_form(self):
        radius, length = 0.1, 1.0
        sk = two_joint_skeleton(offset=(0.0, length, 0.0), radius=radius)
        mask = project_silhouette(sk.rest_positions(), 0.0, (256, 256), sk)
        ppm = 0.9 * 256 / (length + 2 * radius)
        expected = (2 * radius * length + math.pi * radius**2) * ppm**2
        assert abs(int(mask.sum()) - expected) <= 0.05 * expected

    def test_nonempty_binary_for_random_poses(self, rng):
        sk = default_skeleton()
        for _ in range(50):
            pose = rng.normal(0, 0.4, size=(24, 3))
            view = rng.uniform(0, 360)
            mask = project_silhouette(forward_kinematics(pose, sk, np.zeros(3)), view, (64, 64), sk)
            assert set(np.unique(mask)) <= {0, 1}
            assert mask.sum() > 0

    def test_degenerate_positions_error(self):
        sk = two_joint_skeleton()
        with pytest.raises(ValueError, match="degenerate"):
            project_silhouette(np.zeros((2, 3)), 0.0, (64, 64), sk)

    def test_small_image_rejected(self):
        sk = default_skeleton()
        with pytest.raises(ValueError, match="16"):
            project_silhouette(sk.rest_positions(), 0.0, (8, 8), sk)

    def test_projector_protocol_pluggable(self):
        sk = default_skeleton()
        calls = []

        def fake(positions, view, size, skeleton):
            calls.append(view)
            return np.ones(size, dtype=np.uint8)

        out = project_silhouette(sk.rest_positions(), 45.0, (16, 16), sk, projector=fake)
        assert calls == [45.0] and out.shape == (16, 16)

    def test_custom_fill(self):
        sk = default_skeleton()
        tight = CapsuleProjector(fill=0.5)(sk.rest_positions(), 0.0, (64, 64), sk)
        loose = CapsuleProjector(fill=0.9)(sk.rest_positions(), 0.0, (64, 64), sk)
        assert tight.sum() < loose.sum()


class TestCanonicalCoords:
    def test_two_joint_example(self):
        layout = rest_pose_canonical_coords(two_joint_skeleton(), 1, 1)
        assert layout.coords == ((1, 0), (0, 0))

    def test_golden_default_layout(self):
        layout = rest_pose_canonical_coords(default_skeleton(), 15, 10)
        assert list(layout.coords) == GOLDEN_LAYOUT_15x10

    def test_head_and_foot_rows(self):
        sk = default_skeleton()
        layout = rest_pose_canonical_coords(sk, 15, 10)
        coords = dict(zip(sk.joint_names, layout.coords))
        for name in ("head", "neck", "left_collar", "right_collar"):
            assert coords[name][0] <= 2
        for name in ("left_ankle", "right_ankle", "left_foot", "right_foot"):
            assert coords[name][0] >= 14

    def test_left_right_mirror(self):
        layout = rest_pose_canonical_coords(default_skeleton(), 15, 10)
        for left, right in SYMMETRIC_PAIRS:
            hl, wl = layout.coords[left]
            hr, wr = layout.coords[right]
            assert hl == hr
            assert wl + wr == 10

    def test_scale_invariance(self):
        sk = default_skeleton()
        base = rest_pose_canonical_coords(sk, 15, 10)
        for scale in (0.5, 2.0, 3.0):
            scaled = rest_pose_canonical_coords(sk.scaled(scale), 15, 10)
            assert scaled.coords == base.coords

    def test_distinct_cells_at_15x8(self):
        layout = rest_pose_canonical_coords(default_skeleton(), 15, 8)
        assert len(set(layout.coords)) == 24

    def test_grid_too_small_errors(self):
        with pytest.raises(ValueError, match="cells"):
            rest_pose_canonical_coords(default_skeleton(), 3, 3)

    def test_collision_resolution_deterministic(self):
        # two joints projecting to the same frontal cell (offset along depth)
        sk = Skeleton(
            joint_names=("a", "b", "c"),
            parent_index=(-1, 0, 1),
            bone_offset=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]]),
            capsule_radius=np.array([0.05, 0.05, 0.05]),
        )
        layout = rest_pose_canonical_coords(sk, 2, 2)
        assert len(set(layout.coords)) == 3
        again = rest_pose_canonical_coords(sk, 2, 2)
        assert layout.coords == again.coords

    def test_layout_validation(self):
        with pytest.raises(ValueError, match="duplicate"):
            CanonicalLayout(((0, 0), (0, 0)), 1, 1)
        with pytest.raises(ValueError, match="outside"):
            CanonicalLayout(((0, 5),), 1, 1)
