import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from astf import bvh
from astf.bvh import (
    BVHError,
    RawMotion,
    euler_to_rotmat,
    forward_kinematics,
    parse_bvh,
    rotmat_to_euler,
    select_joints,
    write_bvh,
)
from synthdata import chain_skeleton, smooth_motion

TWO_JOINT_FIXTURE = """\
HIERARCHY
ROOT Hips
{
  OFFSET 0.0 0.0 0.0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0.0 5.5 0.0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0.0 2.25 0.0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.033333
1.0 2.0 3.0 10.0 20.0 30.0 5.0 -5.0 15.0
1.5 2.5 3.5 12.0 22.0 32.0 6.0 -6.0 16.0
"""

FIXTURE_FRAMES = np.array(
    [
        [1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 5.0, -5.0, 15.0],
        [1.5, 2.5, 3.5, 12.0, 22.0, 32.0, 6.0, -6.0, 16.0],
    ]
)


class TestParse:
    def test_hand_built_fixture(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        assert [j.name for j in m.skeleton.joints] == ["Hips", "Spine"]
        assert m.skeleton.joints[0].parent is None
        assert m.skeleton.joints[1].parent == 0
        assert m.skeleton.joints[0].channels == (
            "Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation",
        )
        assert np.allclose(m.skeleton.joints[1].offset, [0.0, 5.5, 0.0])
        assert np.allclose(m.skeleton.joints[1].end_offset, [0.0, 2.25, 0.0])
        assert m.frames.shape == (2, 9)
        assert np.array_equal(m.frames, FIXTURE_FRAMES)
        assert m.frame_time == pytest.approx(0.033333)

    def test_frame_count_mismatch(self):
        bad = TWO_JOINT_FIXTURE.replace("Frames: 2", "Frames: 3")
        with pytest.raises(BVHError, match="frame-count mismatch"):
            parse_bvh(bad)

    def test_unknown_channel_tag_with_line(self):
        bad = TWO_JOINT_FIXTURE.replace("Xrotation Yrotation\n    End", "Wrotation Yrotation\n    End")
        with pytest.raises(BVHError, match=r"line \d+.*Wrotation"):
            parse_bvh(bad)

    def test_unbalanced_braces(self):
        bad = TWO_JOINT_FIXTURE.replace("}\n}\nMOTION", "}\nMOTION")
        with pytest.raises(BVHError):
            parse_bvh(bad)

    def test_non_numeric_datum(self):
        bad = TWO_JOINT_FIXTURE.replace("OFFSET 0.0 5.5 0.0", "OFFSET 0.0 oops 0.0")
        with pytest.raises(BVHError, match=r"line 8.*oops"):
            parse_bvh(bad)


class TestRoundTrip:
    def test_fixture_round_trip(self):
        m1 = parse_bvh(TWO_JOINT_FIXTURE)
        m2 = parse_bvh(write_bvh(m1))
        assert m1.skeleton.equals(m2.skeleton)
        assert np.allclose(m1.frames, m2.frames, atol=1e-6)
        assert m2.frame_time == m1.frame_time

    def test_frame_time_preserved_exactly(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        m.frame_time = 1.0 / 120.0
        assert parse_bvh(write_bvh(m)).frame_time == 1.0 / 120.0

    def test_end_site_emitted_for_leaves(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        assert "End Site" in write_bvh(m)

    def test_synthetic_round_trip(self):
        rng = np.random.default_rng(0)
        raw = smooth_motion(chain_skeleton(4), 30, rng)
        again = parse_bvh(write_bvh(raw))
        assert raw.skeleton.equals(again.skeleton)
        assert np.abs(raw.frames - again.frames).max() < 1e-6

    @given(
        st.lists(
            st.floats(min_value=-500.0, max_value=500.0, allow_nan=False),
            min_size=18,
            max_size=18,
        )
    )
    @settings(max_examples=30, deadline=None)
    def test_round_trip_within_tolerance(self, values):
        sk = parse_bvh(TWO_JOINT_FIXTURE).skeleton
        frames = np.array(values).reshape(2, 9)
        m = RawMotion(sk, 0.05, frames)
        again = parse_bvh(write_bvh(m))
        assert np.abs(again.frames - frames).max() <= 1e-6


class TestSelectJoints:
    def test_select_all_is_identity(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        out = select_joints(m, ["Hips", "Spine"])
        assert out.skeleton.equals(m.skeleton)
        assert np.array_equal(out.frames, m.frames)

    def test_offset_accumulation_and_fk_oracle(self):
        sk = chain_skeleton(3)  # root -> j1 -> j2
        rng = np.random.default_rng(1)
        raw = smooth_motion(sk, 4, rng)
        # Zero out j1's rotation so dropping it preserves j2's world position.
        slices = sk.channel_slices()
        raw.frames[:, slices[1]] = 0.0
        reduced = select_joints(raw, ["root", "j2"])
        expected = sk.joints[1].offset + sk.joints[2].offset
        assert np.allclose(reduced.skeleton.joints[1].offset, expected)

        frame = 2
        full_pos = forward_kinematics(
            sk, bvh.frame_rotations(raw, frame), bvh.frame_root_position(raw, frame)
        )
        red_pos = forward_kinematics(
            reduced.skeleton,
            bvh.frame_rotations(reduced, frame),
            bvh.frame_root_position(reduced, frame),
        )
        assert np.allclose(red_pos[1], full_pos[2], atol=1e-12)

    def test_single_joint_reroot(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        out = select_joints(m, ["Spine"])
        assert out.skeleton.n_joints == 1
        assert out.skeleton.joints[0].parent is None
        assert out.frames.shape == (2, 3)
        out.validate()

    def test_unknown_name(self):
        m = parse_bvh(TWO_JOINT_FIXTURE)
        with pytest.raises(BVHError, match="unknown joint"):
            select_joints(m, ["Nope"])

    def test_disconnected_selection(self):
        sk = chain_skeleton(2)
        sk.joints.append(bvh.Joint("arm", 0, np.array([1.0, 0.0, 0.0]), ("Zrotation", "Xrotation", "Yrotation")))
        rng = np.random.default_rng(2)
        raw = smooth_motion(sk, 3, rng)
        with pytest.raises(BVHError, match="disconnect"):
            select_joints(raw, ["j1", "arm"])

    def test_reduced_skeleton_round_trips(self):
        rng = np.random.default_rng(3)
        raw = smooth_motion(chain_skeleton(4), 6, rng)
        reduced = select_joints(raw, ["root", "j2", "j3"])
        again = parse_bvh(write_bvh(reduced))
        assert reduced.skeleton.equals(again.skeleton)
        assert np.abs(reduced.frames - again.frames).max() < 1e-6


class TestEuler:
    def test_zero_angles_identity(self):
        assert np.allclose(euler_to_rotmat([0, 0, 0], "ZXY"), np.eye(3), atol=0)

    def test_ninety_about_z(self):
        r = euler_to_rotmat([90.0, 0.0, 0.0], "ZXY")
        assert np.allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)

    def test_non_commutativity(self):
        r_zx = euler_to_rotmat([90.0, 90.0, 0.0], "ZXY")
        r_xz = euler_to_rotmat([90.0, 90.0, 0.0], "XZY")
        assert not np.allclose(r_zx, r_xz)
        for r in (r_zx, r_xz):
            assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)

    @pytest.mark.parametrize("order", ["XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX"])
    def test_matches_scipy_intrinsic(self, order):
        rng = np.random.default_rng(hash(order) % 2**32)
        for _ in range(20):
            angles = rng.uniform(-180, 180, size=3)
            mine = euler_to_rotmat(angles, order)
            ref = Rotation.from_euler(order, angles, degrees=True).as_matrix()
            assert np.allclose(mine, ref, atol=1e-12)

    @pytest.mark.parametrize("order", ["XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX"])
    def test_euler_extraction_round_trip(self, order):
        rng = np.random.default_rng(hash(order) % 2**31)
        for _ in range(30):
            angles = rng.uniform(-170, 170, size=3)
            r = euler_to_rotmat(angles, order)
            back = rotmat_to_euler(r, order)
            assert np.allclose(euler_to_rotmat(back, order), r, atol=1e-9)

    def test_orthonormality_property(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            r = euler_to_rotmat(rng.uniform(-360, 360, 3), "ZXY")
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
