import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevdrive import geometry
from bevdrive.errors import ConfigError


def std_intr():
    return geometry.CameraIntrinsics.from_fov(352, 128, 2 * math.degrees(math.atan(176 / 100)))


def simple_intr():
    # fx = fy = 100, principal point at (176, 64)
    fov = math.degrees(2 * math.atan(352 / 200))
    return geometry.CameraIntrinsics(fx=100, fy=100, cx=176, cy=64, width=352, height=128,
                                     fov_deg=fov)


class TestBackproject:
    def test_principal_point_is_optical_axis(self):
        p = geometry.backproject(simple_intr(), (176, 64), 5.0)
        np.testing.assert_allclose(p, [0, 0, 5], atol=1e-12)

    def test_one_focal_length_right(self):
        p = geometry.backproject(simple_intr(), (276, 64), 5.0)
        np.testing.assert_allclose(p, [5, 0, 5], atol=1e-12)

    def test_one_focal_length_down(self):
        p = geometry.backproject(simple_intr(), (176, 164), 2.0)
        np.testing.assert_allclose(p, [0, 2, 2], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            geometry.backproject(simple_intr(), (10, 10), 0.0)
        with pytest.raises(ValueError):
            geometry.backproject(simple_intr(), (10, 10), -1.0)

    @given(st.floats(1, 351), st.floats(1, 127), st.floats(0.1, 80))
    @settings(max_examples=60, deadline=None)
    def test_project_roundtrip(self, u, v, depth):
        intr = simple_intr()
        p = geometry.backproject(intr, (u, v), depth)
        uv = geometry.project(intr, p)
        np.testing.assert_allclose(uv, [u, v], rtol=1e-9, atol=1e-9)


def random_rotation(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestRigidTransform:
    def test_identity(self):
        t = geometry.RigidTransform.identity()
        np.testing.assert_array_equal(geometry.transform_point(t, [1, 2, 3]), [1, 2, 3])

    def test_pure_translation(self):
        t = geometry.RigidTransform(np.eye(3), [0, 0, 1])
        np.testing.assert_allclose(geometry.transform_point(t, [1, 2, 3]), [1, 2, 4])

    def test_yaw_90(self):
        t = geometry.RigidTransform(geometry.rotation_z(math.pi / 2), np.zeros(3))
        np.testing.assert_allclose(geometry.transform_point(t, [1, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ConfigError):
            geometry.RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ConfigError):
            geometry.RigidTransform(r, np.zeros(3))

    @given(st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_preserves_pairwise_distances(self, seed):
        rng = np.random.default_rng(seed)
        t = geometry.RigidTransform(random_rotation(seed), rng.standard_normal(3))
        pts = rng.standard_normal((8, 3))
        moved = t.apply(pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-9)

    def test_inverse_roundtrip(self):
        t = geometry.RigidTransform(random_rotation(3), [1.0, -2.0, 0.5])
        p = np.array([0.3, 4.0, -1.0])
        np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)


class TestIntrinsics:
    def test_fov_consistency_enforced(self):
        with pytest.raises(ConfigError):
            geometry.CameraIntrinsics(fx=100, fy=100, cx=88, cy=32, width=176, height=64,
                                      fov_deg=90.0)

    def test_from_fov_roundtrip(self):
        intr = geometry.CameraIntrinsics.from_fov(176, 64, 60.0)
        derived = 2 * math.degrees(math.atan(176 / (2 * intr.fx)))
        assert abs(derived - 60.0) < 1e-9

    def test_positive_focal_required(self):
        with pytest.raises(ConfigError):
            geometry.CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10, fov_deg=60)


class TestFrustum:
    def test_paper_image_downsample_8(self):
        intr = geometry.CameraIntrinsics.from_fov(352, 128, 60.0)
        f = geometry.build_frustum(intr, geometry.default_depth_bins(), 8)
        assert (f.feature_h, f.feature_w) == (16, 44)

    def test_single_cell_principal_point(self):
        # 1x1 feature map whose cell center is the principal point
        intr = geometry.CameraIntrinsics.from_fov(16, 16, 60.0)
        f = geometry.build_frustum(intr, [4.0, 8.0], 16)
        assert (f.feature_h, f.feature_w) == (1, 1)
        np.testing.assert_allclose(f.points_cam[0, 0, 0], [0, 0, 4], atol=1e-12)
        np.testing.assert_allclose(f.points_cam[1, 0, 0], [0, 0, 8], atol=1e-12)

    def test_point_count_identity(self):
        intr = geometry.CameraIntrinsics.from_fov(64, 32, 60.0)
        bins = geometry.default_depth_bins(5, 1, 10)
        f = geometry.build_frustum(intr, bins, 16)
        assert f.points_cam.shape == (5, 2, 4, 3)

    def test_non_divisible_downsample_rejected(self):
        intr = geometry.CameraIntrinsics.from_fov(100, 64, 60.0)
        with pytest.raises(ConfigError):
            geometry.build_frustum(intr, [1.0, 2.0], 16)

    def test_points_on_backprojection_rays(self):
        intr = geometry.CameraIntrinsics.from_fov(64, 32, 70.0)
        f = geometry.build_frustum(intr, [2.0, 5.0, 9.0], 8)
        for i, d in enumerate(f.depth_bins):
            for h in range(f.feature_h):
                for w in range(f.feature_w):
                    u = (w + 0.5) * 8
                    v = (h + 0.5) * 8
                    expect = geometry.backproject(intr, (u, v), d)
                    np.testing.assert_allclose(f.points_cam[i, h, w], expect, atol=1e-12)


class TestFrustumToEgo:
    def test_identity_extrinsics(self):
        intr = geometry.CameraIntrinsics.from_fov(32, 32, 60.0)
        f = geometry.build_frustum(intr, [1.0, 3.0], 16)
        out = geometry.frustum_to_ego(f, geometry.RigidTransform.identity())
        np.testing.assert_array_equal(out, f.points_cam)

    def test_rear_camera_maps_behind(self):
        intr = geometry.CameraIntrinsics.from_fov(16, 16, 60.0)
        f = geometry.build_frustum(intr, [5.0], 16)
        rear = geometry.camera_pose(180.0, 0.0, np.zeros(3))
        out = geometry.frustum_to_ego(f, rear)
        np.testing.assert_allclose(out[0, 0, 0], [-5, 0, 0], atol=1e-12)

    def test_translation_only(self):
        intr = geometry.CameraIntrinsics.from_fov(32, 32, 60.0)
        f = geometry.build_frustum(intr, [1.0, 2.0], 16)
        base = geometry.camera_pose(0.0, 0.0, np.zeros(3))
        shifted = geometry.RigidTransform(base.rotation, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(geometry.frustum_to_ego(f, shifted),
                                   geometry.frustum_to_ego(f, base) + [1.0, 0.0, 0.0],
                                   atol=1e-12)

    def test_commutes_with_depth_permutation(self):
        # transforming then permuting the depth axis equals permuting the
        # frustum points then transforming
        intr = geometry.CameraIntrinsics.from_fov(32, 32, 60.0)
        bins = np.array([1.0, 4.0, 9.0])
        extr = geometry.camera_pose(45.0, 10.0, np.array([0.5, 0.2, 1.6]))
        f = geometry.build_frustum(intr, bins, 16)
        out = geometry.frustum_to_ego(f, extr)
        perm = [2, 0, 1]
        np.testing.assert_array_equal(extr.apply(f.points_cam[perm]), out[perm])


class TestCameraRig:
    def test_front_rig_has_three_cameras(self):
        rig = geometry.CameraRig.build("front3x60", 176, 64)
        assert len(rig) == 3
        assert all(intr.fov_deg == 60.0 for intr, _ in rig.cameras)

    def test_surround_rigs_tile_360(self):
        for kind in ("surround3x120", "surround6x60"):
            rig = geometry.CameraRig.build(kind, 176, 64)
            assert sum(intr.fov_deg for intr, _ in rig.cameras) >= 360.0 - 1e-6

    def test_insufficient_surround_fov_rejected(self):
        intr = geometry.CameraIntrinsics.from_fov(64, 32, 60.0)
        cams = tuple((intr, geometry.camera_pose(y, 0, np.zeros(3))) for y in (0, 120, 240))
        with pytest.raises(ConfigError):
            geometry.CameraRig(cameras=cams, rig_kind=geometry.RigKind.SURROUND_3X120)

    def test_empty_rig_rejected(self):
        with pytest.raises(ConfigError):
            geometry.CameraRig(cameras=(), rig_kind=geometry.RigKind.FRONT_3X60)

    def test_camera_height_in_extrinsics(self):
        rig = geometry.CameraRig.build("surround6x60", 64, 32, mount_height=1.6)
        for _intr, extr in rig.cameras:
            assert extr.translation[2] == 1.6
