"""Pinhole camera models, rigid transforms and frustum construction.

Conventions (fixed so that tests can be bit-exact):
  camera frame: z forward, x right, y down
  ego frame:    x forward, y left, z up, origin at the rear-axle center
Pixel coordinates are continuous, u along width, v along height; the
principal point of a constructed camera sits at the image center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError

_ORTHO_TOL = 1e-9
_FOV_TOL = 1e-6  # radians


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    fov_deg: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(f"principal point ({self.cx},{self.cy}) outside {self.width}x{self.height}")
        stated = math.radians(self.fov_deg)
        derived = 2.0 * math.atan(self.width / (2.0 * self.fx))
        if abs(stated - derived) > _FOV_TOL:
            raise ConfigError(f"fov_deg={self.fov_deg} inconsistent with fx={self.fx}, width={self.width}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        """Square-pixel camera with the given horizontal field of view."""
        fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, fov_deg=fov_deg)

    def matrix(self) -> np.ndarray:
        k = np.zeros((3, 3))
        k[0, 0], k[1, 1] = self.fx, self.fy
        k[0, 2], k[1, 2] = self.cx, self.cy
        k[2, 2] = 1.0
        return k


@dataclass(frozen=True)
class RigidTransform:
    """rotation (3,3) orthonormal with det +1, translation (3,) meters."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ConfigError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ConfigError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """rotation @ p + translation over the trailing axis of (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.apply(p)


def rotation_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Base camera->ego orientation for a forward-looking, level camera:
# cam z -> ego x, cam x -> ego -y, cam y -> ego -z.
_CAM_TO_EGO_BASE = np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]])


def camera_pose(yaw_deg: float, pitch_deg: float, position: np.ndarray) -> RigidTransform:
    """Camera->ego transform; yaw about ego z (left positive), pitch tilts down."""
    p = math.radians(pitch_deg)
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, math.cos(p), math.sin(p)],
                   [0.0, -math.sin(p), math.cos(p)]])  # R_x(-pitch): optical axis tilts toward cam +y (down)
    rot = rotation_z(math.radians(yaw_deg)) @ _CAM_TO_EGO_BASE @ rx
    return RigidTransform(rot, np.asarray(position, dtype=np.float64))


class RigKind(str, Enum):
    FRONT_3X60 = "front3x60"
    SURROUND_3X120 = "surround3x120"
    SURROUND_6X60 = "surround6x60"


_RIG_LAYOUTS = {
    RigKind.FRONT_3X60: (60.0, [-60.0, 0.0, 60.0]),
    RigKind.SURROUND_3X120: (120.0, [0.0, 120.0, 240.0]),
    RigKind.SURROUND_6X60: (60.0, [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]),
}


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple  # of (CameraIntrinsics, RigidTransform camera->ego)
    rig_kind: RigKind

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise ConfigError("camera rig must hold at least one camera")
        if self.rig_kind in (RigKind.SURROUND_3X120, RigKind.SURROUND_6X60):
            total = sum(intr.fov_deg for intr, _ in self.cameras)
            if total < 360.0 - 1e-6:
                raise ConfigError(f"surround rig FOVs sum to {total} deg, cannot tile 360")

    @classmethod
    def build(cls, kind: RigKind | str, width: int, height: int,
              mount_height: float = 1.6, pitch_deg: float = 10.0) -> "CameraRig":
        kind = RigKind(kind)
        fov, yaws = _RIG_LAYOUTS[kind]
        intr = CameraIntrinsics.from_fov(width, height, fov)
        position = np.array([0.0, 0.0, mount_height])
        cams = tuple((intr, camera_pose(yaw, pitch_deg, position)) for yaw in yaws)
        return cls(cameras=cams, rig_kind=kind)

    def __len__(self) -> int:
        return len(self.cameras)


def backproject(intr: CameraIntrinsics, pixel, depth) -> np.ndarray:
    """Back-project pixel(s) (u, v) at z-depth(s) into the camera frame.

    Accepts scalars or arrays broadcasting over the leading axes; depth must
    be strictly positive.
    """
    u, v = pixel
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("backproject requires depth > 0")
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    return np.stack(np.broadcast_arrays(x, y, d * np.ones_like(x)), axis=-1)


def project(intr: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Perspective projection of camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    u = p[..., 0] / z * intr.fx + intr.cx
    v = p[..., 1] / z * intr.fy + intr.cy
    return np.stack([u, v], axis=-1)


def default_depth_bins(n: int = 16, near: float = 1.0, far: float = 33.0) -> np.ndarray:
    return np.linspace(near, far, n)


@dataclass(frozen=True)
class FrustumGrid:
    depth_bins: np.ndarray       # (n,), strictly increasing, > 0
    feature_h: int
    feature_w: int
    points_cam: np.ndarray = field(repr=False)  # (n, feature_h, feature_w, 3)

    def __post_init__(self):
        d = np.asarray(self.depth_bins, dtype=np.float64)
        if d.ndim != 1 or np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ConfigError("depth bins must be strictly increasing and positive")
        object.__setattr__(self, "depth_bins", d)


def build_frustum(intr: CameraIntrinsics, depth_bins, downsample: int) -> FrustumGrid:
    """Back-project every feature-cell center across all depth bins.

    Feature cells are the image downsampled by `downsample`, sampled at cell
    centers: u = (w + 0.5) * downsample.
    """
    if intr.width % downsample or intr.height % downsample:
        raise ConfigError(f"downsample {downsample} does not divide "
                          f"{intr.width}x{intr.height}")
    d = np.asarray(depth_bins, dtype=np.float64)
    fh = intr.height // downsample
    fw = intr.width // downsample
    us = (np.arange(fw) + 0.5) * downsample
    vs = (np.arange(fh) + 0.5) * downsample
    vv, uu = np.meshgrid(vs, us, indexing="ij")            # (fh, fw)
    uu = np.broadcast_to(uu, (len(d), fh, fw))
    vv = np.broadcast_to(vv, (len(d), fh, fw))
    dd = np.broadcast_to(d[:, None, None], (len(d), fh, fw))
    points = backproject(intr, (uu, vv), dd)
    return FrustumGrid(depth_bins=d, feature_h=fh, feature_w=fw, points_cam=points)


def frustum_to_ego(frustum: FrustumGrid, extr: RigidTransform) -> np.ndarray:
    """Map all frustum points into the ego frame; same (n, fh, fw, 3) shape."""
    return extr.apply(frustum.points_cam)
