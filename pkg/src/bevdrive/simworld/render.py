"""Synthetic pinhole rendering of the 2D world.

Flat-ground perspective rasterization: per-pixel rays are intersected with
the ground plane and colored from a precomputed road/marking texture; actors
are upright cuboids projected and filled in painter's order (far to near).
Everything is deterministic for a fixed world state.
"""
from __future__ import annotations

import math

import cv2
import numpy as np

from .. import geometry
from .maps import MapSpec

TEXTURE_RES = 0.25  # meters per texel

SKY = np.array([0.53, 0.78, 0.92], np.float32)
GRASS = np.array([0.33, 0.51, 0.27], np.float32)
ROAD = np.array([0.27, 0.27, 0.29], np.float32)
MARKING = np.array([0.95, 0.95, 0.90], np.float32)
VEHICLE = np.array([0.85, 0.10, 0.10], np.float32)
PEDESTRIAN = np.array([0.95, 0.60, 0.05], np.float32)

VEHICLE_HEIGHT = 1.5
PEDESTRIAN_HEIGHT = 1.8
NEAR_PLANE = 0.2
ACTOR_CULL_DIST = 80.0

_PALETTE = np.stack([SKY, GRASS, ROAD, MARKING])  # class index -> color


class RenderContext:
    """Per-map rasterization caches: ground texture and per-camera rays."""

    def __init__(self, map_spec: MapSpec):
        self.map_spec = map_spec
        xmin, ymin, xmax, ymax = map_spec.bounds
        self.origin = np.array([xmin, ymin])
        w = int(math.ceil((xmax - xmin) / TEXTURE_RES))
        h = int(math.ceil((ymax - ymin) / TEXTURE_RES))
        road = np.zeros((h, w), np.uint8)
        marking = np.zeros((h, w), np.uint8)

        def px(p):
            return (int(round((p[0] - xmin) / TEXTURE_RES)),
                    int(round((p[1] - ymin) / TEXTURE_RES)))

        road_thick = max(int(round(map_spec.street_width / TEXTURE_RES)), 1)
        edge_off = map_spec.street_width / 2.0 - 0.15
        for p0, p1 in map_spec.streets:
            cv2.line(road, px(p0), px(p1), 255, road_thick)
        for p0, p1 in map_spec.streets:
            d = (p1 - p0) / np.linalg.norm(p1 - p0)
            n = np.array([-d[1], d[0]])
            cv2.line(marking, px(p0), px(p1), 255, 2)  # center divider
            for s in (-1.0, 1.0):
                cv2.line(marking, px(p0 + n * s * edge_off), px(p1 + n * s * edge_off), 255, 1)
        self.road = road
        self.marking = marking
        self._rays = {}

    def rays(self, intr: geometry.CameraIntrinsics) -> np.ndarray:
        """Camera-frame ray directions through pixel centers, (H*W, 3)."""
        key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
        if key not in self._rays:
            u = np.arange(intr.width) + 0.5
            v = np.arange(intr.height) + 0.5
            vv, uu = np.meshgrid(v, u, indexing="ij")
            d = np.stack([(uu - intr.cx) / intr.fx,
                          (vv - intr.cy) / intr.fy,
                          np.ones_like(uu)], axis=-1)
            self._rays[key] = d.reshape(-1, 3)
        return self._rays[key]

    def ground_class(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Texture class (1 grass / 2 road / 3 marking) at world points."""
        ix = ((x - self.origin[0]) / TEXTURE_RES).astype(np.int64)
        iy = ((y - self.origin[1]) / TEXTURE_RES).astype(np.int64)
        h, w = self.road.shape
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        ix = np.clip(ix, 0, w - 1)
        iy = np.clip(iy, 0, h - 1)
        cls = np.ones(x.shape, np.uint8)
        on_road = inside & (self.road[iy, ix] > 0)
        cls[on_road] = 2
        cls[on_road & (self.marking[iy, ix] > 0)] = 3
        return cls


def _actor_corners(actor) -> np.ndarray:
    """World-frame corners of the actor's upright cuboid, (8, 3)."""
    hx, hy = actor.half_extents
    c, s = math.cos(actor.heading), math.sin(actor.heading)
    rot = np.array([[c, -s], [s, c]])
    foot = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]]) @ rot.T + actor.position
    height = PEDESTRIAN_HEIGHT if actor.kind == "pedestrian" else VEHICLE_HEIGHT
    low = np.concatenate([foot, np.zeros((4, 1))], axis=1)
    high = np.concatenate([foot, np.full((4, 1), height)], axis=1)
    return np.concatenate([low, high], axis=0)


_BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0),
              (4, 5), (5, 6), (6, 7), (7, 4),
              (0, 4), (1, 5), (2, 6), (3, 7)]


def _visible_points(pts_cam: np.ndarray) -> np.ndarray:
    """Corners in front of the near plane plus edge/near-plane intersections."""
    front = pts_cam[:, 2] > NEAR_PLANE
    keep = [pts_cam[front]]
    for i, j in _BOX_EDGES:
        zi, zj = pts_cam[i, 2], pts_cam[j, 2]
        if (zi > NEAR_PLANE) != (zj > NEAR_PLANE):
            t = (NEAR_PLANE - zi) / (zj - zi)
            keep.append((pts_cam[i] + t * (pts_cam[j] - pts_cam[i]))[None])
    return np.concatenate(keep, axis=0)


def render_camera(world_state, intr: geometry.CameraIntrinsics,
                  extr: geometry.RigidTransform,
                  ctx: RenderContext | None = None) -> np.ndarray:
    """Render one camera view of the world, returning (3, H, W) in [0, 1]."""
    if ctx is None:
        ctx = RenderContext(world_state.map_spec)
    ego = world_state.ego
    cth, sth = math.cos(ego.heading), math.sin(ego.heading)
    r_ego = np.array([[cth, -sth, 0.0], [sth, cth, 0.0], [0.0, 0.0, 1.0]])
    r_cam_world = r_ego @ extr.rotation
    cam_pos = np.array([ego.position[0], ego.position[1], 0.0]) + r_ego @ extr.translation

    dirs = ctx.rays(intr) @ r_cam_world.T          # (H*W, 3) world-frame rays
    dz = dirs[:, 2]
    ground = dz < -1e-9
    t = np.where(ground, -cam_pos[2] / np.where(ground, dz, -1.0), 0.0)
    gx = cam_pos[0] + t * dirs[:, 0]
    gy = cam_pos[1] + t * dirs[:, 1]

    cls = np.zeros(dirs.shape[0], np.uint8)        # 0 = sky
    cls[ground] = ctx.ground_class(gx[ground], gy[ground])
    img = _PALETTE[cls].reshape(intr.height, intr.width, 3).copy()

    r_wc = r_cam_world.T
    actors = sorted(world_state.traffic,
                    key=lambda a: -float(np.hypot(a.position[0] - cam_pos[0],
                                                  a.position[1] - cam_pos[1])))
    for actor in actors:
        dist = math.hypot(actor.position[0] - cam_pos[0], actor.position[1] - cam_pos[1])
        if dist > ACTOR_CULL_DIST:
            continue
        pts_cam = (_actor_corners(actor) - cam_pos) @ r_wc.T
        if not np.any(pts_cam[:, 2] > NEAR_PLANE):
            continue
        vis = _visible_points(pts_cam)
        u = vis[:, 0] / vis[:, 2] * intr.fx + intr.cx - 0.5
        v = vis[:, 1] / vis[:, 2] * intr.fy + intr.cy - 0.5
        if np.all(u < -1) or np.all(u > intr.width) or np.all(v < -1) or np.all(v > intr.height):
            continue
        pix = np.stack([u, v], axis=1)
        hull = cv2.convexHull(np.round(pix).astype(np.int32))
        color = PEDESTRIAN if actor.kind == "pedestrian" else VEHICLE
        cv2.fillConvexPoly(img, hull, color.tolist())
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
