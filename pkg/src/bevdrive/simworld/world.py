"""Kinematic driving world: the environment's transition and observation maps.

A kinematic-bicycle ego, scripted lane-following traffic and sidewalk
pedestrians on procedural maps, oriented-box collision detection, synthetic
surround-camera rendering, and the three-branch driving reward. Episodes are
a pure function of (seed, map_id, congestion, action sequence).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import geometry
from ..errors import ConfigError, ContractViolation
from .maps import MapSpec, generate_map
from .render import RenderContext, render_camera

EPISODE_LEN = 128

EGO_HALF_EXTENTS = (2.2, 0.9)
VEHICLE_HALF_EXTENTS = (2.2, 0.9)
PEDESTRIAN_HALF_EXTENTS = (0.25, 0.25)


class Congestion(str, Enum):
    LOW = "low"
    HIGH = "high"


@dataclass
class RewardParams:
    collision_penalty: float = 100.0     # k_c
    speed_limit: float = 8.0             # v_m, m/s
    waypoint_reach_radius: float = 2.0   # m
    denom_floor: float = 0.25            # m^2, floors the squared distance

    def __post_init__(self):
        for name in ("collision_penalty", "speed_limit", "waypoint_reach_radius", "denom_floor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"reward parameter {name} must be positive")


@dataclass
class SimParams:
    dt: float = 0.1
    image_width: int = 176
    image_height: int = 64
    rig_kind: str = geometry.RigKind.SURROUND_6X60
    camera_height: float = 1.6
    camera_pitch_deg: float = 10.0
    render_images: bool = True
    vehicles_low: int = 8
    pedestrians_low: int = 8
    wheelbase: float = 2.7
    max_accel: float = 3.0
    max_brake: float = 6.0
    max_steer_deg: float = 35.0
    reward: RewardParams = field(default_factory=RewardParams)


@dataclass
class ActorState:
    position: np.ndarray                 # (2,) meters
    heading: float                       # radians
    speed: float                         # m/s, >= 0
    half_extents: tuple                  # (hx, hy) meters
    kind: str                            # ego | vehicle | pedestrian


@dataclass
class WorldState:
    ego: ActorState
    traffic: list
    next_waypoint_index: int
    step_count: int
    collided: bool
    map_spec: MapSpec
    next_waypoint: np.ndarray
    yaw_rate: float = 0.0
    prev_accel: float = 0.0
    prev_steer: float = 0.0


@dataclass
class Observation:
    images: np.ndarray                   # (num_cameras, 3, H, W) in [0, 1]
    road_features: np.ndarray            # (9,)
    vehicle_features: np.ndarray         # (4,)
    nav_features: np.ndarray             # (5,)


@dataclass
class Action:
    accel: float                         # [-1, 1]; negative values brake
    steer: float                         # [-1, 1]; positive steers left


def motion_similarity(state: WorldState) -> float:
    """Cosine between the motion direction and the vector to the next
    waypoint; defined as 0 for a stationary ego or a reached waypoint."""
    ego = state.ego
    if ego.speed <= 0.0:
        return 0.0
    to_wp = state.next_waypoint - ego.position
    norm = float(np.linalg.norm(to_wp))
    if norm < 1e-12:
        return 0.0
    return float((math.cos(ego.heading) * to_wp[0] + math.sin(ego.heading) * to_wp[1]) / norm)


def reward_fn(state: WorldState, params: RewardParams) -> float:
    """Three-branch driving reward; collision dominates, overspeed next."""
    if state.collided:
        return -params.collision_penalty
    v = state.ego.speed
    if v - params.speed_limit > 0.0:
        return params.speed_limit - v
    sim = motion_similarity(state)
    d2 = float(np.sum((state.ego.position - state.next_waypoint) ** 2))
    return 4.0 * v * sim / max(d2, params.denom_floor)


def _obb_overlap(pa, ha, ea, pb, hb, eb) -> bool:
    """Separating-axis test for two oriented 2D boxes (strict separation)."""
    ca, sa = math.cos(ha), math.sin(ha)
    cb, sb = math.cos(hb), math.sin(hb)
    axes_a = ((ca, sa), (-sa, ca))
    axes_b = ((cb, sb), (-sb, cb))
    dx, dy = pb[0] - pa[0], pb[1] - pa[1]
    for ux, uy in axes_a + axes_b:
        ra = ea[0] * abs(ux * ca + uy * sa) + ea[1] * abs(-ux * sa + uy * ca)
        rb = eb[0] * abs(ux * cb + uy * sb) + eb[1] * abs(-ux * sb + uy * cb)
        if abs(ux * dx + uy * dy) > ra + rb:
            return False
    return True


class _Vehicle:
    """Scripted constant-speed lane follower with random junction choices."""

    def __init__(self, lane_id: int, s: float, speed: float, rng):
        self.lane_id = lane_id
        self.s = s
        self.speed = speed
        self.rng = rng

    def advance(self, dt: float, lanes):
        self.s += self.speed * dt
        lane = lanes[self.lane_id]
        while self.s > lane.length:
            if not lane.successors:
                self.s = lane.length
                return
            self.s -= lane.length
            self.lane_id = int(lane.successors[self.rng.integers(len(lane.successors))])
            lane = lanes[self.lane_id]

    def actor(self, lanes) -> ActorState:
        lane = lanes[self.lane_id]
        return ActorState(position=lane.point_at(self.s), heading=lane.heading_at(self.s),
                          speed=self.speed, half_extents=VEHICLE_HALF_EXTENTS, kind="vehicle")


class _Pedestrian:
    """Walks back and forth along a straight patrol segment."""

    def __init__(self, p0: np.ndarray, p1: np.ndarray, speed: float, phase: float):
        self.p0 = np.asarray(p0, float)
        self.p1 = np.asarray(p1, float)
        self.length = float(np.linalg.norm(self.p1 - self.p0))
        self.speed = speed
        self.u = phase % (2.0 * self.length)

    def advance(self, dt: float):
        self.u = (self.u + self.speed * dt) % (2.0 * self.length)

    def actor(self) -> ActorState:
        forward = self.u <= self.length
        frac = (self.u if forward else 2.0 * self.length - self.u) / self.length
        pos = self.p0 + frac * (self.p1 - self.p0)
        d = (self.p1 - self.p0) if forward else (self.p0 - self.p1)
        return ActorState(position=pos, heading=math.atan2(d[1], d[0]),
                          speed=self.speed, half_extents=PEDESTRIAN_HALF_EXTENTS,
                          kind="pedestrian")


_MAP_CACHE: dict = {}


def _cached_map(map_id: int):
    if map_id not in _MAP_CACHE:
        spec = generate_map(map_id)
        _MAP_CACHE[map_id] = (spec, RenderContext(spec))
    return _MAP_CACHE[map_id]


class DrivingWorld:
    """One simulated episode owner; all mutation through reset/step."""

    def __init__(self, params: SimParams | None = None):
        self.params = params or SimParams()
        self.rig = geometry.CameraRig.build(
            self.params.rig_kind, self.params.image_width, self.params.image_height,
            mount_height=self.params.camera_height, pitch_deg=self.params.camera_pitch_deg)
        self.state: WorldState | None = None
        self.done = True
        self._vehicles: list[_Vehicle] = []
        self._pedestrians: list[_Pedestrian] = []
        self._trace: list[dict] = []
        self._ctx: RenderContext | None = None
        self._route_cumlen: np.ndarray | None = None
        self._route_curvature: np.ndarray | None = None

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, seed: int, map_id: int, congestion: Congestion | str) -> Observation:
        congestion = Congestion(congestion)
        map_spec, ctx = _cached_map(map_id)
        self.map_spec = map_spec
        self._ctx = ctx
        self._route_cumlen = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(map_spec.waypoints, axis=0), axis=1))])
        headings = np.arctan2(np.diff(map_spec.waypoints[:, 1]), np.diff(map_spec.waypoints[:, 0]))
        dh = np.diff(headings)
        dh = np.arctan2(np.sin(dh), np.cos(dh))
        seg = np.diff(self._route_cumlen)
        self._route_curvature = np.concatenate([[0.0], dh / np.maximum(seg[1:], 1e-9), [0.0]])

        rng = np.random.default_rng([int(seed), int(map_id), 0 if congestion == Congestion.LOW else 1])
        wps = map_spec.waypoints
        ego_heading = math.atan2(wps[1, 1] - wps[0, 1], wps[1, 0] - wps[0, 0])
        ego = ActorState(position=wps[0].copy(), heading=ego_heading, speed=0.0,
                         half_extents=EGO_HALF_EXTENTS, kind="ego")

        mult = 1 if congestion == Congestion.LOW else 2
        self._vehicles = self._spawn_vehicles(rng, self.params.vehicles_low * mult, ego)
        self._pedestrians = self._spawn_pedestrians(rng, self.params.pedestrians_low * mult)

        self.state = WorldState(ego=ego, traffic=self._traffic_actors(),
                                next_waypoint_index=1, step_count=0, collided=False,
                                map_spec=map_spec, next_waypoint=wps[1].copy())
        self.done = False
        self._trace = []
        return self.observe()

    def _spawn_vehicles(self, rng, count: int, ego: ActorState) -> list:
        lane_ids = self.map_spec.drivable_lane_ids()
        vehicles = []
        for _ in range(count):
            for _attempt in range(25):
                lane_id = int(lane_ids[rng.integers(len(lane_ids))])
                lane = self.map_spec.lanes[lane_id]
                s = float(rng.uniform(0.0, lane.length))
                pos = lane.point_at(s)
                if np.linalg.norm(pos - ego.position) < 15.0:
                    continue
                if any(np.linalg.norm(pos - v.actor(self.map_spec.lanes).position) < 7.0
                       for v in vehicles):
                    continue
                speed = float(rng.uniform(2.0, 6.0))
                child = np.random.default_rng(int(rng.integers(2 ** 62)))
                vehicles.append(_Vehicle(lane_id, s, speed, child))
                break
        return vehicles

    def _spawn_pedestrians(self, rng, count: int) -> list:
        peds = []
        crossings = self.map_spec.crossings
        sidewalks = self.map_spec.sidewalks
        for _ in range(count):
            use_crossing = len(crossings) > 0 and rng.random() < 0.5
            if use_crossing:
                p0, p1 = crossings[int(rng.integers(len(crossings)))]
            else:
                a, b = sidewalks[int(rng.integers(len(sidewalks)))]
                d = b - a
                length = float(np.linalg.norm(d))
                span = min(25.0, length)
                u0 = float(rng.uniform(0.0, max(length - span, 1e-6)))
                p0 = a + d / length * u0
                p1 = a + d / length * (u0 + span)
            speed = float(rng.uniform(0.5, 1.5))
            phase = float(rng.uniform(0.0, 2.0 * float(np.linalg.norm(np.asarray(p1) - np.asarray(p0)))))
            peds.append(_Pedestrian(p0, p1, speed, phase))
        return peds

    def _traffic_actors(self) -> list:
        lanes = self.map_spec.lanes
        return [v.actor(lanes) for v in self._vehicles] + [p.actor() for p in self._pedestrians]

    # -- stepping ------------------------------------------------------------

    def step(self, action: Action):
        if self.done:
            raise ContractViolation("step called on a finished episode")
        p = self.params
        state = self.state
        accel_cmd = float(np.clip(action.accel, -1.0, 1.0))
        steer_cmd = float(np.clip(action.steer, -1.0, 1.0))

        ego = state.ego
        a = accel_cmd * (p.max_accel if accel_cmd >= 0 else p.max_brake)
        v = max(0.0, ego.speed + a * p.dt)
        delta = steer_cmd * math.radians(p.max_steer_deg)
        heading = ego.heading + (v / p.wheelbase) * math.tan(delta) * p.dt
        pos = ego.position + v * p.dt * np.array([math.cos(heading), math.sin(heading)])
        state.yaw_rate = (heading - ego.heading) / p.dt
        ego.position, ego.heading, ego.speed = pos, heading, v
        state.prev_accel, state.prev_steer = accel_cmd, steer_cmd

        for veh in self._vehicles:
            veh.advance(p.dt, self.map_spec.lanes)
        for ped in self._pedestrians:
            ped.advance(p.dt)
        state.traffic = self._traffic_actors()

        state.collided = any(
            _obb_overlap(ego.position, ego.heading, ego.half_extents,
                         t.position, t.heading, t.half_extents)
            for t in state.traffic)

        wps = self.map_spec.waypoints
        radius = p.reward.waypoint_reach_radius
        while (state.next_waypoint_index < len(wps) - 1
               and np.linalg.norm(ego.position - wps[state.next_waypoint_index]) < radius):
            state.next_waypoint_index += 1
        state.next_waypoint = wps[state.next_waypoint_index].copy()

        state.step_count += 1
        reward = reward_fn(state, p.reward)
        self.done = state.collided or state.step_count >= EPISODE_LEN
        info = {
            "success": self.done and not state.collided,
            "collision": state.collided,
            "similarity": motion_similarity(state),
            "waypoint_distance": float(np.linalg.norm(ego.position - state.next_waypoint)),
            "speed": v,
        }
        self._trace.append({
            "step": state.step_count, "x": float(ego.position[0]), "y": float(ego.position[1]),
            "heading": float(ego.heading), "speed": float(v),
            "accel": accel_cmd, "steer": steer_cmd,
            "reward": float(reward), "done": bool(self.done),
        })
        return self.observe(), float(reward), self.done, info

    def export_trace(self, path):
        with open(path, "w") as fh:
            for rec in self._trace:
                fh.write(json.dumps(rec) + "\n")

    # -- observation ---------------------------------------------------------

    def observe(self) -> Observation:
        n_cams = len(self.rig)
        h, w = self.params.image_height, self.params.image_width
        if self.params.render_images:
            images = np.stack([render_camera(self.state, intr, extr, self._ctx)
                               for intr, extr in self.rig.cameras])
        else:
            images = np.zeros((n_cams, 3, h, w), np.float32)
        road, veh, nav = assemble_features(self.state, self._route_cumlen, self._route_curvature)
        return Observation(images=images, road_features=road,
                           vehicle_features=veh, nav_features=nav)

    def ground_truth_bev_mask(self, grid_spec) -> np.ndarray:
        return ground_truth_bev_mask(self.state, grid_spec)


def _project_to_route(wps: np.ndarray, cumlen: np.ndarray, p: np.ndarray):
    a, b = wps[:-1], wps[1:]
    ab = b - a
    ab2 = np.sum(ab * ab, axis=1)
    t = np.clip(np.sum((p - a) * ab, axis=1) / np.maximum(ab2, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * ab
    d2 = np.sum((p - proj) ** 2, axis=1)
    k = int(np.argmin(d2))
    s = float(cumlen[k] + t[k] * math.sqrt(ab2[k]))
    return k, proj[k], s, math.sqrt(float(d2[k]))


def assemble_features(state: WorldState, route_cumlen=None, route_curvature=None):
    """Road (9), vehicle (4) and navigation (5) feature vectors."""
    ms = state.map_spec
    wps = ms.waypoints
    if route_cumlen is None:
        route_cumlen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(wps, axis=0), axis=1))])
    if route_curvature is None:
        headings = np.arctan2(np.diff(wps[:, 1]), np.diff(wps[:, 0]))
        dh = np.diff(headings)
        dh = np.arctan2(np.sin(dh), np.cos(dh))
        seg = np.diff(route_cumlen)
        route_curvature = np.concatenate([[0.0], dh / np.maximum(seg[1:], 1e-9), [0.0]])

    ego = state.ego
    k, proj, s, _ = _project_to_route(wps, route_cumlen, ego.position)
    seg_dir = wps[k + 1] - wps[k]
    seg_dir = seg_dir / max(np.linalg.norm(seg_dir), 1e-12)
    lateral = float(seg_dir[0] * (ego.position[1] - wps[k, 1])
                    - seg_dir[1] * (ego.position[0] - wps[k, 0]))
    heading_err = math.atan2(math.sin(ego.heading - math.atan2(seg_dir[1], seg_dir[0])),
                             math.cos(ego.heading - math.atan2(seg_dir[1], seg_dir[0])))
    curvatures = []
    for ahead in (5.0, 10.0, 15.0):
        idx = int(np.searchsorted(route_cumlen, s + ahead))
        curvatures.append(float(route_curvature[min(idx, len(route_curvature) - 1)]))
    half_w = ms.lane_width / 2.0
    left_dist = half_w - lateral
    right_dist = half_w + lateral

    cth, sth = math.cos(ego.heading), math.sin(ego.heading)
    def to_ego(p):
        d = p - ego.position
        return np.array([cth * d[0] + sth * d[1], -sth * d[0] + cth * d[1]])

    junction_ahead = 0.0
    for jc in ms.junction_centers:
        rel = to_ego(jc)
        if 0.0 < rel[0] < 25.0 and abs(rel[1]) < 10.0:
            junction_ahead = 1.0
            break

    road = np.array([lateral, heading_err, curvatures[0], curvatures[1], curvatures[2],
                     ms.lane_width, left_dist, right_dist, junction_ahead], np.float32)
    vehicle = np.array([ego.speed, state.yaw_rate, state.prev_accel, state.prev_steer],
                       np.float32)
    wp1 = to_ego(state.next_waypoint)
    idx2 = min(state.next_waypoint_index + 1, len(wps) - 1)
    wp2 = to_ego(wps[idx2])
    remaining = 1.0 - state.next_waypoint_index / (len(wps) - 1)
    nav = np.array([wp1[0], wp1[1], wp2[0], wp2[1], remaining], np.float32)
    return road, vehicle, nav


def _point_segment_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    ab2 = float(ab @ ab)
    t = np.clip((points - a) @ ab / max(ab2, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def ground_truth_bev_mask(state: WorldState, grid_spec) -> np.ndarray:
    """Class grid (gy, gx): 0 background, 1 road, 2 vehicle (incl. pedestrians).

    Cells follow the splat convention ix = floor((x + extent/2) / cell); the
    ego's own footprint stays background.
    """
    cell = grid_spec.cell_size
    gx = int(round(grid_spec.x_extent / cell))
    gy = int(round(grid_spec.y_extent / cell))
    xs = (np.arange(gx) + 0.5) * cell - grid_spec.x_extent / 2.0
    ys = (np.arange(gy) + 0.5) * cell - grid_spec.y_extent / 2.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    ego = state.ego
    cth, sth = math.cos(ego.heading), math.sin(ego.heading)
    wx = ego.position[0] + cth * xx - sth * yy
    wy = ego.position[1] + sth * xx + cth * yy
    pts = np.stack([wx.ravel(), wy.ravel()], axis=1)

    mask = np.zeros(pts.shape[0], np.uint8)
    half_street = state.map_spec.street_width / 2.0
    for p0, p1 in state.map_spec.streets:
        mask[_point_segment_dist(pts, p0, p1) <= half_street] = 1

    for actor in state.traffic:
        ca, sa = math.cos(actor.heading), math.sin(actor.heading)
        d = pts - actor.position
        lx = ca * d[:, 0] + sa * d[:, 1]
        ly = -sa * d[:, 0] + ca * d[:, 1]
        inside = (np.abs(lx) <= actor.half_extents[0]) & (np.abs(ly) <= actor.half_extents[1])
        mask[inside] = 2
    return mask.reshape(gy, gx)
