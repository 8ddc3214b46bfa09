"""Procedural 2D road networks.

Each map id (1..7) deterministically generates a small lattice of two-lane
streets with junction connector arcs, a fixed driving route resampled to
evenly spaced waypoints, sidewalk lines for pedestrians, and street-crossing
segments at junctions. Geometry depends only on (map_id, GENERATOR_VERSION).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

GENERATOR_VERSION = 1

LANE_WIDTH = 3.5
JUNCTION_TRIM = 6.0          # lanes stop this far from a junction center
SIDEWALK_OFFSET = LANE_WIDTH + 1.0
ROUTE_LENGTH = 420.0
WAYPOINT_SPACING = 4.0

# map_id -> (vertical street count, horizontal street count)
_LATTICE = {
    1: (0, 1),   # straight road
    2: (1, 1),   # single crossroads
    3: (2, 2),   # training map
    4: (2, 1),
    5: (3, 2),
    6: (1, 2),
    7: (3, 3),
}


@dataclass
class Lane:
    """Directed centerline polyline; successors are lane indices."""
    points: np.ndarray                  # (K, 2)
    successors: tuple = ()
    is_connector: bool = False
    cumlen: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cumlen = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumlen[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        x = np.interp(s, self.cumlen, self.points[:, 0])
        y = np.interp(s, self.cumlen, self.points[:, 1])
        return np.array([x, y])

    def heading_at(self, s: float) -> float:
        i = int(np.searchsorted(self.cumlen, min(max(s, 0.0), self.length), side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])


@dataclass
class MapSpec:
    map_id: int
    lane_width: float
    lanes: list                         # Lane, vehicle graph (lanes + connectors)
    waypoints: np.ndarray               # (M, 2) route
    streets: list                       # (p0, p1) full centerline spans
    junction_centers: np.ndarray        # (J, 2)
    sidewalks: list                     # (p0, p1) walkable straight segments
    crossings: list                     # (p0, p1) street crossings at junctions
    bounds: tuple                       # (xmin, ymin, xmax, ymax)

    @property
    def street_width(self) -> float:
        return 2.0 * self.lane_width

    def drivable_lane_ids(self) -> list:
        return [i for i, ln in enumerate(self.lanes) if not ln.is_connector]


def _resample(points: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(cum[-1] // spacing), 1)
    s = np.arange(n + 1) * spacing
    return np.stack([np.interp(s, cum, points[:, 0]),
                     np.interp(s, cum, points[:, 1])], axis=1)


def _bezier(a: np.ndarray, da: np.ndarray, b: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Quadratic bezier leaving a along da and arriving at b along db."""
    cross = da[0] * db[1] - da[1] * db[0]
    if abs(cross) < 1e-9:
        ctrl = 0.5 * (a + b)
    else:
        # intersection of the two tangent lines
        t = ((b[0] - a[0]) * db[1] - (b[1] - a[1]) * db[0]) / cross
        ctrl = a + t * da
    n = max(int(np.linalg.norm(b - a) / 1.5), 2)
    u = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - u) ** 2 * a + 2 * u * (1 - u) * ctrl + u ** 2 * b


def _uturn_arc(end: np.ndarray, start: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Semicircle from `end` to `start` bulging along `direction`."""
    center = 0.5 * (end + start)
    radius = 0.5 * float(np.linalg.norm(start - end))
    a0 = math.atan2(end[1] - center[1], end[0] - center[0])
    # choose sweep sign so the arc midpoint lies ahead of the dead end
    for sign in (1.0, -1.0):
        mid = center + radius * np.array([math.cos(a0 + sign * math.pi / 2),
                                          math.sin(a0 + sign * math.pi / 2)])
        if np.dot(mid - center, direction) > 0:
            break
    angles = a0 + sign * np.linspace(0.0, math.pi, 9)
    return center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def generate_map(map_id: int) -> MapSpec:
    if map_id not in _LATTICE:
        raise ConfigError(f"map_id must be in 1..7, got {map_id}")
    rng = np.random.default_rng([GENERATOR_VERSION, map_id])
    nv, nh = _LATTICE[map_id]

    def positions(n):
        if n == 0:
            return []
        first = 60.0 + rng.uniform(0.0, 20.0)
        gaps = 70.0 + rng.uniform(-10.0, 30.0, size=max(n - 1, 0))
        return list(first + np.concatenate([[0.0], np.cumsum(gaps)]))

    xs = positions(nv)                  # vertical streets at x = const
    ys = positions(nh)                  # horizontal streets at y = const
    overhang = 50.0
    x_lo = (min(xs) - overhang) if xs else 0.0
    x_hi = (max(xs) + overhang) if xs else 400.0
    y_lo = (min(ys) - overhang) if ys else 0.0
    y_hi = (max(ys) + overhang) if ys else 160.0

    # streets: (axis, fixed coord, span lo, span hi); axis 0 runs along x
    streets = [(0, y, x_lo, x_hi) for y in ys] + [(1, x, y_lo, y_hi) for x in xs]
    junctions = np.array([[x, y] for x in xs for y in ys], dtype=np.float64) \
        if xs and ys else np.zeros((0, 2))

    half = LANE_WIDTH / 2.0
    lanes: list[Lane] = []
    successors: dict[int, list[int]] = {}
    seg_lanes = []  # (lane_id, start_xy, end_xy, unit direction)

    for axis, c, lo, hi in streets:
        along = sorted(xs) if axis == 0 else sorted(ys)
        cuts, prev = [], lo
        for j in along:
            cuts.append((prev, j - JUNCTION_TRIM))
            prev = j + JUNCTION_TRIM
        cuts.append((prev, hi))
        for k, (a, b) in enumerate(cuts):
            if b - a < 4.0:
                continue
            if axis == 0:   # +x direction lane keeps to its right (-y side)
                fw = (np.array([a, c - half]), np.array([b, c - half]))
                bw = (np.array([b, c + half]), np.array([a, c + half]))
            else:           # +y direction lane keeps to its right (+x side)
                fw = (np.array([c + half, a]), np.array([c + half, b]))
                bw = (np.array([c - half, b]), np.array([c - half, a]))
            pair = []
            for p0, p1 in (fw, bw):
                lid = len(lanes)
                lanes.append(Lane(points=np.array([p0, p1])))
                d = (p1 - p0) / np.linalg.norm(p1 - p0)
                seg_lanes.append((lid, p0, p1, d))
                pair.append((lid, p0, p1, d))
            # dead-end U-turns at the street tips keep traffic flowing
            (flid, f0, f1, fd), (blid, b0, b1, bd) = pair
            if k == len(cuts) - 1:      # hi tip: forward lane dead-ends
                arc = _uturn_arc(f1, b0, fd)
                cid = len(lanes)
                lanes.append(Lane(points=arc, is_connector=True))
                successors[flid] = successors.get(flid, []) + [cid]
                successors[cid] = [blid]
            if k == 0:                  # lo tip: backward lane dead-ends
                arc = _uturn_arc(b1, f0, bd)
                cid = len(lanes)
                lanes.append(Lane(points=arc, is_connector=True))
                successors[blid] = successors.get(blid, []) + [cid]
                successors[cid] = [flid]

    # junction connectors join lane ends to lane starts around each junction
    reach = JUNCTION_TRIM + LANE_WIDTH + 0.6
    for jc in junctions:
        incoming = [(lid, p1, d) for lid, p0, p1, d in seg_lanes
                    if np.linalg.norm(p1 - jc) < reach]
        outgoing = [(lid, p0, d) for lid, p0, p1, d in seg_lanes
                    if np.linalg.norm(p0 - jc) < reach]
        for ilid, a, da in incoming:
            for olid, b, db in outgoing:
                if olid == ilid or np.dot(da, db) < -0.9:   # no in-junction U-turn
                    continue
                cid = len(lanes)
                lanes.append(Lane(points=_bezier(a, da, b, db), is_connector=True))
                successors[ilid] = successors.get(ilid, []) + [cid]
                successors[cid] = [olid]

    for i, ln in enumerate(lanes):
        ln.successors = tuple(sorted(successors.get(i, [])))

    # route: seeded walk over the lane graph starting on the first lane
    route_rng = np.random.default_rng([GENERATOR_VERSION, map_id, 7])
    start = next(i for i, ln in enumerate(lanes) if not ln.is_connector)
    pts = [lanes[start].points]
    total = lanes[start].length
    cur = start
    while total < ROUTE_LENGTH:
        succ = lanes[cur].successors
        if not succ:
            break
        cur = int(succ[route_rng.integers(len(succ))])
        pts.append(lanes[cur].points[1:])
        total += lanes[cur].length
    waypoints = _resample(np.concatenate(pts, axis=0), WAYPOINT_SPACING)

    street_spans, sidewalks = [], []
    for axis, c, lo, hi in streets:
        if axis == 0:
            street_spans.append((np.array([lo, c]), np.array([hi, c])))
            for off in (-SIDEWALK_OFFSET, SIDEWALK_OFFSET):
                sidewalks.append((np.array([lo, c + off]), np.array([hi, c + off])))
        else:
            street_spans.append((np.array([c, lo]), np.array([c, hi])))
            for off in (-SIDEWALK_OFFSET, SIDEWALK_OFFSET):
                sidewalks.append((np.array([c + off, lo]), np.array([c + off, hi])))

    # pedestrian crossings at each junction, one per leg
    crossings = []
    for jc in junctions:
        for d in (np.array([1.0, 0.0]), np.array([-1.0, 0.0]),
                  np.array([0.0, 1.0]), np.array([0.0, -1.0])):
            foot = jc + d * (JUNCTION_TRIM + 1.0)
            perp = np.array([-d[1], d[0]])
            crossings.append((foot - perp * SIDEWALK_OFFSET, foot + perp * SIDEWALK_OFFSET))

    margin = 25.0
    all_pts = np.concatenate([waypoints] + [np.stack(s) for s in street_spans])
    bounds = (float(all_pts[:, 0].min() - margin), float(all_pts[:, 1].min() - margin),
              float(all_pts[:, 0].max() + margin), float(all_pts[:, 1].max() + margin))

    return MapSpec(map_id=map_id, lane_width=LANE_WIDTH, lanes=lanes,
                   waypoints=waypoints, streets=street_spans,
                   junction_centers=junctions, sidewalks=sidewalks,
                   crossings=crossings, bounds=bounds)
