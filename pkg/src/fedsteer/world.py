"""Deterministic 2D lane-following world.

A track is a closed loop of alternating straight and circular-arc segments
built by rounding the corners of a jittered star-shaped polygon. The same
world state renders into three sensor modalities (occupancy, distance,
semantic), an analytic pure-pursuit expert supplies steering labels, and
closed-loop episodes are scored by three mistake categories: obstacle hits,
missed turns, and straight-line deviations.

Conventions: positive steering turns left; headings are CCW radians; the
vehicle travels the loop counter-clockwise at a fixed 6 m/s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .nn import PolicyModel, forward
from .obs import GRID_SIZE, ModalityId, Observation, STEERING_LIMIT

SPEED = 6.0          # m/s, fixed
WHEELBASE = 2.5      # m
DT = 0.1             # s per simulation step
VEHICLE_RADIUS = 1.0  # m, collision circle
VEHICLE_WIDTH = 2.0   # m, required clear corridor beside obstacles
LOOKAHEAD = 4.0       # m, pure-pursuit target distance

WINDOW_DEPTH = 16.0   # m ahead covered by the sensor grid
WINDOW_WIDTH = 16.0   # m across

OBSTACLE_RADIUS = 0.7
OBSTACLE_LATERAL = 1.1       # offset of obstacle centers from the centerline
OBSTACLE_END_MARGIN = 12.0   # keep obstacles away from straight-segment ends
OBSTACLE_GAP = 22.0          # min arc-length between obstacles
AVOID_RAMP = 10.0            # m over which the expert eases around an obstacle

OFF_TRACK_FACTOR = 2.0       # episode ends when |cte| > factor * half_width

WEATHER_KINDS = ("none", "rain", "snow", "fog", "dust")


class GenerationError(RuntimeError):
    """Track generation could not satisfy the placement constraints."""


class OffTrackError(RuntimeError):
    """The vehicle is too far from the centerline for the expert to act."""


@dataclass(frozen=True)
class Segment:
    """One centerline piece: a straight run or a circular arc.

    Straights use ``p0`` (start point) and ``heading``; arcs use ``center``,
    ``radius`` and ``a0`` (angle of the entry point as seen from the center)
    with a signed ``sweep`` (positive = CCW = left turn).
    """

    kind: str  # "straight" | "arc"
    length: float
    p0: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    a0: float = 0.0
    sweep: float = 0.0

    def point_at(self, u: float) -> tuple[np.ndarray, float]:
        """Position and tangent heading at arc-length u in [0, length]."""
        if self.kind == "straight":
            d = np.array([math.cos(self.heading), math.sin(self.heading)])
            return np.asarray(self.p0) + u * d, self.heading
        sign = 1.0 if self.sweep >= 0 else -1.0
        ang = self.a0 + sign * u / self.radius
        pos = np.asarray(self.center) + self.radius * np.array(
            [math.cos(ang), math.sin(ang)])
        return pos, ang + sign * math.pi / 2.0


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    radius: float
    s: float        # arc-length of the closest centerline point
    lateral: float  # signed offset from the centerline, left positive


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = SPEED

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True, eq=False)
class TrackGeometry:
    """Immutable track shape shared by all states of one world."""

    segments: tuple[Segment, ...]
    half_width: float
    obstacles: tuple[Obstacle, ...]
    cum_lengths: np.ndarray  # arc-length at the start of each segment
    total_length: float

    def segment_start(self, idx: int) -> float:
        return float(self.cum_lengths[idx])

    def point_at(self, s: float) -> tuple[np.ndarray, float, int]:
        """Position, heading and segment index at global arc-length s (wrapped)."""
        s = s % self.total_length
        idx = int(np.searchsorted(self.cum_lengths, s, side="right")) - 1
        seg = self.segments[idx]
        pos, heading = seg.point_at(s - self.cum_lengths[idx])
        return pos, heading, idx

    def project(self, point) -> tuple[float, float, int]:
        """(s, signed lateral, segment index) of the closest centerline point."""
        p = np.asarray(point, dtype=np.float64).reshape(1, 2)
        s, lat, idx, _ = self.project_many(p)
        return float(s[0]), float(lat[0]), int(idx[0])

    def project_many(self, points: np.ndarray):
        """Vectorized projection of (m, 2) points onto the centerline.

        Returns (s, lateral, segment index, distance) arrays. Lateral is
        signed with left-of-travel positive.
        """
        pts = np.asarray(points, dtype=np.float64)
        m = pts.shape[0]
        best_d = np.full(m, np.inf)
        best_s = np.zeros(m)
        best_lat = np.zeros(m)
        best_idx = np.zeros(m, dtype=np.int64)
        for idx, seg in enumerate(self.segments):
            if seg.kind == "straight":
                d_hat = np.array([math.cos(seg.heading), math.sin(seg.heading)])
                rel = pts - np.asarray(seg.p0)
                t = np.clip(rel @ d_hat, 0.0, seg.length)
                closest = np.asarray(seg.p0) + t[:, None] * d_hat
                dist = np.linalg.norm(pts - closest, axis=1)
                lat = d_hat[0] * rel[:, 1] - d_hat[1] * rel[:, 0]
                s_local = t
            else:
                sign = 1.0 if seg.sweep >= 0 else -1.0
                v = pts - np.asarray(seg.center)
                rho = np.linalg.norm(v, axis=1)
                phi = np.arctan2(v[:, 1], v[:, 0])
                delta = np.mod(sign * (phi - seg.a0), 2.0 * math.pi)
                span = abs(seg.sweep)
                # Outside the sweep: snap to whichever endpoint is angularly nearer.
                past_end = delta - span
                to_start = 2.0 * math.pi - delta
                delta = np.where(delta <= span, delta,
                                 np.where(past_end <= to_start, span, 0.0))
                ang = seg.a0 + sign * delta
                closest = np.asarray(seg.center) + seg.radius * np.stack(
                    [np.cos(ang), np.sin(ang)], axis=1)
                dist = np.linalg.norm(pts - closest, axis=1)
                lat = sign * (seg.radius - rho)
                s_local = delta * seg.radius
            better = dist < best_d
            best_d = np.where(better, dist, best_d)
            best_s = np.where(better, self.cum_lengths[idx] + s_local, best_s)
            best_lat = np.where(better, lat, best_lat)
            best_idx = np.where(better, idx, best_idx)
        return best_s, best_lat, best_idx, best_d

    def circular_delta(self, s_a: float, s_b: float) -> float:
        """Signed wrapped arc-length from s_b to s_a, in (-L/2, L/2]."""
        L = self.total_length
        return (s_a - s_b + L / 2.0) % L - L / 2.0

    def avoidance_offset(self, s: float) -> float:
        """Target lateral offset of the expert path at arc-length s.

        Zero away from obstacles; near one, a raised-cosine bump toward the
        side with more clearance, contained within +/- AVOID_RAMP meters.
        """
        offset = 0.0
        for ob in self.obstacles:
            delta = self.circular_delta(s, ob.s)
            if abs(delta) < AVOID_RAMP:
                peak = ob.lateral - math.copysign(
                    ob.radius + VEHICLE_RADIUS + 0.5, ob.lateral)
                offset += peak * 0.5 * (1.0 + math.cos(math.pi * delta / AVOID_RAMP))
        return offset

    def sample_polyline(self, ds: float = 1.0) -> np.ndarray:
        """Centerline sampled every ~ds meters, closed (first point repeated)."""
        n = max(8, int(math.ceil(self.total_length / ds)))
        pts = [self.point_at(i * self.total_length / n)[0] for i in range(n)]
        pts.append(pts[0])
        return np.asarray(pts)


@dataclass(frozen=True, eq=False)
class TrackWorld:
    """One world state: shared track geometry plus the vehicle pose."""

    geometry: TrackGeometry
    vehicle: VehicleState
    seed: int

    @property
    def track_half_width(self) -> float:
        return self.geometry.half_width

    @property
    def obstacles(self) -> tuple[Obstacle, ...]:
        return self.geometry.obstacles

    @property
    def centerline(self) -> np.ndarray:
        return self.geometry.sample_polyline()


@dataclass(frozen=True)
class Demonstration:
    """One expert-labeled observation."""

    obs: Observation
    steering: float


@dataclass(frozen=True)
class WeatherPerturbation:
    """Parametric sensor corruption standing in for bad-weather rendering."""

    kind: str = "none"
    intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in WEATHER_KINDS:
            raise ValueError(f"unknown weather kind {self.kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")


@dataclass
class EvalReport:
    """Closed-loop mistake counts with their denominators.

    Rates divide offending counts by encounters and are 0.0 when the
    denominator is zero (flagged by the denominator fields themselves).
    """

    episodes: int = 0
    collisions: int = 0
    turns_encountered: int = 0
    turns_missed: int = 0
    straights_encountered: int = 0
    straights_mistaken: int = 0
    off_track_exits: int = 0
    weather: WeatherPerturbation = WeatherPerturbation()

    @staticmethod
    def _rate(num: int, den: int) -> float:
        return num / den if den > 0 else 0.0

    @property
    def hit_obstacle_rate(self) -> float:
        return self._rate(self.collisions, self.episodes)

    @property
    def miss_turn_rate(self) -> float:
        return self._rate(self.turns_missed, self.turns_encountered)

    @property
    def straight_mistake_rate(self) -> float:
        return self._rate(self.straights_mistaken, self.straights_encountered)

    @property
    def total_mistake_rate(self) -> float:
        """All offending events over all encounters, pooled."""
        num = self.collisions + self.turns_missed + self.straights_mistaken
        den = self.episodes + self.turns_encountered + self.straights_encountered
        return self._rate(num, den)

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.weather != self.weather:
            raise ValueError("cannot merge reports from different weather settings")
        return EvalReport(
            episodes=self.episodes + other.episodes,
            collisions=self.collisions + other.collisions,
            turns_encountered=self.turns_encountered + other.turns_encountered,
            turns_missed=self.turns_missed + other.turns_missed,
            straights_encountered=self.straights_encountered + other.straights_encountered,
            straights_mistaken=self.straights_mistaken + other.straights_mistaken,
            off_track_exits=self.off_track_exits + other.off_track_exits,
            weather=self.weather,
        )


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _build_segments(vertices: np.ndarray, radii: np.ndarray) -> tuple[Segment, ...]:
    """Round the corners of a simple polygon into straight+arc segments.

    The loop starts at the beginning of the straight on edge 0, so the first
    segment is always a straight.
    """
    n = len(vertices)
    headings = np.zeros(n)
    lengths = np.zeros(n)
    for k in range(n):
        d = vertices[(k + 1) % n] - vertices[k]
        headings[k] = math.atan2(d[1], d[0])
        lengths[k] = np.linalg.norm(d)
    turns = np.array([_wrap_angle(headings[(k + 1) % n] - headings[k])
                      for k in range(n)])  # turn taken at vertex k+1
    tangent = radii * np.abs(np.tan(turns / 2.0))

    segments: list[Segment] = []
    for k in range(n):
        d_hat = np.array([math.cos(headings[k]), math.sin(headings[k])])
        start = vertices[k] + tangent[(k - 1) % n] * d_hat
        end = vertices[(k + 1) % n] - tangent[k] * d_hat
        run = float(np.linalg.norm(end - start))
        if run <= 1e-6:
            raise GenerationError(f"edge {k} too short after corner rounding")
        segments.append(Segment(kind="straight", length=run,
                                p0=(float(start[0]), float(start[1])),
                                heading=float(headings[k])))
        # Fillet arc at vertex k+1 joining headings[k] -> headings[k+1].
        turn = float(turns[k])
        r = float(radii[k])
        side = 1.0 if turn >= 0 else -1.0
        normal = np.array([-math.sin(headings[k]), math.cos(headings[k])]) * side
        center = end + r * normal
        a0 = math.atan2(end[1] - center[1], end[0] - center[0])
        segments.append(Segment(kind="arc", length=r * abs(turn),
                                center=(float(center[0]), float(center[1])),
                                radius=r, a0=float(a0), sweep=turn))
    return tuple(segments)


def _polyline_self_intersects(pts: np.ndarray) -> bool:
    """Brute-force check of a closed polyline for crossing segments."""
    n = len(pts) - 1
    for i in range(n):
        a, b = pts[i], pts[i + 1]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # closing segment shares the first vertex
            c, d = pts[j], pts[j + 1]
            if _segments_cross(a, b, c, d):
                return True
    return False


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def validate_track(geometry: TrackGeometry) -> None:
    """Raise GenerationError if the centerline self-intersects or an obstacle
    blocks the lane."""
    if _polyline_self_intersects(geometry.sample_polyline(ds=1.0)):
        raise GenerationError("centerline self-intersects")
    for ob in geometry.obstacles:
        w = geometry.half_width
        left_gap = w - (ob.lateral + ob.radius)
        right_gap = (ob.lateral - ob.radius) + w
        if max(left_gap, right_gap) < VEHICLE_WIDTH:
            raise GenerationError(
                f"obstacle at s={ob.s:.1f} leaves no corridor of width "
                f"{VEHICLE_WIDTH}")


def _mirror_segments(segments: tuple[Segment, ...]) -> tuple[Segment, ...]:
    """Reflect a track across the x-axis; left turns become right turns."""
    out = []
    for seg in segments:
        if seg.kind == "straight":
            out.append(replace(seg, p0=(seg.p0[0], -seg.p0[1]),
                               heading=-seg.heading))
        else:
            out.append(replace(seg, center=(seg.center[0], -seg.center[1]),
                               a0=-seg.a0, sweep=-seg.sweep))
    return tuple(out)


def _stadium_segments(rng) -> tuple[Segment, ...]:
    """Two-turn track: parallel straights joined by CCW semicircles."""
    r = float(rng.uniform(11.0, 16.0))
    run = float(rng.uniform(45.0, 70.0))
    left = (Segment(kind="straight", length=run, p0=(-run / 2.0, -r), heading=0.0),
            Segment(kind="arc", length=math.pi * r, center=(run / 2.0, 0.0),
                    radius=r, a0=-math.pi / 2.0, sweep=math.pi),
            Segment(kind="straight", length=run, p0=(run / 2.0, r),
                    heading=math.pi),
            Segment(kind="arc", length=math.pi * r, center=(-run / 2.0, 0.0),
                    radius=r, a0=math.pi / 2.0, sweep=math.pi))
    return left


def generate_track(seed: int, n_turns: int, n_obstacles: int,
                   half_width: float = 3.0) -> TrackWorld:
    """Build a deterministic closed track with the vehicle parked at s=0.

    Alternating straight/arc segments; obstacles only on straights, offset
    from the centerline so one side always leaves a corridor of at least the
    vehicle width. Identical arguments yield identical worlds.
    """
    if n_turns < 2:
        raise ValueError("need at least 2 turns to close a loop")
    if n_obstacles < 0:
        raise ValueError("obstacle count must be non-negative")
    rng = np.random.default_rng(seed)
    # Half the seeds are mirrored so the corpus covers right-turn loops too.
    mirrored = bool(rng.random() < 0.5)

    geometry = None
    if n_turns == 2:
        segments = _stadium_segments(rng)
        if mirrored:
            segments = _mirror_segments(segments)
        cum = np.concatenate([[0.0], np.cumsum([s.length for s in segments])])
        geometry = TrackGeometry(segments=segments, half_width=half_width,
                                 obstacles=(), cum_lengths=cum[:-1],
                                 total_length=float(cum[-1]))
    for _ in range(20 if geometry is None else 0):  # retry on infeasible jitter
        angles = (np.arange(n_turns) + rng.uniform(-0.22, 0.22, n_turns)) \
            * 2.0 * math.pi / n_turns
        base = 35.0 + 3.0 * n_turns
        radii_v = base * rng.uniform(0.85, 1.2, n_turns)
        vertices = np.stack([radii_v * np.cos(angles),
                             radii_v * np.sin(angles)], axis=1)
        edge_len = np.array([np.linalg.norm(vertices[(k + 1) % n_turns] - vertices[k])
                             for k in range(n_turns)])
        headings = np.array([math.atan2(*(vertices[(k + 1) % n_turns] - vertices[k])[::-1])
                             for k in range(n_turns)])
        turns = np.array([_wrap_angle(headings[(k + 1) % n_turns] - headings[k])
                          for k in range(n_turns)])
        if np.any(np.abs(turns) < 0.2) or np.any(np.abs(turns) > 2.4):
            continue
        fillet = rng.uniform(10.0, 16.0, n_turns)
        # Shrink fillets until both tangent offsets fit on every edge.
        for _ in range(40):
            tangent = fillet * np.abs(np.tan(turns / 2.0))
            need = np.array([tangent[(k - 1) % n_turns] + tangent[k]
                             for k in range(n_turns)])
            bad = need > edge_len - 6.0
            if not np.any(bad):
                break
            fillet[bad] *= 0.85
        else:
            continue
        if np.any(fillet < 8.0):
            continue
        try:
            segments = _build_segments(vertices, fillet)
        except GenerationError:
            continue
        if mirrored:
            segments = _mirror_segments(segments)
        cum = np.concatenate([[0.0], np.cumsum([s.length for s in segments])])
        geometry = TrackGeometry(segments=segments, half_width=half_width,
                                 obstacles=(), cum_lengths=cum[:-1],
                                 total_length=float(cum[-1]))
        if _polyline_self_intersects(geometry.sample_polyline(ds=1.0)):
            geometry = None
            continue
        break
    if geometry is None:
        raise GenerationError(f"could not build a valid track for seed {seed}")

    obstacles: list[Obstacle] = []
    straights = [(idx, seg) for idx, seg in enumerate(geometry.segments)
                 if seg.kind == "straight"
                 and seg.length > 2.0 * OBSTACLE_END_MARGIN]
    attempts = 0
    while len(obstacles) < n_obstacles:
        attempts += 1
        if attempts > 200 or not straights:
            raise GenerationError(
                f"could not place {n_obstacles} obstacles on seed {seed}")
        idx, seg = straights[rng.integers(len(straights))]
        u = rng.uniform(OBSTACLE_END_MARGIN, seg.length - OBSTACLE_END_MARGIN)
        s_global = geometry.segment_start(idx) + u
        if any(abs(geometry.circular_delta(s_global, ob.s)) < OBSTACLE_GAP
               for ob in obstacles):
            continue
        lateral = OBSTACLE_LATERAL * (1.0 if rng.random() < 0.5 else -1.0)
        pos, heading = seg.point_at(u)
        left = np.array([-math.sin(heading), math.cos(heading)])
        center = pos + lateral * left
        obstacles.append(Obstacle(x=float(center[0]), y=float(center[1]),
                                  radius=OBSTACLE_RADIUS, s=float(s_global),
                                  lateral=float(lateral)))
    geometry = replace(geometry, obstacles=tuple(obstacles))
    validate_track(geometry)

    start, heading, _ = geometry.point_at(0.0)
    vehicle = VehicleState(x=float(start[0]), y=float(start[1]),
                           heading=float(heading))
    return TrackWorld(geometry=geometry, vehicle=vehicle, seed=seed)


def place_vehicle(world: TrackWorld, s: float, lateral: float = 0.0,
                  heading_offset: float = 0.0) -> TrackWorld:
    """World with the vehicle re-posed at arc-length s (plus optional offsets)."""
    pos, heading, _ = world.geometry.point_at(s)
    left = np.array([-math.sin(heading), math.cos(heading)])
    p = pos + lateral * left
    vehicle = VehicleState(x=float(p[0]), y=float(p[1]),
                           heading=_wrap_angle(heading + heading_offset))
    return replace(world, vehicle=vehicle)


def expert_policy(world: TrackWorld) -> float:
    """Pure-pursuit steering toward a lookahead point on the avoidance path.

    Raises OffTrackError when the vehicle is farther than five half-widths
    from the centerline. Output clamped to +/- STEERING_LIMIT.
    """
    geo = world.geometry
    pos = world.vehicle.position
    s, lateral, _ = geo.project(pos)
    if abs(lateral) > 5.0 * geo.half_width:
        raise OffTrackError(f"vehicle {abs(lateral):.1f} m off the centerline")
    target_s = s + LOOKAHEAD
    base, heading, _ = geo.point_at(target_s)
    left = np.array([-math.sin(heading), math.cos(heading)])
    target = base + geo.avoidance_offset(target_s) * left
    dx, dy = target - pos
    alpha = _wrap_angle(math.atan2(dy, dx) - world.vehicle.heading)
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return 0.0
    curvature = 2.0 * math.sin(alpha) / dist
    steering = math.atan(curvature * WHEELBASE)
    return float(np.clip(steering, -STEERING_LIMIT, STEERING_LIMIT))


def step(world: TrackWorld, steering: float, dt: float = DT) -> TrackWorld:
    """Kinematic bicycle update at fixed speed; heading first, then advance."""
    if abs(steering) > STEERING_LIMIT + 1e-9:
        raise ValueError(f"|steering| must be <= {STEERING_LIMIT}")
    v = world.vehicle
    heading = v.heading + (v.speed / WHEELBASE) * math.tan(steering) * dt
    x = v.x + v.speed * dt * math.cos(heading)
    y = v.y + v.speed * dt * math.sin(heading)
    return replace(world, vehicle=VehicleState(x=x, y=y, heading=heading,
                                               speed=v.speed))


def _cell_centers(vehicle: VehicleState) -> np.ndarray:
    """World coordinates of the 16x16 grid cell centers, shape (256, 2)."""
    cell_d = WINDOW_DEPTH / GRID_SIZE
    cell_w = WINDOW_WIDTH / GRID_SIZE
    rows, cols = np.meshgrid(np.arange(GRID_SIZE), np.arange(GRID_SIZE),
                             indexing="ij")
    ahead = (GRID_SIZE - 1 - rows + 0.5) * cell_d
    right = (cols + 0.5 - GRID_SIZE / 2.0) * cell_w
    h = vehicle.heading
    fwd = np.array([math.cos(h), math.sin(h)])
    rgt = np.array([math.sin(h), -math.cos(h)])
    pts = (vehicle.position[None, :]
           + ahead.reshape(-1, 1) * fwd[None, :]
           + right.reshape(-1, 1) * rgt[None, :])
    return pts


def render(world: TrackWorld, modality: ModalityId) -> Observation:
    """Render the scene ahead of the vehicle into one sensor modality.

    All three modalities of the same world state depict identical geometry:
    a cell is drivable iff its center lies strictly inside the lane and
    outside every obstacle.
    """
    geo = world.geometry
    pts = _cell_centers(world.vehicle)
    _, lateral, _, _ = geo.project_many(pts)
    off_road = np.abs(lateral) >= geo.half_width

    if geo.obstacles:
        centers = np.array([[ob.x, ob.y] for ob in geo.obstacles])
        radii = np.array([ob.radius for ob in geo.obstacles])
        d_obs = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
        in_obstacle = np.any(d_obs <= radii[None, :], axis=1)
        obstacle_clear = np.min(np.maximum(d_obs - radii[None, :], 0.0), axis=1)
    else:
        in_obstacle = np.zeros(len(pts), dtype=bool)
        obstacle_clear = np.full(len(pts), np.inf)

    if modality == ModalityId.OCCUPANCY:
        grid = (off_road | in_obstacle).astype(np.float32)
    elif modality == ModalityId.SEMANTIC:
        grid = np.where(in_obstacle, 0.5, np.where(off_road, 1.0, 0.0))
        grid = grid.astype(np.float32)
    else:
        boundary_clear = geo.half_width - np.abs(lateral)
        clear = np.minimum(boundary_clear, obstacle_clear)
        clear[off_road | in_obstacle] = 0.0
        grid = np.clip(clear / geo.half_width, 0.0, 1.0).astype(np.float32)
    return Observation(modality=modality, grid=grid.reshape(GRID_SIZE, GRID_SIZE))


def blocked_mask(obs: Observation) -> np.ndarray:
    """Boolean undrivable-cell mask; identical across modalities of one scene."""
    if obs.modality == ModalityId.OCCUPANCY:
        return obs.grid == 1.0
    if obs.modality == ModalityId.SEMANTIC:
        return obs.grid >= 0.25
    return obs.grid == 0.0


def _box_blur_3x3(grid: np.ndarray) -> np.ndarray:
    """Mean over the in-bounds 3x3 neighborhood of each cell."""
    padded = np.pad(grid, 1)
    counts = np.pad(np.ones_like(grid), 1)
    total = np.zeros_like(grid)
    norm = np.zeros_like(grid)
    for dr in range(3):
        for dc in range(3):
            total += padded[dr:dr + GRID_SIZE, dc:dc + GRID_SIZE]
            norm += counts[dr:dr + GRID_SIZE, dc:dc + GRID_SIZE]
    return total / norm


def apply_weather(obs: Observation, weather: WeatherPerturbation) -> Observation:
    """Corrupt an observation; deterministic per weather seed.

    kind=none and intensity=0 return the observation unchanged bit-for-bit.
    Results are clamped to [0, 1].
    """
    if weather.kind == "none" or weather.intensity == 0.0:
        return obs
    grid = obs.grid.copy()
    i = weather.intensity
    if weather.kind == "rain":
        rng = np.random.default_rng(weather.seed)
        k = int(i * 0.10 * GRID_SIZE * GRID_SIZE)
        if k > 0:
            idx = rng.choice(GRID_SIZE * GRID_SIZE, size=k, replace=False)
            values = (rng.random(k) < 0.5).astype(np.float32)
            grid.reshape(-1)[idx] = values
    elif weather.kind == "snow":
        rng = np.random.default_rng(weather.seed)
        for _ in range(int(round(i * 3))):
            r = int(rng.integers(0, GRID_SIZE - 1))
            c = int(rng.integers(0, GRID_SIZE - 1))
            grid[r:r + 2, c:c + 2] = 1.0
    elif weather.kind == "fog":
        grid = (1.0 - i) * grid + i * np.float32(0.5)
    elif weather.kind == "dust":
        grid = _box_blur_3x3(grid + np.float32(0.3 * i))
    grid = np.clip(grid, 0.0, 1.0).astype(np.float32)
    return Observation(modality=obs.modality, grid=grid)


def _step_weather(weather: WeatherPerturbation, t: int) -> WeatherPerturbation:
    # Fresh speckle pattern each step while staying reproducible.
    if weather.kind in ("none", "fog", "dust"):
        return weather
    return replace(weather, seed=(weather.seed * 1_000_003 + t) % (2 ** 63))


@dataclass
class TrajectoryPoint:
    step: int
    x: float
    y: float
    heading: float
    steering: float
    segment_kind: str
    cross_track_error: float


def run_episode(world: TrackWorld, controller, modality: ModalityId,
                weather: WeatherPerturbation = WeatherPerturbation(),
                max_steps: int = 400) -> tuple[list[TrajectoryPoint], EvalReport]:
    """Closed-loop rollout: render -> perturb -> steer -> step, with scoring.

    ``controller`` is a PolicyModel or the string "expert". A segment visit
    is marked missed (arcs, |cte| > half_width) or mistaken (straights,
    |cte| > half_width/2) if the threshold is exceeded at any step of the
    visit. The episode ends at max_steps, on collision, or when the vehicle
    leaves the track entirely.
    """
    use_expert = isinstance(controller, str)
    if use_expert and controller != "expert":
        raise ValueError(f"unknown controller {controller!r}")
    if not use_expert:
        if controller.modality is not None and controller.modality != modality:
            raise ValueError(f"controller expects "
                             f"{controller.modality.name.lower()}, episode uses "
                             f"{modality.name.lower()}")

    geo = world.geometry
    trajectory: list[TrajectoryPoint] = []
    report = EvalReport(episodes=1 if max_steps > 0 else 0, weather=weather)

    visit_idx = -1
    visit_kind = ""
    visit_violated = False

    def close_visit():
        nonlocal visit_idx, visit_violated
        if visit_idx < 0:
            return
        if visit_kind == "arc":
            report.turns_encountered += 1
            report.turns_missed += 1 if visit_violated else 0
        else:
            report.straights_encountered += 1
            report.straights_mistaken += 1 if visit_violated else 0

    for t in range(max_steps):
        pos = world.vehicle.position
        s, cte, seg_idx = geo.project(pos)
        kind = geo.segments[seg_idx].kind

        if seg_idx != visit_idx:
            close_visit()
            visit_idx, visit_kind, visit_violated = seg_idx, kind, False
        limit = geo.half_width if kind == "arc" else 0.5 * geo.half_width
        if abs(cte) > limit:
            visit_violated = True

        collided = any(math.hypot(pos[0] - ob.x, pos[1] - ob.y)
                       <= VEHICLE_RADIUS + ob.radius for ob in geo.obstacles)

        if use_expert:
            steering = expert_policy(world)
        else:
            obs = apply_weather(render(world, modality), _step_weather(weather, t))
            steering = forward(controller, obs)
        trajectory.append(TrajectoryPoint(
            step=t, x=world.vehicle.x, y=world.vehicle.y,
            heading=world.vehicle.heading, steering=steering,
            segment_kind=kind, cross_track_error=cte))

        if collided:
            report.collisions += 1
            break
        if abs(cte) > OFF_TRACK_FACTOR * geo.half_width:
            report.off_track_exits += 1
            break
        world = step(world, steering)
    close_visit()
    return trajectory, report
