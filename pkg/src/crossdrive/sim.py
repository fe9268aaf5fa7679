"""Deterministic 4-way unsignalized intersection environment.

Two perpendicular two-lane roads (lane width 4 m) cross at the origin; the
central 12 m x 12 m square is the conflict zone. The ego vehicle follows a
fixed route (south approach -> left turn -> west exit) under three
meta-actions executed at 1 Hz over a higher-frequency physics simulation,
while human vehicles (HVs) spawn on the other approaches and cross without
yielding. Everything is driven by a single per-instance RNG stream, so a
fixed (seed, action sequence) reproduces an episode bit for bit.

The inner tick loop deliberately uses plain Python floats: at this vehicle
count scalar math is much faster than numpy and keeps a 15 Hz tick cheap.
"""

from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Road geometry (meters)
LANE_OFFSET = 2.0        # lane centerline distance from road axis
ROAD_HALF_WIDTH = 4.0    # two 4 m lanes per road
ZONE_HALF = 6.0          # conflict zone is the square [-6, 6]^2
APPROACH_LEN = 24.0      # HV inbound leg length before the zone edge
EXIT_LEN = 28.0          # HV outbound leg length past the zone edge
EGO_APPROACH_LEN = 16.0  # short enough that the ego enters the render window fast
EGO_EXIT_LEN = 12.0      # ego outbound leg; arrival fires 1 m before its end
LEFT_TURN_RADIUS = 8.0
RIGHT_TURN_RADIUS = 4.0
ARC_STEP = 0.25          # polyline sampling step along turn arcs

# Vehicle footprint and longitudinal control
VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0
ACCEL_LIMIT = 5.0        # hard |acceleration| clamp, m/s^2
SPEED_KP = 2.0           # proportional speed-tracking gain, 1/s

# IDM car-following parameters for human vehicles
IDM_ACCEL_MAX = 3.0
IDM_BRAKE_COMFORT = 2.0
IDM_EXPONENT = 4.0
IDM_MIN_GAP = 2.0
IDM_HEADWAY = 1.5

# HV spawning
HV_SPEED_MEAN = 8.0
HV_SPEED_STD = 1.0
HV_SPEED_MIN = 5.0
HV_SPEED_MAX = 10.0
PLACEMENT_RETRIES = 20

APPROACHES = ("north", "east", "south", "west")
HV_APPROACHES = ("north", "east", "west")   # ego owns the south approach
MOVEMENTS = ("straight", "left", "right")

# Inbound lane: (zone-edge entry point, unit heading)
_ENTRY = {
    "south": ((2.0, -ZONE_HALF), (0.0, 1.0)),
    "north": ((-2.0, ZONE_HALF), (0.0, -1.0)),
    "east": ((ZONE_HALF, 2.0), (-1.0, 0.0)),
    "west": ((-ZONE_HALF, -2.0), (1.0, 0.0)),
}
# Outbound lane: (zone-edge exit point, unit heading)
_EXIT = {
    "north": ((2.0, ZONE_HALF), (0.0, 1.0)),
    "south": ((-2.0, -ZONE_HALF), (0.0, -1.0)),
    "east": ((ZONE_HALF, -2.0), (1.0, 0.0)),
    "west": ((-ZONE_HALF, 2.0), (-1.0, 0.0)),
}
_LEFT_EXIT = {"south": "west", "north": "east", "east": "south", "west": "north"}
_RIGHT_EXIT = {"south": "east", "north": "west", "east": "north", "west": "south"}
_STRAIGHT_EXIT = {"south": "north", "north": "south", "east": "west", "west": "east"}


class MetaAction(IntEnum):
    """High-level speed commands; encoding 0/1/2 is part of the contract."""

    SLOWER = 0
    IDLE = 1
    FASTER = 2


class SimConfigError(ValueError):
    """Scenario configuration violates an invariant."""


class PlacementError(RuntimeError):
    """Could not place the requested vehicles without overlap."""


class EpisodeDoneError(RuntimeError):
    """step() was called on an episode that already terminated."""


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 30.0
    initial_vehicle_count: int = 5
    spawn_probability: float = 0.2
    sim_frequency_hz: int = 15
    policy_frequency_hz: int = 1
    seed: int = 0
    target_speeds: tuple[float, ...] = (0.0, 4.5, 9.0)

    def validate(self) -> None:
        if self.duration_s <= 0:
            raise SimConfigError("duration_s must be positive")
        if self.initial_vehicle_count < 0:
            raise SimConfigError("initial_vehicle_count must be >= 0")
        if not 0.0 <= self.spawn_probability <= 1.0:
            raise SimConfigError("spawn_probability must lie in [0, 1]")
        if self.sim_frequency_hz <= 0 or self.policy_frequency_hz <= 0:
            raise SimConfigError("frequencies must be positive")
        if self.sim_frequency_hz % self.policy_frequency_hz != 0:
            raise SimConfigError(
                "sim_frequency_hz must be divisible by policy_frequency_hz"
            )
        if len(self.target_speeds) < 1:
            raise SimConfigError("target_speeds must not be empty")
        if any(v < 0 for v in self.target_speeds):
            raise SimConfigError("target_speeds must be non-negative")
        if list(self.target_speeds) != sorted(self.target_speeds):
            raise SimConfigError("target_speeds must be ascending")


@dataclass(frozen=True)
class StepOutcome:
    collided: bool
    arrived: bool
    truncated: bool
    ego_speed: float
    sim_time: float


class Route:
    """Polyline path with arc-length parameterization.

    ``s_enter``/``s_exit`` are the arc lengths at which the path crosses
    into and out of the conflict zone; both fall on exact polyline
    vertices by construction.
    """

    __slots__ = ("key", "points", "cumlen", "length", "s_enter", "s_exit")

    def __init__(self, key: tuple[str, str], points: list[tuple[float, float]],
                 enter_index: int, exit_index: int):
        self.key = key
        self.points = points
        cum = [0.0]
        for (x0, y0), (x1, y1) in zip(points, points[1:]):
            cum.append(cum[-1] + math.hypot(x1 - x0, y1 - y0))
        self.cumlen = cum
        self.length = cum[-1]
        self.s_enter = cum[enter_index]
        self.s_exit = cum[exit_index]

    def position(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        i = bisect_right(self.cumlen, s) - 1
        if i >= len(self.points) - 1:
            return self.points[-1]
        seg = self.cumlen[i + 1] - self.cumlen[i]
        t = (s - self.cumlen[i]) / seg
        (x0, y0), (x1, y1) = self.points[i], self.points[i + 1]
        return (x0 + t * (x1 - x0), y0 + t * (y1 - y0))

    def heading(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = bisect_right(self.cumlen, s) - 1
        i = min(i, len(self.points) - 2)
        (x0, y0), (x1, y1) = self.points[i], self.points[i + 1]
        return math.atan2(y1 - y0, x1 - x0)


def _rot90(v: tuple[float, float]) -> tuple[float, float]:
    return (-v[1], v[0])


def _rot270(v: tuple[float, float]) -> tuple[float, float]:
    return (v[1], -v[0])


def _arc_points(center: tuple[float, float], radius: float, a0: float,
                a1: float) -> list[tuple[float, float]]:
    n = max(2, int(math.ceil(abs(a1 - a0) * radius / ARC_STEP)))
    pts = []
    for k in range(1, n + 1):
        a = a0 + (a1 - a0) * k / n
        pts.append((center[0] + radius * math.cos(a),
                    center[1] + radius * math.sin(a)))
    return pts


def build_route(approach: str, movement: str, approach_len: float = APPROACH_LEN,
                exit_len: float = EXIT_LEN) -> Route:
    """Build the lane-following polyline for one (approach, movement) pair."""
    entry, h_in = _ENTRY[approach]
    if movement == "straight":
        exit_leg = _STRAIGHT_EXIT[approach]
    elif movement == "left":
        exit_leg = _LEFT_EXIT[approach]
    elif movement == "right":
        exit_leg = _RIGHT_EXIT[approach]
    else:
        raise ValueError(f"unknown movement {movement!r}")
    exit_pt, h_out = _EXIT[exit_leg]

    start = (entry[0] - h_in[0] * approach_len, entry[1] - h_in[1] * approach_len)
    points = [start, entry]
    if movement == "straight":
        points.append(exit_pt)
    else:
        if movement == "left":
            radius = LEFT_TURN_RADIUS
            center = (entry[0] + radius * _rot90(h_in)[0],
                      entry[1] + radius * _rot90(h_in)[1])
        else:
            radius = RIGHT_TURN_RADIUS
            center = (entry[0] + radius * _rot270(h_in)[0],
                      entry[1] + radius * _rot270(h_in)[1])
        a0 = math.atan2(entry[1] - center[1], entry[0] - center[0])
        a1 = math.atan2(exit_pt[1] - center[1], exit_pt[0] - center[0])
        # quarter turns only: pick the 90 degree sweep in the correct sense
        sweep = math.pi / 2 if movement == "left" else -math.pi / 2
        points.extend(_arc_points(center, radius, a0, a0 + sweep))
        points[-1] = exit_pt  # snap the final arc sample onto the exact exit vertex
        del a1
    exit_index = len(points) - 1
    points.append((exit_pt[0] + h_out[0] * exit_len, exit_pt[1] + h_out[1] * exit_len))
    return Route((approach, movement), points, enter_index=1, exit_index=exit_index)


EGO_ROUTE = build_route("south", "left", EGO_APPROACH_LEN, EGO_EXIT_LEN)

_HV_ROUTES: dict[tuple[str, str], Route] = {
    (a, m): build_route(a, m) for a in HV_APPROACHES for m in MOVEMENTS
}


@dataclass
class VehicleState:
    """Pose, speed and route progress of one vehicle."""

    vid: int
    route: Route
    s: float
    speed: float
    target_speed: float
    is_ego: bool = False
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self) -> None:
        self.sync_pose()

    def sync_pose(self) -> None:
        self.x, self.y = self.route.position(self.s)
        self.heading = self.route.heading(self.s)


def rectangles_overlap(ax: float, ay: float, ah: float, al: float, aw: float,
                       bx: float, by: float, bh: float, bl: float, bw: float) -> bool:
    """Strict separating-axis test for two oriented rectangles.

    Touching boundaries do not count as overlap.
    """
    cax, say = math.cos(ah), math.sin(ah)
    cbx, sby = math.cos(bh), math.sin(bh)
    dx, dy = bx - ax, by - ay
    hal, haw = al * 0.5, aw * 0.5
    hbl, hbw = bl * 0.5, bw * 0.5
    # axes: a's long/lat unit vectors, then b's
    for ux, uy in ((cax, say), (-say, cax), (cbx, sby), (-sby, cbx)):
        dist = abs(dx * ux + dy * uy)
        ra = hal * abs(cax * ux + say * uy) + haw * abs(-say * ux + cax * uy)
        rb = hbl * abs(cbx * ux + sby * uy) + hbw * abs(-sby * ux + cbx * uy)
        if dist >= ra + rb:
            return False
    return True


def _vehicles_overlap(a: VehicleState, b: VehicleState) -> bool:
    return rectangles_overlap(a.x, a.y, a.heading, a.length, a.width,
                              b.x, b.y, b.heading, b.length, b.width)


def hv_policy(vehicle: VehicleState, state: "SimState") -> float:
    """IDM-style longitudinal acceleration for a human vehicle.

    Follows the nearest leader on the vehicle's own route and otherwise
    relaxes toward its target speed. HVs never yield to crossing traffic;
    resolving conflicts is the agent's job. Output is clamped to
    [-ACCEL_LIMIT, IDM_ACCEL_MAX].
    """
    if vehicle.is_ego:
        raise ValueError("hv_policy is only defined for human vehicles")
    v = vehicle.speed
    v0 = max(vehicle.target_speed, 0.1)
    term = 1.0 - (v / v0) ** IDM_EXPONENT

    leader = None
    for other in state.vehicles:
        if other is vehicle or other.route.key != vehicle.route.key:
            continue
        if other.s > vehicle.s and (leader is None or other.s < leader.s):
            leader = other
    if leader is not None:
        gap = max(leader.s - vehicle.s - vehicle.length, 0.01)
        dv = v - leader.speed
        s_star = IDM_MIN_GAP + max(
            0.0,
            v * IDM_HEADWAY + v * dv / (2.0 * math.sqrt(IDM_ACCEL_MAX * IDM_BRAKE_COMFORT)),
        )
        term -= (s_star / gap) ** 2
    accel = IDM_ACCEL_MAX * term
    return min(max(accel, -ACCEL_LIMIT), IDM_ACCEL_MAX)


@dataclass
class SimState:
    """Full world state: vehicles (ego first), clock and the RNG stream."""

    config: ScenarioConfig
    vehicles: list[VehicleState]
    ego_level: int
    rng: np.random.Generator
    tick: int = 0
    steps: int = 0
    done: bool = False
    next_vid: int = 1
    spawn_attempts: int = 0
    spawn_successes: int = 0

    @property
    def ego(self) -> VehicleState:
        return self.vehicles[0]

    @property
    def sim_time(self) -> float:
        return self.tick / self.config.sim_frequency_hz

    def humans(self) -> list[VehicleState]:
        return self.vehicles[1:]

    def fingerprint(self) -> str:
        """Canonical digest of the state, RNG stream included."""
        payload = {
            "vehicles": [
                (v.vid, v.route.key, v.s, v.speed, v.target_speed, v.is_ego,
                 v.x, v.y, v.heading)
                for v in self.vehicles
            ],
            "ego_level": self.ego_level,
            "tick": self.tick,
            "steps": self.steps,
            "done": self.done,
            "next_vid": self.next_vid,
            "rng": repr(self.rng.bit_generator.state),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class IntersectionEnv:
    """Seedable intersection episode generator.

    The first ``reset()`` draws from a generator seeded with
    ``config.seed``; later resets continue the same stream, so a run of
    many episodes is reproducible end to end while episodes still vary.
    A single instance is single-threaded; independent instances share
    nothing and may run in parallel.
    """

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self.state: SimState | None = None

    def reset(self) -> tuple[SimState, "Observation"]:
        from .render import initial_observation

        cfg = self.config
        levels = cfg.target_speeds
        ego_level = len(levels) // 2   # middle level: headroom both ways
        ego = VehicleState(vid=0, route=EGO_ROUTE, s=0.0,
                           speed=levels[ego_level], target_speed=levels[ego_level],
                           is_ego=True)
        state = SimState(config=cfg, vehicles=[ego], ego_level=ego_level,
                         rng=self._rng)
        for _ in range(cfg.initial_vehicle_count):
            placed = False
            for _ in range(PLACEMENT_RETRIES):
                veh = self._draw_hv(state, along_approach=True)
                if not any(_vehicles_overlap(veh, other) for other in state.vehicles):
                    state.vehicles.append(veh)
                    state.next_vid += 1
                    placed = True
                    break
            if not placed:
                raise PlacementError(
                    f"could not place {cfg.initial_vehicle_count} vehicles "
                    f"without overlap after {PLACEMENT_RETRIES} retries"
                )
        self.state = state
        return state, initial_observation(state)

    def _draw_hv(self, state: SimState, along_approach: bool) -> VehicleState:
        rng = state.rng
        approach = HV_APPROACHES[rng.integers(0, len(HV_APPROACHES))]
        movement = MOVEMENTS[rng.integers(0, len(MOVEMENTS))]
        s = float(rng.uniform(0.0, APPROACH_LEN - VEHICLE_LENGTH)) if along_approach else 0.0
        speed = float(np.clip(rng.normal(HV_SPEED_MEAN, HV_SPEED_STD),
                              HV_SPEED_MIN, HV_SPEED_MAX))
        return VehicleState(vid=state.next_vid, route=_HV_ROUTES[(approach, movement)],
                            s=s, speed=speed, target_speed=speed)

    def step(self, action: MetaAction | int) -> tuple[SimState, StepOutcome]:
        state = self.state
        if state is None:
            raise EpisodeDoneError("reset() must be called before step()")
        if state.done:
            raise EpisodeDoneError("episode already terminated")
        cfg = state.config
        action = MetaAction(int(action))
        if action == MetaAction.SLOWER:
            state.ego_level = max(state.ego_level - 1, 0)
        elif action == MetaAction.FASTER:
            state.ego_level = min(state.ego_level + 1, len(cfg.target_speeds) - 1)
        state.ego.target_speed = cfg.target_speeds[state.ego_level]

        if cfg.spawn_probability > 0.0:
            state.spawn_attempts += 1
            if state.rng.random() < cfg.spawn_probability:
                veh = self._draw_hv(state, along_approach=False)
                if not any(_vehicles_overlap(veh, other) for other in state.vehicles):
                    state.vehicles.append(veh)
                    state.next_vid += 1
                    state.spawn_successes += 1

        ticks = cfg.sim_frequency_hz // cfg.policy_frequency_hz
        dt = 1.0 / cfg.sim_frequency_hz
        collided = arrived = False
        for _ in range(ticks):
            accels = []
            for veh in state.vehicles:
                if veh.is_ego:
                    a = SPEED_KP * (veh.target_speed - veh.speed)
                    a = min(max(a, -ACCEL_LIMIT), ACCEL_LIMIT)
                else:
                    a = hv_policy(veh, state)
                accels.append(a)
            for veh, a in zip(state.vehicles, accels):
                veh.speed = max(veh.speed + a * dt, 0.0)
                veh.s += veh.speed * dt
                veh.sync_pose()
            state.vehicles = [state.ego] + [
                v for v in state.humans() if v.s < v.route.length
            ]
            state.tick += 1
            ego = state.ego
            for hv in state.humans():
                if _vehicles_overlap(ego, hv):
                    collided = True
                    break
            if collided:
                break
            if ego.s >= ego.route.length - 1.0:
                arrived = True
                break

        truncated = False
        if not (collided or arrived) and state.sim_time >= cfg.duration_s:
            truncated = True
        state.steps += 1
        if collided or arrived or truncated:
            state.done = True
        outcome = StepOutcome(collided=collided, arrived=arrived,
                              truncated=truncated, ego_speed=state.ego.speed,
                              sim_time=state.sim_time)
        return state, outcome
