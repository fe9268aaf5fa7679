"""Top-down grayscale observation rendering and kinematic features.

A frame is a (64, 128) uint8 array covering the world window
[-32, 32] m x [-16, 16] m at 2 px/m, north up: row 0 is y = +16 m and
column 0 is x = -32 m. Intensities: background 0, roads 100, human
vehicles 200, ego 255. A pixel is painted when its center lies inside the
shape, with no anti-aliasing, so identical states rasterize to identical
buffers. Networks consume these frames scaled to [0, 1]; the integer
buffers here stay byte-exact for hashing and export.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .sim import APPROACHES, ROAD_HALF_WIDTH, ZONE_HALF

if TYPE_CHECKING:
    from .sim import SimState, VehicleState

FRAME_WIDTH = 128
FRAME_HEIGHT = 64
PX_PER_M = 2.0
WINDOW_X = 32.0
WINDOW_Y = 16.0
STACK_SIZE = 4
FEATURE_DIM = 10
NO_VEHICLE_DISTANCE = 1e4   # sentinel for "no HV on this approach"

INTENSITY_ROAD = 100
INTENSITY_HV = 200
INTENSITY_EGO = 255

# pixel-center coordinates in world frame, used for road masks
_COL_X = -WINDOW_X + (np.arange(FRAME_WIDTH) + 0.5) / PX_PER_M
_ROW_Y = WINDOW_Y - (np.arange(FRAME_HEIGHT) + 0.5) / PX_PER_M

_ROAD_BASE = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8)
_ROAD_BASE[:, np.abs(_COL_X) <= ROAD_HALF_WIDTH] = INTENSITY_ROAD
_ROAD_BASE[np.abs(_ROW_Y) <= ROAD_HALF_WIDTH, :] = INTENSITY_ROAD


@dataclass(frozen=True)
class Observation:
    """Stack of the 4 most recent frames (oldest first) plus features."""

    frames: tuple[np.ndarray, ...]
    features: np.ndarray

    def stacked(self) -> np.ndarray:
        """(4, 64, 128) uint8 view of the frame stack."""
        return np.stack(self.frames)


def _paint_vehicle(frame: np.ndarray, veh: "VehicleState", intensity: int) -> None:
    half_diag = 0.5 * np.hypot(veh.length, veh.width)
    c0 = max(int((veh.x - half_diag + WINDOW_X) * PX_PER_M) - 1, 0)
    c1 = min(int((veh.x + half_diag + WINDOW_X) * PX_PER_M) + 2, FRAME_WIDTH)
    r0 = max(int((WINDOW_Y - veh.y - half_diag) * PX_PER_M) - 1, 0)
    r1 = min(int((WINDOW_Y - veh.y + half_diag) * PX_PER_M) + 2, FRAME_HEIGHT)
    if c0 >= c1 or r0 >= r1:
        return
    xs = _COL_X[c0:c1] - veh.x
    ys = _ROW_Y[r0:r1] - veh.y
    cos_h, sin_h = np.cos(veh.heading), np.sin(veh.heading)
    local_x = np.add.outer(ys * sin_h, xs * cos_h)
    local_y = np.add.outer(ys * cos_h, -xs * sin_h)
    inside = (np.abs(local_x) <= veh.length * 0.5) & (np.abs(local_y) <= veh.width * 0.5)
    frame[r0:r1, c0:c1][inside] = intensity


def render(state: "SimState") -> np.ndarray:
    """Rasterize the scene; ego is drawn last so it wins overlaps."""
    frame = _ROAD_BASE.copy()
    for veh in state.humans():
        _paint_vehicle(frame, veh, INTENSITY_HV)
    _paint_vehicle(frame, state.ego, INTENSITY_EGO)
    return frame


def distance_to_conflict(veh: "VehicleState") -> float:
    """Arc-length distance to the conflict zone along the vehicle's route.

    Ego semantics: distance to the zone entry, negative as soon as the ego
    has committed into the zone (once inside it should clear, not stall).
    HV semantics: positive before the zone, exactly 0 while inside it (the
    zone is occupied), negative after leaving.
    """
    r = veh.route
    if veh.is_ego:
        return r.s_enter - veh.s
    if veh.s < r.s_enter:
        return r.s_enter - veh.s
    if veh.s <= r.s_exit:
        return 0.0
    return r.s_exit - veh.s


def features(state: "SimState") -> np.ndarray:
    """10-d kinematic summary used by reward models, not by the RL nets.

    Layout: [ego_speed, ego_distance_to_conflict] followed by
    (nearest-HV distance-to-conflict, nearest-HV speed) for each approach
    in order north, east, south, west. The nearest HV per approach is the
    one with the smallest non-negative distance; empty slots hold the
    NO_VEHICLE_DISTANCE sentinel and speed 0.
    """
    vec = np.zeros(FEATURE_DIM, dtype=np.float64)
    ego = state.ego
    vec[0] = ego.speed
    vec[1] = distance_to_conflict(ego)
    best: dict[str, tuple[float, float]] = {}
    for hv in state.humans():
        d = distance_to_conflict(hv)
        if d < 0.0:
            continue
        approach = hv.route.key[0]
        if approach not in best or d < best[approach][0]:
            best[approach] = (d, hv.speed)
    for i, approach in enumerate(APPROACHES):
        d, v = best.get(approach, (NO_VEHICLE_DISTANCE, 0.0))
        vec[2 + 2 * i] = d
        vec[3 + 2 * i] = v
    return vec


def initial_observation(state: "SimState") -> Observation:
    frame = render(state)
    return Observation(frames=(frame,) * STACK_SIZE, features=features(state))


def push_frame(obs: Observation, frame: np.ndarray,
               features_vec: np.ndarray | None = None) -> Observation:
    """Drop the oldest frame and append ``frame``.

    Passing ``features_vec`` refreshes the feature block; otherwise the
    previous features are carried over unchanged.
    """
    feats = obs.features if features_vec is None else features_vec
    return Observation(frames=obs.frames[1:] + (frame,), features=feats)


def write_pgm(frame: np.ndarray, path: str | Path) -> None:
    """Binary PGM export, header exactly ``P5 128 64 255``."""
    if frame.shape != (FRAME_HEIGHT, FRAME_WIDTH) or frame.dtype != np.uint8:
        raise ValueError(f"expected (64, 128) uint8 frame, got {frame.shape} {frame.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P5 128 64 255\n")
        fh.write(frame.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm` (or any P5 file)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()
