"""Bird's-eye-view rasterization of training samples.

A sample renders into a 33-channel occupancy stack at two scopes: a
~300 m view field for long-range context and a ~60 m field for subtle
maneuvers. Channel layout (fixed):

    0      route roadblocks
    1      route lane centerlines
    2-21   one channel per map element kind (MAP_CHANNEL_KINDS below;
           kinds the generator never emits stay all-zero)
    22-24  traffic-light intersection blocks by state: green, red, yellow
    25-32  agent boxes by kind over the 21 history frames: ego, vehicle,
           pedestrian, cyclist, then reserved slots

The grid is ego-centric: the anchor pose sits at the grid center with
+x (forward) up and +y (left) toward the left image border. Fill rule:
a pixel is set when its center lies inside the shape (scanline-free
point containment), which keeps renders deterministic and testable.
History frames share one channel via an intensity ramp: frame age a
(0 = current) renders at (21 - a) / 21, so motion cues survive the union.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .scenario import HISTORY_FRAMES, TrainingSample

N_CHANNELS = 33
CH_ROUTE_BLOCKS = 0
CH_ROUTE_LANES = 1
CH_MAP_BASE = 2
CH_LIGHT_BASE = 22                       # +0 green, +1 red, +2 yellow
CH_AGENT_BASE = 25

MAP_CHANNEL_KINDS = (
    "lane_centerline", "lane_boundary", "roadblock", "intersection_block",
    "road_connector", "stop_line", "crosswalk", "walkway", "speed_bump",
    "parking_area", "reserved_10", "reserved_11", "reserved_12", "reserved_13",
    "reserved_14", "reserved_15", "reserved_16", "reserved_17", "reserved_18",
    "reserved_19",
)
LIGHT_OFFSETS = {"green": 0, "red": 1, "yellow": 2}
AGENT_CHANNEL_OFFSETS = {"ego": 0, "vehicle": 1, "pedestrian": 2, "cyclist": 3}

SCOPES = {"high_res_60m": 60.0, "low_res_300m": 300.0}
POLYLINE_HALFWIDTH_M = 0.5


@dataclass
class RasterStack:
    channels: np.ndarray                 # (33, H, W), values in [0, 1]
    scope: str
    resolution: int
    view_field_m: float

    def __post_init__(self):
        if self.channels.shape != (N_CHANNELS, self.resolution, self.resolution):
            raise ShapeError(f"raster stack {self.channels.shape}, expected "
                             f"{(N_CHANNELS, self.resolution, self.resolution)}")
        if self.channels.min() < 0.0 or self.channels.max() > 1.0:
            raise ValueError("raster values must lie in [0, 1]")


class _Grid:
    """World (x fwd, y left) <-> pixel (row, col) mapping for one scope."""

    def __init__(self, resolution: int, view_field_m: float):
        self.res = resolution
        self.pix = view_field_m / resolution
        self.center = (resolution - 1) / 2.0

    def to_rc(self, pts: np.ndarray) -> np.ndarray:
        rc = np.empty_like(pts)
        rc[..., 0] = self.center - pts[..., 0] / self.pix
        rc[..., 1] = self.center - pts[..., 1] / self.pix
        return rc


def _fill_polygon(grid: np.ndarray, rc: np.ndarray, value: float) -> int:
    """Set pixels whose centers fall inside polygon rc ((N,2) row/col)."""
    res = grid.shape[0]
    r_lo = max(int(np.floor(rc[:, 0].min())), 0)
    r_hi = min(int(np.ceil(rc[:, 0].max())), res - 1)
    c_lo = max(int(np.floor(rc[:, 1].min())), 0)
    c_hi = min(int(np.ceil(rc[:, 1].max())), res - 1)
    if r_lo > r_hi or c_lo > c_hi:
        return 0
    rr, cc = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1), indexing="ij")
    inside = np.zeros(rr.shape, dtype=bool)
    n = rc.shape[0]
    for i in range(n):
        r1, c1 = rc[i]
        r2, c2 = rc[(i + 1) % n]
        if r1 == r2:
            continue
        crosses = (r1 > rr) != (r2 > rr)
        with np.errstate(divide="ignore", invalid="ignore"):
            cx = (c2 - c1) * (rr - r1) / (r2 - r1) + c1
        inside ^= crosses & (cc < cx)
    if not inside.any():
        return 0
    sub = grid[r_lo:r_hi + 1, c_lo:c_hi + 1]
    np.maximum(sub, np.where(inside, value, 0.0), out=sub)
    return int(inside.sum())


def _fill_polyline(grid: np.ndarray, rc: np.ndarray, halfwidth_px: float,
                   value: float) -> None:
    res = grid.shape[0]
    for i in range(rc.shape[0] - 1):
        p, q = rc[i], rc[i + 1]
        r_lo = max(int(np.floor(min(p[0], q[0]) - halfwidth_px)), 0)
        r_hi = min(int(np.ceil(max(p[0], q[0]) + halfwidth_px)), res - 1)
        c_lo = max(int(np.floor(min(p[1], q[1]) - halfwidth_px)), 0)
        c_hi = min(int(np.ceil(max(p[1], q[1]) + halfwidth_px)), res - 1)
        if r_lo > r_hi or c_lo > c_hi:
            continue
        rr, cc = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1),
                             indexing="ij")
        d = q - p
        len2 = d @ d
        if len2 == 0.0:
            dist2 = (rr - p[0]) ** 2 + (cc - p[1]) ** 2
        else:
            t = np.clip(((rr - p[0]) * d[0] + (cc - p[1]) * d[1]) / len2, 0.0, 1.0)
            dist2 = (rr - (p[0] + t * d[0])) ** 2 + (cc - (p[1] + t * d[1])) ** 2
        near = dist2 <= halfwidth_px ** 2
        if near.any():
            sub = grid[r_lo:r_hi + 1, c_lo:c_hi + 1]
            np.maximum(sub, np.where(near, value, 0.0), out=sub)


def _fill_box(grid: np.ndarray, g: _Grid, cx: float, cy: float, yaw: float,
              length: float, width: float, value: float) -> None:
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    corners = np.array([
        (cx + c * hl - s * hw, cy + s * hl + c * hw),
        (cx + c * hl + s * hw, cy + s * hl - c * hw),
        (cx - c * hl + s * hw, cy - s * hl - c * hw),
        (cx - c * hl - s * hw, cy - s * hl + c * hw),
    ])
    filled = _fill_polygon(grid, g.to_rc(corners), value)
    if filled == 0:
        # box smaller than a coarse pixel: keep it visible at its center
        r = int(round(g.center - cx / g.pix))
        col = int(round(g.center - cy / g.pix))
        if 0 <= r < g.res and 0 <= col < g.res:
            grid[r, col] = max(grid[r, col], value)


def rasterize(sample: TrainingSample, scope: str, resolution: int = 64) -> RasterStack:
    """Render one sample into a 33-channel stack at the given scope."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope {scope!r}, expected one of {sorted(SCOPES)}")
    if resolution < 8:
        raise ConfigError(f"resolution {resolution} below minimum 8")
    field = SCOPES[scope]
    g = _Grid(resolution, field)
    channels = np.zeros((N_CHANNELS, resolution, resolution))
    half_px = max(POLYLINE_HALFWIDTH_M / g.pix, 0.5)

    route = set(sample.route)
    by_id = {e.elem_id: e for e in sample.map_elements}
    for e in sample.map_elements:
        rc = g.to_rc(e.points)
        if e.kind in MAP_CHANNEL_KINDS:
            ch = CH_MAP_BASE + MAP_CHANNEL_KINDS.index(e.kind)
            if e.closed:
                _fill_polygon(channels[ch], rc, 1.0)
            else:
                _fill_polyline(channels[ch], rc, half_px, 1.0)
        if e.elem_id in route and e.closed:
            _fill_polygon(channels[CH_ROUTE_BLOCKS], rc, 1.0)
        if e.kind == "lane_centerline" and e.parent in route:
            _fill_polyline(channels[CH_ROUTE_LANES], rc, half_px, 1.0)

    for elem_id, state in sample.traffic_lights.items():
        if state not in LIGHT_OFFSETS:
            raise ConfigError(f"unknown traffic light state {state!r}")
        elem = by_id.get(elem_id)
        if elem is not None and elem.closed:
            _fill_polygon(channels[CH_LIGHT_BASE + LIGHT_OFFSETS[state]],
                          g.to_rc(elem.points), 1.0)

    def draw_history(track_states, width, length, channel):
        n = track_states.shape[0]
        for i in range(n):
            x, y, yaw = track_states[i, 0:3]
            intensity = (i + 1) / HISTORY_FRAMES
            _fill_box(channels[channel], g, x, y, yaw, length, width, intensity)

    draw_history(sample.ego_history, sample.ego_width, sample.ego_length,
                 CH_AGENT_BASE + AGENT_CHANNEL_OFFSETS["ego"])
    for a in sample.agents:
        ch = CH_AGENT_BASE + AGENT_CHANNEL_OFFSETS[a.kind]
        draw_history(a.states, a.width, a.length, ch)

    return RasterStack(channels=channels, scope=scope, resolution=resolution,
                       view_field_m=field)


def dual_scope(sample: TrainingSample, resolution: int = 64) -> tuple[RasterStack, RasterStack]:
    """Render both scopes; the returned order (high, low) is fixed."""
    high = rasterize(sample, "high_res_60m", resolution)
    low = rasterize(sample, "low_res_300m", resolution)
    return high, low


def write_channel_pgms(stack: RasterStack, out_dir: str, prefix: str = "") -> list[str]:
    """Debug dump: one 8-bit PGM per channel, channel index in the name."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(N_CHANNELS):
        img = np.round(stack.channels[i] * 255).astype(np.uint8)
        path = os.path.join(out_dir, f"{prefix}ch{i:02d}.pgm")
        with open(path, "wb") as f:
            f.write(f"P5 {stack.resolution} {stack.resolution} 255\n".encode())
            f.write(img.tobytes())
        paths.append(path)
    return paths
