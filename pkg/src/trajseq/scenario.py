"""Procedural driving scenarios and training samples.

Generates desk-scale stand-ins for large driving logs: a typed polyline
map, a route, traffic lights, lane-following agents, and an ego track
integrated with a bounded-curvature bicycle model at 10 Hz. Samples
cover 2 s of history and 8 s of future around an anchor frame and are
normalized to the ego frame at the anchor (x forward, y left).

Everything is deterministic in (seed, template): generation draws only
from named counter-based streams.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import HorizonError, InsufficientDataError, ParseError
from .rng import make_rng

DT = 0.1                          # 10 Hz
HISTORY_FRAMES = 21               # t-2.0s .. t inclusive
FUTURE_FRAMES = 80                # t+0.1s .. t+8.0s
SCENARIO_FRAMES = HISTORY_FRAMES + FUTURE_FRAMES   # 101
DEFAULT_ANCHOR = HISTORY_FRAMES - 1                # frame 20
# key points at 8s, 4s, 2s, 1s, 0.5s in the future (farthest first)
KEY_POINT_FRAMES = (80, 40, 20, 10, 5)
KEY_POINT_OFFSETS_S = (8.0, 4.0, 2.0, 1.0, 0.5)

TEMPLATES = ("straight", "intersection_turn", "lane_change", "stop_and_go")
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
LIGHT_STATES = ("green", "red", "yellow")

MAX_CURVATURE = 0.2               # 1/m, bicycle-model bound
MAX_SPEED = 20.0                  # m/s
LANE_WIDTH = 3.5

FORMAT_NAME = "trajseq.samples"
FORMAT_VERSION = 1


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.isscalar(a) or np.ndim(a) == 0 else w


@dataclass(frozen=True)
class AgentState:
    """One agent at one frame. Positions in meters, yaw in (-pi, pi]."""
    x: float
    y: float
    yaw: float
    vx: float
    vy: float
    width: float
    length: float
    kind: str

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise ValueError(f"non-positive box dims {self.width}x{self.length}")
        if not (-np.pi < self.yaw <= np.pi):
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]")
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")


@dataclass
class AgentTrack:
    """An agent's box dims plus (T, 5) states [x, y, yaw, vx, vy]."""
    kind: str
    width: float
    length: float
    states: np.ndarray

    def state_at(self, frame: int) -> AgentState:
        x, y, yaw, vx, vy = self.states[frame]
        return AgentState(x, y, yaw, vx, vy, self.width, self.length, self.kind)


@dataclass
class MapElement:
    """A typed polyline (closed=False) or polygon (closed=True)."""
    elem_id: int
    kind: str
    points: np.ndarray            # (N, 2)
    closed: bool
    parent: int | None = None     # owning roadblock id, for route-lane lookup


@dataclass
class Scenario:
    seed: int
    template: str
    tag: str
    map_elements: list[MapElement]
    route: list[int]
    traffic_lights: dict[int, str]
    agents: list[AgentTrack]
    ego: AgentTrack

    def __post_init__(self):
        if self.ego.states.shape[0] < SCENARIO_FRAMES:
            raise ValueError(f"ego track has {self.ego.states.shape[0]} frames, "
                             f"needs >= {SCENARIO_FRAMES}")
        if not self.route:
            raise ValueError("route must be non-empty")
        for a in self.agents:
            if a.states.shape[0] != self.ego.states.shape[0]:
                raise ValueError("agent tracks must be time-aligned with ego")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.seed, self.template, self.tag, self.route,
                       sorted(self.traffic_lights.items()))).encode())
        for e in self.map_elements:
            h.update(repr((e.elem_id, e.kind, e.closed, e.parent)).encode())
            h.update(e.points.tobytes())
        for a in [self.ego] + self.agents:
            h.update(repr((a.kind, a.width, a.length)).encode())
            h.update(a.states.tobytes())
        return h.hexdigest()


@dataclass
class TrainingSample:
    """A scenario slice in the anchor-local frame (anchor pose -> origin)."""
    sample_id: str
    seed: int
    template: str
    tag: str
    anchor_frame: int
    ego_width: float
    ego_length: float
    ego_history: np.ndarray       # (21, 5), last row pose is exactly (0, 0, 0)
    ego_future: np.ndarray        # (80, 5)
    key_points: np.ndarray        # (5, 3) x, y, yaw at KEY_POINT_FRAMES
    endpoint: np.ndarray          # (2,) the 8 s endpoint
    map_elements: list[MapElement]
    route: list[int]
    traffic_lights: dict[int, str]
    agents: list[AgentTrack]      # (21, 5) histories only
    proposal_index: int | None = None


@dataclass(frozen=True)
class IntentionVocab:
    """Discrete endpoint anchors in the local frame."""
    points: np.ndarray            # (K, 2)

    @property
    def k(self) -> int:
        return int(self.points.shape[0])

    def vocab_hash(self) -> str:
        payload = json.dumps([[float(x), float(y)] for x, y in self.points])
        return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# ego integration


def _integrate_unicycle(v0: float, control, frames: int = SCENARIO_FRAMES) -> np.ndarray:
    """Forward-Euler bicycle/unicycle rollout.

    control(t, x, y, psi, v) -> (accel, curvature); curvature couples yaw
    rate to speed, so heading error metrics see physically plausible
    yaw/position pairs.
    """
    states = np.zeros((frames, 5))
    x = y = psi = 0.0
    v = float(v0)
    for t in range(frames):
        states[t] = (x, y, psi, v * np.cos(psi), v * np.sin(psi))
        a, kappa = control(t, x, y, psi, v)
        kappa = float(np.clip(kappa, -MAX_CURVATURE, MAX_CURVATURE))
        x += v * np.cos(psi) * DT
        y += v * np.sin(psi) * DT
        psi = wrap_angle(psi + v * kappa * DT)
        v = float(np.clip(v + a * DT, 0.0, MAX_SPEED))
    return states


def _const_velocity_track(kind: str, width: float, length: float,
                          p0, heading: float, speed: float,
                          frames: int = SCENARIO_FRAMES) -> AgentTrack:
    t = np.arange(frames)[:, None] * DT
    d = np.array([np.cos(heading), np.sin(heading)])
    states = np.zeros((frames, 5))
    states[:, 0:2] = np.asarray(p0) + t * speed * d
    states[:, 2] = wrap_angle(heading)
    states[:, 3] = speed * d[0]
    states[:, 4] = speed * d[1]
    return AgentTrack(kind, width, length, states)


# ---------------------------------------------------------------------------
# map building blocks (template frame: ego starts at origin heading +x)


class _MapBuilder:
    def __init__(self):
        self.elements: list[MapElement] = []
        self._next_id = 0

    def add(self, kind: str, points, closed: bool, parent: int | None = None) -> int:
        eid = self._next_id
        self._next_id += 1
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self.elements.append(MapElement(eid, kind, pts, closed, parent))
        return eid


def _rect(x0, x1, y0, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _straight_road(mb: _MapBuilder, x_lo: float, x_hi: float,
                   lane_ys=(-LANE_WIDTH, 0.0, LANE_WIDTH), n_blocks: int = 4) -> list[int]:
    """A multi-lane road along +x split into consecutive roadblocks."""
    y_edge = max(abs(y) for y in lane_ys) + LANE_WIDTH / 2
    cuts = np.linspace(x_lo, x_hi, n_blocks + 1)
    blocks = []
    for i in range(n_blocks):
        bid = mb.add("roadblock", _rect(cuts[i], cuts[i + 1], -y_edge, y_edge), closed=True)
        blocks.append(bid)
        for y in lane_ys:
            mb.add("lane_centerline", [(cuts[i], y), (cuts[i + 1], y)], closed=False, parent=bid)
    for y in list(lane_ys) + [y_edge, -y_edge]:
        off = LANE_WIDTH / 2 if y in lane_ys else 0.0
        if off:
            mb.add("lane_boundary", [(x_lo, y - off), (x_hi, y - off)], closed=False)
    mb.add("lane_boundary", [(x_lo, y_edge), (x_hi, y_edge)], closed=False)
    mb.add("lane_boundary", [(x_lo, -y_edge), (x_hi, -y_edge)], closed=False)
    return blocks


# ---------------------------------------------------------------------------
# templates


def _build_straight(rng):
    mb = _MapBuilder()
    blocks = _straight_road(mb, -80.0, 260.0)
    v0 = rng.uniform(8.0, 14.0)
    phase = rng.uniform(0.0, 2 * np.pi)

    def control(t, x, y, psi, v):
        return 0.3 * np.sin(2 * np.pi * t / 60.0 + phase), 0.0

    ego = _integrate_unicycle(v0, control)
    agents = [
        _const_velocity_track("vehicle", 2.0, 4.6, (rng.uniform(18, 36), 0.0), 0.0,
                              v0 * rng.uniform(0.75, 1.1)),
        _const_velocity_track("vehicle", 2.1, 4.8, (rng.uniform(-20, 5), LANE_WIDTH), 0.0,
                              v0 * rng.uniform(0.9, 1.2)),
    ]
    if rng.random() < 0.7:
        agents.append(_const_velocity_track("vehicle", 2.0, 4.4,
                                            (rng.uniform(30, 70), -LANE_WIDTH), 0.0, 0.0))
    if rng.random() < 0.5:
        agents.append(_const_velocity_track("cyclist", 0.7, 1.8,
                                            (rng.uniform(5, 40), 4.9), 0.0, rng.uniform(3, 6)))
    return mb, blocks, {}, agents, ego


def _build_lane_change(rng):
    mb = _MapBuilder()
    blocks = _straight_road(mb, -80.0, 260.0)
    v0 = rng.uniform(9.0, 13.0)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    f0 = int(rng.integers(30, 43))
    dur = int(rng.integers(22, 31))
    path_len = v0 * dur * DT
    # one sine period of curvature produces an S-curve with ~3.5 m offset
    kappa_max = min(2 * np.pi * LANE_WIDTH / path_len ** 2, MAX_CURVATURE)

    def control(t, x, y, psi, v):
        if f0 <= t < f0 + dur:
            return 0.0, direction * kappa_max * np.sin(2 * np.pi * (t - f0) / dur)
        return 0.0, -psi * 0.5  # settle heading back onto the lane axis

    ego = _integrate_unicycle(v0, control)
    agents = [
        _const_velocity_track("vehicle", 2.0, 4.6, (rng.uniform(15, 25), 0.0), 0.0,
                              v0 * rng.uniform(0.55, 0.75)),
        _const_velocity_track("vehicle", 2.1, 4.8,
                              (rng.uniform(-30, -12), direction * LANE_WIDTH), 0.0,
                              v0 * rng.uniform(0.8, 1.0)),
    ]
    return mb, blocks, {}, agents, ego


def _build_intersection(rng, *, light: str, turning: bool):
    mb = _MapBuilder()
    half = 12.0
    lane_ys = (-1.75, 1.75)
    # four arm roadblocks plus the signalized center block
    arm_w = _straight_road(mb, -90.0, -half, lane_ys, n_blocks=1)[0]
    arm_e = _straight_road(mb, half, 90.0, lane_ys, n_blocks=1)[0]
    center = mb.add("intersection_block", _rect(-half, half, -half, half), closed=True)
    arm_n = mb.add("roadblock", _rect(-5.25, 5.25, half, 90.0), closed=True)
    arm_s = mb.add("roadblock", _rect(-5.25, 5.25, -90.0, -half), closed=True)
    for x in (-1.75, 1.75):
        mb.add("lane_centerline", [(x, half), (x, 90.0)], closed=False, parent=arm_n)
        mb.add("lane_centerline", [(x, -90.0), (x, -half)], closed=False, parent=arm_s)
    mb.add("stop_line", [(-half, -5.25), (-half, 5.25)], closed=False)
    mb.add("stop_line", [(half, -5.25), (half, 5.25)], closed=False)
    for side in (-1, 1):
        mb.add("crosswalk", _rect(side * half, side * (half + 3), -5.25, 5.25), closed=True)
        mb.add("crosswalk", _rect(-5.25, 5.25, side * half, side * (half + 3)), closed=True)
    # turn connectors through the center, as guide polylines
    arc = np.linspace(0, np.pi / 2, 12)
    left = np.stack([-half + 10.25 * np.sin(arc), -1.75 + 10.25 * (1 - np.cos(arc))], axis=1)
    right = np.stack([-half + 7.0 * np.sin(arc), -1.75 - 7.0 * (1 - np.cos(arc))], axis=1)
    mb.add("road_connector", left, closed=False)
    mb.add("road_connector", right, closed=False)
    mb.add("road_connector", [(-half, -1.75), (half, -1.75)], closed=False)

    lights = {center: light}

    if turning:
        direction = 1.0 if rng.random() < 0.5 else -1.0
        v0 = rng.uniform(6.0, 9.0)
        v_turn = rng.uniform(4.5, 6.5)
        radius = rng.uniform(8.0, 12.0) if direction > 0 else rng.uniform(5.5, 8.0)
        target_turn_s = rng.uniform(3.6, 5.2)
        approach = 2.0 * v0 + (target_turn_s - 2.0) * (v0 + v_turn) / 2.0
        x_start = -half - approach + rng.uniform(-1.0, 1.0)
        turn_total = np.pi / 2 + rng.uniform(-0.06, 0.06)
        # the integrator starts the ego at its own origin; the block edge
        # sits `approach` meters ahead along +x
        trigger_x = approach - 3.0
        state = {"turned": 0.0}

        def control(t, x, y, psi, v):
            if state["turned"] >= turn_total:
                return min(1.0, (v0 - v) * 2.0), -wrap_angle(psi - direction * np.pi / 2) * 0.4
            if x >= trigger_x or state["turned"] > 0.0:
                state["turned"] += v * (1.0 / radius) * DT
                return 0.0, direction / radius
            return (-1.5 if v > v_turn else 0.0), 0.0

        ego = _integrate_unicycle(v0, control)
        ego[:, 0] += x_start
        ego[:, 1] += -1.75
        exit_block = arm_n if direction > 0 else arm_s
        route = [arm_w, center, exit_block]
    else:
        # straight crossing used by red-light stop-and-go scenes
        ego = None
        route = [arm_w, center, arm_e]
        direction = 0.0

    cross_speed = rng.uniform(5.0, 9.0)
    agents = [
        _const_velocity_track("vehicle", 2.0, 4.6, (1.75, rng.uniform(35, 70)),
                              -np.pi / 2, cross_speed),
        _const_velocity_track("vehicle", 2.1, 4.7, (rng.uniform(16, 28), 1.75),
                              np.pi, 0.0),
        _const_velocity_track("pedestrian", 0.6, 0.6,
                              (rng.uniform(-4, 4), half + 1.5), 0.0, rng.uniform(0.8, 1.5)),
    ]
    if turning:
        ego_states = ego
        return mb, route, lights, agents, ego_states
    return mb, route, lights, agents, None


def _build_intersection_turn(rng):
    return _build_intersection(rng, light="green" if rng.random() < 0.85 else "yellow",
                               turning=True)


def _build_stop_and_go(rng):
    mb = _MapBuilder()
    blocks = _straight_road(mb, -80.0, 180.0, n_blocks=3)
    x_stop = rng.uniform(30.0, 50.0)
    mb.add("stop_line", [(x_stop, -5.25), (x_stop, 5.25)], closed=False)
    center = mb.add("intersection_block", _rect(x_stop + 2, x_stop + 26, -12, 12), closed=True)
    mb.add("crosswalk", _rect(x_stop + 0.5, x_stop + 2.0, -5.25, 5.25), closed=True)
    lights = {center: "red"}

    v0 = rng.uniform(7.0, 11.0)
    brake_target = x_stop - rng.uniform(1.0, 2.5)
    dwell = int(rng.integers(15, 31))
    resume = rng.random() < 0.7
    state = {"stopped_at": None}

    def control(t, x, y, psi, v):
        if state["stopped_at"] is None:
            gap = brake_target - x
            if v < 0.05:
                state["stopped_at"] = t
                return -1.0, 0.0
            if v < 1.0:
                return -1.5, 0.0  # crawl-speed brake so v actually reaches 0
            if gap <= v * v / (2.0 * 2.5) + v * DT:
                return -min(3.0, v * v / (2.0 * max(gap, 0.3))), 0.0
            return 0.0, 0.0
        if resume and t > state["stopped_at"] + dwell:
            return (1.5 if v < 0.8 * v0 else 0.0), 0.0
        return -1.0, 0.0

    ego = _integrate_unicycle(v0, control)
    agents = [
        _const_velocity_track("vehicle", 2.0, 4.6, (x_stop - 8.0, LANE_WIDTH), 0.0, 0.0),
        _const_velocity_track("pedestrian", 0.6, 0.6, (x_stop + 1.2, -6.0),
                              np.pi / 2, rng.uniform(0.9, 1.4)),
    ]
    return mb, blocks, lights, agents, ego


_BUILDERS = {
    "straight": _build_straight,
    "lane_change": _build_lane_change,
    "intersection_turn": _build_intersection_turn,
    "stop_and_go": _build_stop_and_go,
}


def generate_scenario(seed: int, template: str) -> Scenario:
    """Deterministic synthetic scenario for (seed, template)."""
    if template not in _BUILDERS:
        raise ValueError(f"unknown template {template!r}, expected one of {TEMPLATES}")
    rng = make_rng(seed, "scenario", template)
    mb, route, lights, agents, ego_states = _BUILDERS[template](rng)

    # place the whole scene at a random global pose so local-frame
    # normalization is actually exercised downstream
    theta = rng.uniform(-np.pi, np.pi)
    offset = rng.uniform(-400.0, 400.0, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])

    def tf_points(pts):
        return pts @ rot.T + offset

    def tf_states(states):
        out = states.copy()
        out[:, 0:2] = tf_points(states[:, 0:2])
        out[:, 2] = wrap_angle(states[:, 2] + theta)
        out[:, 3:5] = states[:, 3:5] @ rot.T
        return out

    for e in mb.elements:
        e.points = tf_points(e.points)
    agents = [AgentTrack(a.kind, a.width, a.length, tf_states(a.states)) for a in agents]
    ego = AgentTrack("vehicle", 2.0, 4.8, tf_states(ego_states))
    return Scenario(seed=seed, template=template, tag=template,
                    map_elements=mb.elements, route=list(route),
                    traffic_lights=dict(lights), agents=agents, ego=ego)


# ---------------------------------------------------------------------------
# sample construction


def _to_local(states: np.ndarray, anchor_pose) -> np.ndarray:
    ax, ay, ayaw = anchor_pose
    c, s = np.cos(ayaw), np.sin(ayaw)
    rot = np.array([[c, s], [-s, c]])
    out = states.copy()
    out[:, 0:2] = (states[:, 0:2] - (ax, ay)) @ rot.T
    out[:, 2] = wrap_angle(states[:, 2] - ayaw)
    out[:, 3:5] = states[:, 3:5] @ rot.T
    return out


def build_sample(scenario: Scenario, anchor_frame: int = DEFAULT_ANCHOR) -> TrainingSample:
    """Slice and normalize a scenario around anchor_frame.

    The anchor pose maps exactly to (0, 0, 0); key points are the future
    states at frame offsets {80, 40, 20, 10, 5}.
    """
    total = scenario.ego.states.shape[0]
    if anchor_frame < HISTORY_FRAMES - 1 or anchor_frame + FUTURE_FRAMES > total - 1:
        raise HorizonError(
            f"anchor {anchor_frame} needs {HISTORY_FRAMES - 1} history and "
            f"{FUTURE_FRAMES} future frames within {total} total")
    anchor_pose = scenario.ego.states[anchor_frame, 0:3]
    ego_local = _to_local(scenario.ego.states, anchor_pose)
    history = ego_local[anchor_frame - HISTORY_FRAMES + 1:anchor_frame + 1].copy()
    future = ego_local[anchor_frame + 1:anchor_frame + 1 + FUTURE_FRAMES].copy()
    key_points = np.stack([future[f - 1, 0:3] for f in KEY_POINT_FRAMES])
    agents = [
        AgentTrack(a.kind, a.width, a.length,
                   _to_local(a.states, anchor_pose)[anchor_frame - HISTORY_FRAMES + 1:
                                                    anchor_frame + 1].copy())
        for a in scenario.agents
    ]
    elements = [
        MapElement(e.elem_id, e.kind,
                   _to_local(np.pad(e.points, ((0, 0), (0, 3))), anchor_pose)[:, 0:2],
                   e.closed, e.parent)
        for e in scenario.map_elements
    ]
    return TrainingSample(
        sample_id=f"{scenario.template}-{scenario.seed}-a{anchor_frame}",
        seed=scenario.seed, template=scenario.template, tag=scenario.tag,
        anchor_frame=anchor_frame,
        ego_width=scenario.ego.width, ego_length=scenario.ego.length,
        ego_history=history, ego_future=future, key_points=key_points,
        endpoint=key_points[0, 0:2].copy(),
        map_elements=elements, route=list(scenario.route),
        traffic_lights=dict(scenario.traffic_lights), agents=agents)


def generate_samples(count: int, seed: int, templates=TEMPLATES) -> list[TrainingSample]:
    """count samples cycling over templates, seeds seed..seed+count-1."""
    out = []
    for i in range(count):
        template = templates[i % len(templates)]
        out.append(build_sample(generate_scenario(seed + i, template)))
    return out


# ---------------------------------------------------------------------------
# intention vocabulary


def cluster_intentions(samples, k: int, seed: int = 0) -> IntentionVocab:
    """K-means over the 8 s endpoints (k-means++ seeding, Lloyd updates)."""
    if len(samples) < k:
        raise InsufficientDataError(f"{len(samples)} samples cannot form {k} clusters")
    pts = np.stack([s.endpoint for s in samples])
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] < k:
        raise InsufficientDataError(f"only {uniq.shape[0]} distinct endpoints for k={k}")
    rng = make_rng(seed, "kmeans", k)
    centers = np.empty((k, 2))
    centers[0] = pts[rng.integers(len(pts))]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum()
        centers[i] = pts[rng.choice(len(pts), p=probs)]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))
    assign = np.zeros(len(pts), dtype=np.int64) - 1
    for _ in range(100):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = pts[mask].mean(axis=0)
            else:
                centers[c] = pts[dist.min(axis=1).argmax()]
    return IntentionVocab(points=centers)


def assign_proposals(samples, vocab: IntentionVocab):
    """Set each sample's proposal index to its nearest vocab point.

    Ties break to the lowest index (argmin keeps the first minimum).
    """
    for s in samples:
        d = ((vocab.points - s.endpoint) ** 2).sum(axis=1)
        s.proposal_index = int(d.argmin())
    return samples


# ---------------------------------------------------------------------------
# serialization (line-delimited JSON; floats round-trip exactly via repr)


def _element_to_obj(e: MapElement) -> dict:
    return {"id": e.elem_id, "kind": e.kind, "closed": e.closed,
            "parent": e.parent, "points": e.points.tolist()}


def _track_to_obj(a: AgentTrack) -> dict:
    return {"kind": a.kind, "width": a.width, "length": a.length,
            "states": a.states.tolist()}


def sample_to_obj(s: TrainingSample) -> dict:
    return {
        "sample_id": s.sample_id, "seed": s.seed, "template": s.template,
        "tag": s.tag, "anchor_frame": s.anchor_frame,
        "ego_width": s.ego_width, "ego_length": s.ego_length,
        "ego_history": s.ego_history.tolist(),
        "ego_future": s.ego_future.tolist(),
        "key_points": s.key_points.tolist(),
        "endpoint": s.endpoint.tolist(),
        "proposal_index": s.proposal_index,
        "map_elements": [_element_to_obj(e) for e in s.map_elements],
        "route": list(s.route),
        "traffic_lights": {str(k): v for k, v in s.traffic_lights.items()},
        "agents": [_track_to_obj(a) for a in s.agents],
    }


def _obj_to_sample(obj: dict) -> TrainingSample:
    history = np.asarray(obj["ego_history"], dtype=np.float64)
    future = np.asarray(obj["ego_future"], dtype=np.float64)
    kps = np.asarray(obj["key_points"], dtype=np.float64)
    if history.shape != (HISTORY_FRAMES, 5) or future.shape != (FUTURE_FRAMES, 5):
        raise ValueError(f"bad trajectory shapes {history.shape} / {future.shape}")
    if kps.shape != (len(KEY_POINT_FRAMES), 3):
        raise ValueError(f"bad key_points shape {kps.shape}")
    return TrainingSample(
        sample_id=obj["sample_id"], seed=int(obj["seed"]), template=obj["template"],
        tag=obj["tag"], anchor_frame=int(obj["anchor_frame"]),
        ego_width=float(obj["ego_width"]), ego_length=float(obj["ego_length"]),
        ego_history=history, ego_future=future, key_points=kps,
        endpoint=np.asarray(obj["endpoint"], dtype=np.float64),
        map_elements=[MapElement(int(e["id"]), e["kind"],
                                 np.asarray(e["points"], dtype=np.float64).reshape(-1, 2),
                                 bool(e["closed"]),
                                 None if e["parent"] is None else int(e["parent"]))
                      for e in obj["map_elements"]],
        route=[int(r) for r in obj["route"]],
        traffic_lights={int(k): v for k, v in obj["traffic_lights"].items()},
        agents=[AgentTrack(a["kind"], float(a["width"]), float(a["length"]),
                           np.asarray(a["states"], dtype=np.float64))
                for a in obj["agents"]],
        proposal_index=None if obj["proposal_index"] is None else int(obj["proposal_index"]),
    )


def serialize_samples(samples, vocab: IntentionVocab | None = None) -> str:
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(samples),
        "vocab": None if vocab is None else vocab.points.tolist(),
        "vocab_hash": None if vocab is None else vocab.vocab_hash(),
    }
    lines = [json.dumps(header)]
    lines.extend(json.dumps(sample_to_obj(s)) for s in samples)
    return "\n".join(lines) + "\n"


def deserialize_samples(text: str) -> tuple[list[TrainingSample], IntentionVocab | None]:
    lines = text.splitlines()
    if not lines:
        return [], None
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"line 1: malformed header ({e.msg})") from e
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError("line 1: missing trajseq.samples header")
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"line 1: unsupported format version {header.get('version')}")
    vocab = None
    if header.get("vocab") is not None:
        vocab = IntentionVocab(points=np.asarray(header["vocab"], dtype=np.float64))
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            samples.append(_obj_to_sample(json.loads(line)))
        except json.JSONDecodeError as e:
            raise ParseError(f"line {i}: malformed record ({e.msg})") from e
        except (KeyError, ValueError, TypeError) as e:
            raise ParseError(f"line {i}: invalid sample ({e})") from e
    if len(samples) != header.get("count"):
        raise ParseError(f"line 1: header count {header.get('count')} != {len(samples)} records")
    return samples, vocab


def save_samples(path: str, samples, vocab: IntentionVocab | None = None) -> None:
    with open(path, "w") as f:
        f.write(serialize_samples(samples, vocab))


def load_samples(path: str) -> tuple[list[TrainingSample], IntentionVocab | None]:
    with open(path) as f:
        return deserialize_samples(f.read())


def dataset_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
