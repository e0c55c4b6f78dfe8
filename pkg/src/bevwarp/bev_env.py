"""BEV-warp closed-loop environment.

Synthetic clip generation, scene rasterization into ego-centered feature
grids, per-step feature warping, ground-truth occupancy queries (TTC,
progress), and the occupancy-decode stub used for equivariance checks.

Traffic agents replay their logged tracks; only the ego moves freely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import (Obb, Pose2, pose_compose, pose_inverse,
                       transform_points, warp_grid, warp_matrix, wrap_angle)

DT = 0.1
GRID_SIZE = 128
CELL_SIZE = 0.5
N_CHANNELS = 4
CH_LANE, CH_AGENT, CH_CLOSING, CH_GOAL = range(N_CHANNELS)

EGO_LENGTH = 4.6
EGO_WIDTH = 1.9
T_MAX_DEFAULT = 3.0
LANE_HALF_WIDTH = 1.75
CLOSING_SPEED_SCALE = 15.0  # m/s mapped to channel value 1.0
FAULT_SPEED_THRESHOLD = 0.5

MAX_AGENT_TOKENS = 8
MAX_MAP_TOKENS = 16
MAP_SEGMENT_MAX_LEN = 10.0

CLIP_KINDS = ("lead_brake", "merge_cutin", "cruise", "slow_lead", "intersection_cross")
SAFETY_KINDS = {"lead_brake", "merge_cutin", "intersection_cross"}
_BUMPER = EGO_LENGTH / 2.0 + 2.0  # center distance consumed by the two bodies


class ClipError(ValueError):
    """Clip schema or invariant violation; message names the offending field."""


@dataclass(frozen=True)
class BevGrid:
    """Ego-centered feature grid; ego sits at the grid center heading +x."""

    values: np.ndarray  # (C, H, W) float64
    cell_size: float = CELL_SIZE

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class AgentTrack:
    id: str
    length: float
    width: float
    poses: np.ndarray   # (T, 3)
    speeds: np.ndarray  # (T,)


@dataclass
class Clip:
    """A logged reference scenario; the unit of simulation and training."""

    id: str
    dt: float
    objective: str  # "safety" | "efficiency"
    ref_poses: np.ndarray   # (T, 3)
    ref_speeds: np.ndarray  # (T,)
    lanes: List[np.ndarray]  # each (P, 2)
    goal: np.ndarray        # (2,)
    agents: List[AgentTrack] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.ref_poses.shape[0]

    def ref_pose(self, t: int) -> Pose2:
        x, y, yaw = self.ref_poses[t]
        return Pose2(x, y, yaw)

    def ref_cum_arc(self) -> np.ndarray:
        """Cumulative reference arc length; cached per clip."""
        arc = getattr(self, "_cum_arc", None)
        if arc is None:
            steps = np.linalg.norm(np.diff(self.ref_poses[:, :2], axis=0), axis=1)
            arc = np.concatenate([[0.0], np.cumsum(steps)])
            object.__setattr__(self, "_cum_arc", arc)
        return arc


def validate_clip(clip: Clip) -> None:
    t = clip.length
    if t < 2:
        raise ClipError("ref_poses length")
    if clip.ref_speeds.shape[0] != t:
        raise ClipError("ref_speeds length")
    if clip.dt <= 0.0:
        raise ClipError("dt")
    if clip.objective not in ("safety", "efficiency"):
        raise ClipError("objective")
    for arr in (clip.ref_poses, clip.ref_speeds, clip.goal):
        if not np.all(np.isfinite(arr)):
            raise ClipError("non-finite value")
    # kinematic consistency: |delta position| / dt tracks the speed profile
    deltas = np.linalg.norm(np.diff(clip.ref_poses[:, :2], axis=0), axis=1) / clip.dt
    tol = 0.1 * clip.ref_speeds[:-1] + 1e-6
    if np.any(np.abs(deltas - clip.ref_speeds[:-1]) > tol):
        raise ClipError("ref_poses/ref_speeds kinematic consistency")
    for i, lane in enumerate(clip.lanes):
        if lane.shape[0] < 2:
            raise ClipError(f"lanes[{i}] point count")
    for i, agent in enumerate(clip.agents):
        if agent.poses.shape[0] != t:
            raise ClipError(f"agents[{i}].poses length")
        if agent.speeds.shape[0] != t:
            raise ClipError(f"agents[{i}].speeds length")
        if agent.length <= 0.0 or agent.width <= 0.0:
            raise ClipError(f"agents[{i}] footprint")


# ---------------------------------------------------------------------------
# Clip JSON io

def clip_to_dict(clip: Clip) -> dict:
    return {
        "id": clip.id,
        "dt": clip.dt,
        "objective": clip.objective,
        "ref_poses": clip.ref_poses.tolist(),
        "ref_speeds": clip.ref_speeds.tolist(),
        "lanes": [lane.tolist() for lane in clip.lanes],
        "goal": clip.goal.tolist(),
        "agents": [
            {
                "id": a.id,
                "length": a.length,
                "width": a.width,
                "poses": a.poses.tolist(),
                "speeds": a.speeds.tolist(),
            }
            for a in clip.agents
        ],
    }


def clip_from_dict(data: dict) -> Clip:
    def need(key):
        if key not in data:
            raise ClipError(key)
        return data[key]

    try:
        agents = []
        for i, entry in enumerate(need("agents")):
            for key in ("id", "length", "width", "poses", "speeds"):
                if key not in entry:
                    raise ClipError(f"agents[{i}].{key}")
            agents.append(AgentTrack(
                id=str(entry["id"]),
                length=float(entry["length"]),
                width=float(entry["width"]),
                poses=np.asarray(entry["poses"], dtype=np.float64),
                speeds=np.asarray(entry["speeds"], dtype=np.float64),
            ))
        clip = Clip(
            id=str(need("id")),
            dt=float(need("dt")),
            objective=str(need("objective")),
            ref_poses=np.asarray(need("ref_poses"), dtype=np.float64),
            ref_speeds=np.asarray(need("ref_speeds"), dtype=np.float64),
            lanes=[np.asarray(lane, dtype=np.float64) for lane in need("lanes")],
            goal=np.asarray(need("goal"), dtype=np.float64),
            agents=agents,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ClipError):
            raise
        raise ClipError(f"malformed clip payload: {exc}") from exc
    validate_clip(clip)
    return clip


def save_clip(clip: Clip, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clip_to_dict(clip), fh)


def load_clip(path) -> Clip:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ClipError(f"malformed JSON: {exc}") from exc
    return clip_from_dict(data)


# ---------------------------------------------------------------------------
# Synthetic clip generation

def _integrate_track(start_xy, heading, speeds, dt):
    """Integrate a straight-heading track: pose t+1 = pose t + dir * v_t * dt."""
    t = len(speeds)
    poses = np.zeros((t, 3))
    poses[0, :2] = start_xy
    poses[:, 2] = heading
    direction = np.array([math.cos(heading), math.sin(heading)])
    for i in range(t - 1):
        poses[i + 1, :2] = poses[i, :2] + direction * speeds[i] * dt
    return poses


def _follow_profile(t, v0, v_des, lead_gap_fn, dt, headway=1.3):
    """IDM-style following profile against a time-varying lead.

    lead_gap_fn(t, ego_s) -> (bumper gap, lead_speed) or None when free.
    Returns (speeds, positions along route).
    """
    a_max, b_comf, s_min = 2.0, 3.5, 3.0
    speeds = np.zeros(t)
    s = np.zeros(t)
    speeds[0] = v0
    for i in range(t - 1):
        v = speeds[i]
        free = (v / max(v_des, 0.1)) ** 4
        accel = a_max * (1.0 - free)
        lead = lead_gap_fn(i, s[i])
        if lead is not None:
            gap, v_lead = lead
            gap = max(gap, 0.01)
            dv = v - v_lead
            s_star = s_min + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b_comf)))
            accel = a_max * (1.0 - free - (s_star / gap) ** 2)
        accel = float(np.clip(accel, -6.0, 2.0))
        v_next = float(np.clip(v + accel * dt, 0.0, max(v_des, v0) + 2.0))
        speeds[i + 1] = v_next
        s[i + 1] = s[i] + v * dt
    return speeds, s


def _straight_lanes(route_len, lateral_offsets):
    lanes = []
    for off in lateral_offsets:
        lanes.append(np.array([[-10.0, off], [route_len + 20.0, off]]))
    return lanes


def _replay_collision_free(ref_poses: np.ndarray, agents: List["AgentTrack"]) -> bool:
    for t in range(ref_poses.shape[0]):
        for agent in agents:
            if _kernels.obb_overlap(
                    ref_poses[t, 0], ref_poses[t, 1], ref_poses[t, 2],
                    EGO_LENGTH, EGO_WIDTH,
                    agent.poses[t, 0], agent.poses[t, 1], agent.poses[t, 2],
                    agent.length, agent.width):
                return False
    return True


def generate_clip(kind: str, seed: int) -> Clip:
    """Deterministic synthetic clip of the requested flavor."""
    if kind not in CLIP_KINDS:
        raise ClipError(f"unknown clip kind {kind!r}")
    rng = np.random.default_rng([CLIP_KINDS.index(kind), int(seed)])
    t = int(rng.integers(100, 201))
    dt = DT
    objective = "safety" if kind in SAFETY_KINDS else "efficiency"
    agents: List[AgentTrack] = []

    if kind == "cruise":
        v_des = float(rng.uniform(8.0, 12.0))
        speeds, _ = _follow_profile(t, v_des, v_des, lambda i, s: None, dt)
        ref = _integrate_track((0.0, 0.0), 0.0, speeds, dt)
        lanes = _straight_lanes(speeds.sum() * dt, [0.0, 3.5])
        # distant parallel traffic in the other lane
        n_other = int(rng.integers(0, 3))
        for j in range(n_other):
            av = float(rng.uniform(6.0, 11.0))
            a_speeds = np.full(t, av)
            start = float(rng.uniform(25.0, 60.0)) * (1 if rng.random() < 0.5 else -1)
            a_poses = _integrate_track((start, 3.5), 0.0, a_speeds, dt)
            agents.append(AgentTrack(f"other{j}", 4.0, 2.0, a_poses, a_speeds))

    elif kind == "slow_lead":
        v_des = float(rng.uniform(9.0, 12.0))
        v_lead = float(rng.uniform(4.5, 6.5))
        lead_start = float(rng.uniform(30.0, 45.0))
        a_speeds = np.full(t, v_lead)
        a_poses = _integrate_track((lead_start, 0.0), 0.0, a_speeds, dt)
        agents.append(AgentTrack("lead", 4.0, 2.0, a_poses, a_speeds))

        # generous headway: the reference hangs back more than it must,
        # leaving room for a policy to run 5-10% farther
        def gap_fn(i, s):
            return (a_poses[i, 0] - s - _BUMPER, v_lead)

        speeds, _ = _follow_profile(t, v_des, v_des, gap_fn, dt, headway=2.4)
        ref = _integrate_track((0.0, 0.0), 0.0, speeds, dt)
        lanes = _straight_lanes(max(speeds.sum() * dt, a_poses[-1, 0]), [0.0, 3.5])

    elif kind == "lead_brake":
        v0 = float(rng.uniform(8.0, 12.0))
        lead_start = float(rng.uniform(22.0, 32.0))
        brake_at = int(rng.integers(t // 5, t // 2))
        decel = float(rng.uniform(3.5, 5.5))
        a_speeds = np.full(t, v0 * rng.uniform(0.9, 1.05))
        for i in range(brake_at, t):
            a_speeds[i] = max(0.0, a_speeds[i - 1] - decel * dt)
        a_poses = _integrate_track((lead_start, 0.0), 0.0, a_speeds, dt)
        agents.append(AgentTrack("lead", 4.0, 2.0, a_poses, a_speeds))

        def gap_fn(i, s):
            return (a_poses[i, 0] - s - _BUMPER, float(a_speeds[i]))

        speeds, _ = _follow_profile(t, v0, v0, gap_fn, dt)
        ref = _integrate_track((0.0, 0.0), 0.0, speeds, dt)
        lanes = _straight_lanes(max(speeds.sum() * dt, a_poses[-1, 0]), [0.0])

    elif kind == "merge_cutin":
        v0 = float(rng.uniform(8.0, 11.0))
        ahead0 = float(rng.uniform(6.0, 8.0))
        merge_at = int(rng.integers(15, 35))
        merge_dur = max(1, int(rng.uniform(0.9, 1.5) / dt))
        decel = float(rng.uniform(2.5, 3.5))
        v_slow = v0 * float(rng.uniform(0.45, 0.6))
        v_lon = v0 * float(rng.uniform(0.97, 1.03))
        best = None
        for ahead in (ahead0, ahead0 - 1.0, ahead0 - 1.8, ahead0 + 1.0,
                      ahead0 + 2.0, ahead0 + 3.0):
            lon_speeds = np.full(t, v_lon)
            for i in range(merge_at + merge_dur, t):
                lon_speeds[i] = max(v_slow, lon_speeds[i - 1] - decel * dt)
            a_poses = _integrate_track((ahead, 3.5), 0.0, lon_speeds, dt)
            ramp = np.clip((np.arange(t) - merge_at) / merge_dur, 0.0, 1.0)
            a_poses[:, 1] = 3.5 * (1.0 - ramp)
            heading = np.arctan2(np.diff(a_poses[:, 1], append=a_poses[-1, 1]),
                                 np.diff(a_poses[:, 0], append=a_poses[-1, 0] + 1.0))
            a_poses[:, 2] = heading
            deltas = np.linalg.norm(np.diff(a_poses[:, :2], axis=0), axis=1) / dt
            a_speeds = np.concatenate([deltas, deltas[-1:]])

            def gap_fn(i, s):
                if a_poses[i, 1] > 3.4:  # not yet committed to the lane change
                    return None
                return (a_poses[i, 0] - s - _BUMPER, float(a_speeds[i]))

            speeds, route = _follow_profile(t, v0, v0, gap_fn, dt)
            ref = _integrate_track((0.0, 0.0), 0.0, speeds, dt)
            track = AgentTrack("merger", 4.0, 2.0, a_poses, a_speeds)
            safe = _replay_collision_free(ref, [track])
            gap_min = float(np.hypot(a_poses[:, 0] - route, a_poses[:, 1]).min())
            if best is None or (safe and not best[0]):
                best = (safe, gap_min, track, speeds, ref)
            if safe and gap_min < 8.0:
                best = (safe, gap_min, track, speeds, ref)
                break
        _, _, track, speeds, ref = best
        agents = [track]
        lanes = _straight_lanes(max(speeds.sum() * dt, track.poses[-1, 0]), [0.0, 3.5])

    else:  # intersection_cross
        v0 = float(rng.uniform(8.0, 11.0))
        cross_x = float(rng.uniform(35.0, 55.0))
        v_agent = float(rng.uniform(6.0, 9.0))
        # agent crosses the ego lane around the time an unbraked ego would arrive
        eta = cross_x / v0
        agent_start_y = -v_agent * eta + float(rng.uniform(-4.0, 4.0))
        a_speeds = np.full(t, v_agent)
        a_poses = _integrate_track((cross_x, agent_start_y), math.pi / 2.0, a_speeds, dt)
        agents.append(AgentTrack("crosser", 4.0, 2.0, a_poses, a_speeds))

        def gap_fn(i, s):
            ay = a_poses[i, 1]
            cleared = ay > 3.0
            if cleared or s > cross_x + 3.0:
                return None
            # treat the crossing point as a virtual stopped lead until clear
            return (cross_x - 3.0 - s - EGO_LENGTH / 2.0, 0.0)

        speeds, _ = _follow_profile(t, v0, v0, gap_fn, dt)
        ref = _integrate_track((0.0, 0.0), 0.0, speeds, dt)
        lanes = _straight_lanes(max(speeds.sum() * dt, cross_x + 30.0), [0.0])
        lanes.append(np.array([[cross_x, -60.0], [cross_x, 60.0]]))

    goal = ref[-1, :2] + np.array([math.cos(ref[-1, 2]), math.sin(ref[-1, 2])]) * 2.0
    clip = Clip(
        id=f"{kind}-{seed}",
        dt=dt,
        objective=objective,
        ref_poses=ref,
        ref_speeds=speeds,
        lanes=lanes,
        goal=goal,
        agents=agents,
    )
    validate_clip(clip)
    return clip


# ---------------------------------------------------------------------------
# Rasterization

def _cell_centers(pose: Pose2):
    """World coordinates of all cell centers of a grid placed at `pose`."""
    idx = (np.arange(GRID_SIZE) + 0.5 - GRID_SIZE / 2.0) * CELL_SIZE
    xs, ys = np.meshgrid(idx, idx)  # xs varies along columns, ys along rows
    pts = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    return transform_points(pose, pts).reshape(GRID_SIZE, GRID_SIZE, 2)


def _segment_distance(points, seg_a, seg_b):
    """Distance from (N, 2) points to segment a-b."""
    d = seg_b - seg_a
    len2 = float(d @ d)
    if len2 < 1e-12:
        return np.linalg.norm(points - seg_a, axis=-1)
    t = np.clip(((points - seg_a) @ d) / len2, 0.0, 1.0)
    proj = seg_a + t[..., None] * d
    return np.linalg.norm(points - proj, axis=-1)


def rasterize_scene(clip: Clip, pose: Pose2, t: int) -> BevGrid:
    """Paint lanes, agents, closing speed, and goal into the frame of `pose`."""
    if not 0 <= t < clip.length:
        raise ClipError(f"rasterize step {t} outside clip of length {clip.length}")
    values = np.zeros((N_CHANNELS, GRID_SIZE, GRID_SIZE))
    centers_world = _cell_centers(pose)
    flat = centers_world.reshape(-1, 2)

    lane = np.zeros(flat.shape[0])
    reach = GRID_SIZE * CELL_SIZE * 0.71 + LANE_HALF_WIDTH  # grid half-diagonal
    origin = np.array([pose.x, pose.y])
    for poly in clip.lanes:
        for a, b in zip(poly[:-1], poly[1:]):
            if _segment_distance(origin[None, :], a, b)[0] > reach:
                continue
            lane = np.maximum(lane, (_segment_distance(flat, a, b) <= LANE_HALF_WIDTH))
    values[CH_LANE] = lane.reshape(GRID_SIZE, GRID_SIZE)

    ego_world = np.array([pose.x, pose.y])
    for agent in clip.agents:
        ax, ay, ayaw = agent.poses[t]
        ca, sa = math.cos(ayaw), math.sin(ayaw)
        rel = flat - np.array([ax, ay])
        local_x = rel[:, 0] * ca + rel[:, 1] * sa
        local_y = -rel[:, 0] * sa + rel[:, 1] * ca
        inside = (np.abs(local_x) <= agent.length / 2.0) & \
                 (np.abs(local_y) <= agent.width / 2.0)
        if not inside.any():
            continue
        mask = inside.reshape(GRID_SIZE, GRID_SIZE)
        values[CH_AGENT][mask] = 1.0
        to_ego = ego_world - np.array([ax, ay])
        dist = float(np.linalg.norm(to_ego))
        if dist > 1e-6:
            closing = agent.speeds[t] * float(
                (to_ego / dist) @ np.array([ca, sa]))
            values[CH_CLOSING][mask] = float(np.clip(closing / CLOSING_SPEED_SCALE, 0.0, 1.0))

    goal_rel = transform_points(pose_inverse(pose), clip.goal[None, :])[0]
    half_extent = GRID_SIZE * CELL_SIZE / 2.0
    radius = float(np.linalg.norm(goal_rel))
    limit = half_extent - CELL_SIZE
    if radius > limit > 0.0:
        goal_rel = goal_rel * (limit / radius)  # project onto the grid boundary ray
    goal_world = transform_points(pose, goal_rel[None, :])[0]
    d2 = np.sum((flat - goal_world) ** 2, axis=-1)
    sigma = 1.0
    values[CH_GOAL] = np.exp(-d2 / (2.0 * sigma ** 2)).reshape(GRID_SIZE, GRID_SIZE)

    return BevGrid(values=values, cell_size=CELL_SIZE)


# ---------------------------------------------------------------------------
# Environment state machine

@dataclass(frozen=True)
class EnvState:
    clip: Clip
    t: int
    sim_pose: Pose2
    sim_speed: float
    distance_traveled: float = 0.0
    collided: bool = False
    at_fault: bool = False
    done: bool = False

    def ego_obb(self) -> Obb:
        return Obb(self.sim_pose, EGO_LENGTH, EGO_WIDTH)


def env_reset(clip: Clip) -> EnvState:
    return EnvState(
        clip=clip,
        t=0,
        sim_pose=clip.ref_pose(0),
        sim_speed=float(clip.ref_speeds[0]),
    )


def _agent_obb(agent: AgentTrack, t: int) -> Obb:
    x, y, yaw = agent.poses[t]
    return Obb(Pose2(x, y, yaw), agent.length, agent.width)


def _contact_in_front_half(ego: EnvState, agent: AgentTrack, t: int) -> bool:
    """Proxy contact point: the agent center clamped into the ego footprint."""
    ax, ay, _ = agent.poses[t]
    rel = transform_points(pose_inverse(ego.sim_pose), np.array([[ax, ay]]))[0]
    px = float(np.clip(rel[0], -EGO_LENGTH / 2.0, EGO_LENGTH / 2.0))
    return px >= 0.0


def env_step(state: EnvState, new_pose: Pose2, new_speed: float) -> EnvState:
    if state.done:
        raise RuntimeError("env_step on a finished episode")
    t_next = state.t + 1
    step_dist = math.hypot(new_pose.x - state.sim_pose.x, new_pose.y - state.sim_pose.y)
    next_state = replace(
        state,
        t=t_next,
        sim_pose=new_pose,
        sim_speed=float(max(0.0, new_speed)),
        distance_traveled=state.distance_traveled + step_dist,
    )
    ego_box = next_state.ego_obb()
    collided = False
    at_fault = False
    for agent in state.clip.agents:
        if _kernels.obb_overlap(
                new_pose.x, new_pose.y, new_pose.yaw, EGO_LENGTH, EGO_WIDTH,
                *agent.poses[t_next], agent.length, agent.width):
            collided = True
            if next_state.sim_speed > FAULT_SPEED_THRESHOLD and \
                    _contact_in_front_half(next_state, agent, t_next):
                at_fault = True
    done = collided or t_next >= state.clip.length - 1
    return replace(next_state, collided=collided, at_fault=at_fault, done=done)


# ---------------------------------------------------------------------------
# Observation

@dataclass(frozen=True)
class Observation:
    bev: BevGrid
    map_tokens: np.ndarray    # (n_m, 5): mid x, mid y, dir x, dir y, length
    agent_tokens: np.ndarray  # (n_a, 7): rel x/y, cos/sin rel yaw, speed, length, width
    nav_token: np.ndarray     # (2,): goal in ego frame
    ego_speed: float


def _lane_segments(clip: Clip):
    segs = []
    for poly in clip.lanes:
        for a, b in zip(poly[:-1], poly[1:]):
            length = float(np.linalg.norm(b - a))
            n_parts = max(1, int(math.ceil(length / MAP_SEGMENT_MAX_LEN)))
            for i in range(n_parts):
                p = a + (b - a) * (i / n_parts)
                q = a + (b - a) * ((i + 1) / n_parts)
                segs.append((p, q))
    return segs


def observe(state: EnvState) -> Observation:
    """Warped BEV plus ground-truth tokens in the current ego frame.

    The BEV channel is produced only by warping the reference-pose
    rasterization; the grid is never rasterized directly at the simulated
    pose.
    """
    if state.done:
        raise RuntimeError("observe on a finished episode")
    clip = state.clip
    t = state.t
    ref_pose = clip.ref_pose(t)
    reference = rasterize_scene(clip, ref_pose, t)
    # output->input coordinate map for the inverse warp
    bev = warp_grid(reference, warp_matrix(ref_pose, state.sim_pose))

    inv = pose_inverse(state.sim_pose)
    segs = _lane_segments(clip)
    feats = []
    for a, b in segs:
        pa = transform_points(inv, a[None, :])[0]
        pb = transform_points(inv, b[None, :])[0]
        mid = (pa + pb) / 2.0
        d = pb - pa
        length = float(np.linalg.norm(d))
        direction = d / length if length > 1e-9 else np.array([1.0, 0.0])
        feats.append([mid[0], mid[1], direction[0], direction[1], length])
    feats = np.asarray(feats, dtype=np.float64).reshape(-1, 5)
    if feats.shape[0] > MAX_MAP_TOKENS:
        dist = np.hypot(feats[:, 0], feats[:, 1])
        order = np.lexsort((np.arange(feats.shape[0]), dist))
        feats = feats[order[:MAX_MAP_TOKENS]]
    map_tokens = feats

    ag = []
    for agent in clip.agents:
        ax, ay, ayaw = agent.poses[t]
        rel = transform_points(inv, np.array([[ax, ay]]))[0]
        ryaw = wrap_angle(ayaw - state.sim_pose.yaw)
        ag.append([rel[0], rel[1], math.cos(ryaw), math.sin(ryaw),
                   float(agent.speeds[t]), agent.length, agent.width])
    ag = np.asarray(ag, dtype=np.float64).reshape(-1, 7)
    if ag.shape[0] > MAX_AGENT_TOKENS:
        dist = np.hypot(ag[:, 0], ag[:, 1])
        order = np.lexsort((np.arange(ag.shape[0]), dist))
        ag = ag[order[:MAX_AGENT_TOKENS]]

    nav = transform_points(inv, clip.goal[None, :])[0]
    return Observation(
        bev=bev,
        map_tokens=map_tokens,
        agent_tokens=ag,
        nav_token=nav,
        ego_speed=state.sim_speed,
    )


@dataclass(frozen=True)
class TokenizedObs:
    """Compact nn-facing snapshot of an observation.

    bev8 is the 8x8 block-mean pooling of the BEV; it is all the learned
    encoders consume, so decision records can store this instead of the
    full grid.
    """

    map_tokens: np.ndarray
    agent_tokens: np.ndarray
    nav: np.ndarray      # (3,): goal x, goal y, ego speed
    bev8: np.ndarray     # (C, 8, 8)


def tokenize_observation(obs: Observation) -> TokenizedObs:
    c, h, w = obs.bev.values.shape
    block = h // 8
    bev8 = obs.bev.values.reshape(c, 8, block, 8, block).mean(axis=(2, 4))
    nav = np.array([obs.nav_token[0], obs.nav_token[1], obs.ego_speed])
    return TokenizedObs(
        map_tokens=obs.map_tokens.copy(),
        agent_tokens=obs.agent_tokens.copy(),
        nav=nav,
        bev8=bev8,
    )


# ---------------------------------------------------------------------------
# Ground-truth queries

def _planned_ego_poses(state: EnvState, planned, k_max: int) -> np.ndarray:
    """World-frame ego poses at look-ahead 0..k_max along a planned trajectory.

    Waypoint 0 of a trajectory sits at the decision time, so look-ahead k
    maps directly to waypoint k; the plan is expressed in the ego frame.
    """
    pts = planned.points
    h = pts.shape[0]
    poses = np.zeros((k_max + 1, 3))
    poses[0] = [state.sim_pose.x, state.sim_pose.y, state.sim_pose.yaw]
    world_xy = transform_points(state.sim_pose, pts[:, :2])
    yaw_prev = state.sim_pose.yaw
    for k in range(1, k_max + 1):
        idx = min(k, h - 1)
        dx = world_xy[min(idx + 1, h - 1)] - world_xy[max(idx - 1, 0)]
        if np.hypot(dx[0], dx[1]) > 1e-6:
            yaw_prev = math.atan2(dx[1], dx[0])
        poses[k] = [world_xy[idx, 0], world_xy[idx, 1], yaw_prev]
    return poses


def compute_ttc(state: EnvState, planned, t_max: float = T_MAX_DEFAULT) -> float:
    """Earliest look-ahead time at which the projected ego hits any agent.

    Scans k = 0, 1, ... t_max/dt along `planned` against the ground-truth
    agent tracks at absolute time t+k (clamped to the clip end); returns
    t_max when no intersection is found.
    """
    clip = state.clip
    if not clip.agents:
        return t_max
    k_max = int(round(t_max / clip.dt))
    ego_poses = _planned_ego_poses(state, planned, k_max)
    n = len(clip.agents)
    agent_poses = np.zeros((n, k_max + 1, 3))
    agent_dims = np.zeros((n, 2))
    last = clip.length - 1
    for i, agent in enumerate(clip.agents):
        idx = np.minimum(state.t + np.arange(k_max + 1), last)
        agent_poses[i] = agent.poses[idx]
        agent_dims[i] = (agent.length, agent.width)
    hit = _kernels.ttc_first_hit(
        np.ascontiguousarray(ego_poses), EGO_LENGTH, EGO_WIDTH,
        np.ascontiguousarray(agent_poses), np.ascontiguousarray(agent_dims))
    if hit < 0:
        return t_max
    return hit * clip.dt


def ego_progress(state: EnvState) -> float:
    """Distance traveled over the reference arc length for the same steps."""
    if state.t == 0:
        return 0.0
    ref_arc = float(state.clip.ref_cum_arc()[state.t])
    if ref_arc < 1e-9:
        return 0.0 if state.distance_traveled < 1e-9 else float("inf")
    return state.distance_traveled / ref_arc


def decode_occupancy(grid: BevGrid, threshold: float = 0.5) -> List[Obb]:
    """Fit oriented boxes to connected components of the agent channel.

    Perception-decode stub used only for equivariance testing.
    """
    mask = grid.values[CH_AGENT] >= threshold
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    boxes: List[Obb] = []
    h, w = mask.shape
    for lbl in range(1, count + 1):
        vs, us = np.nonzero(labels == lbl)
        if vs.size < 3:
            continue
        xs = (us + 0.5 - w / 2.0) * grid.cell_size
        ys = (vs + 0.5 - h / 2.0) * grid.cell_size
        pts = np.stack([xs, ys], axis=-1)
        mean = pts.mean(axis=0)
        centered = pts - mean
        cov = centered.T @ centered / pts.shape[0]
        eigval, eigvec = np.linalg.eigh(cov)
        major = eigvec[:, np.argmax(eigval)]
        yaw = math.atan2(major[1], major[0])
        ca, sa = math.cos(yaw), math.sin(yaw)
        along = centered @ np.array([ca, sa])
        across = centered @ np.array([-sa, ca])
        length = float(along.max() - along.min()) + grid.cell_size
        width = float(across.max() - across.min()) + grid.cell_size
        if width > length:
            length, width = width, length
            yaw = wrap_angle(yaw + math.pi / 2.0)
        boxes.append(Obb(Pose2(mean[0], mean[1], yaw), length, width))
    return boxes
