"""Scripted world generator: scenes, a reactive agent, and its exact oracle.

This module supplies the training side of the stack. It rasterizes axis-
aligned box scenes into feature volumes, simulates a goal-driven agent with
an articulated 25-bone body that reacts to an observer (fleeing fast
approaches, drifting toward slow ones), and writes corpora in the worldstate
bundle format. Because the agent is scripted, its conditional goal
distribution at any state is available in closed form via ``oracle``; that
distribution is the ground truth learned models are scored against.
"""

import heapq
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3, axis_angle_to_quat
from .worldstate import (
    FPS,
    AgentTrack,
    Clip,
    ObserverTrack,
    SceneFeatureVolume,
    World,
    save_world,
    slice_windows,
)


class SynthworldError(ValueError):
    pass


AGENT_HEIGHT = 0.25  # root height above the floor, meters
OBSERVER_HEIGHT = 1.4
CRUISE_SPEED = 0.6  # m/s
ACCEL = 1.2  # m/s^2, trapezoidal ramps
CLEARANCE = 0.12  # nav keeps the root this far from any surface
ARRIVE_RADIUS = 0.25  # a spot this close to the agent is "where it stands"
FLEE_RADIUS = 1.0  # fleeing zeroes spots this close to the observer
GOAL_STD = 0.12  # arrival scatter reported by the oracle
IDLE_RANGE = (1.0, 3.0)  # seconds
STRIDE_HZ_AT_CRUISE = 1.4


# ---------------------------------------------------------------------------
# scene specification and rasterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned solid with a semantic class index."""

    lo: np.ndarray
    hi: np.ndarray
    semantic: int

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise SynthworldError("box needs lo < hi corners, shape (3,)")
        if self.semantic < 0:
            raise SynthworldError("semantic class must be >= 0")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class SceneSpec:
    """Room with solid boxes and weighted preferred spots."""

    room_lo: np.ndarray
    room_hi: np.ndarray
    boxes: tuple
    spots: np.ndarray  # (S, 3)
    spot_weights: np.ndarray  # (S,), visit preference, normalized

    def __post_init__(self):
        lo = np.asarray(self.room_lo, dtype=float)
        hi = np.asarray(self.room_hi, dtype=float)
        spots = np.asarray(self.spots, dtype=float)
        w = np.asarray(self.spot_weights, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise SynthworldError("room needs lo < hi corners")
        if spots.ndim != 2 or spots.shape[1] != 3 or spots.shape[0] == 0:
            raise SynthworldError("spots must be (S, 3) with S >= 1")
        if w.shape != (spots.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise SynthworldError("spot weights must be nonnegative and sum > 0")
        for box in self.boxes:
            if np.any(box.lo < lo) or np.any(box.hi > hi):
                raise SynthworldError("furniture must sit inside the room")
        object.__setattr__(self, "room_lo", lo)
        object.__setattr__(self, "room_hi", hi)
        object.__setattr__(self, "spots", spots)
        object.__setattr__(self, "spot_weights", w / w.sum())

    @property
    def semantic_classes(self) -> int:
        return max((b.semantic for b in self.boxes), default=-1) + 1


def _box_sdf(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact signed distance to a solid box, negative inside."""
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def scene_sdf(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Distance to the nearest solid (walls or furniture), negative inside."""
    points = np.asarray(points, dtype=float)
    # walls are the complement of the room interior
    d = -_box_sdf(points, spec.room_lo, spec.room_hi)
    for box in spec.boxes:
        d = np.minimum(d, _box_sdf(points, box.lo, box.hi))
    return d


def build_scene(spec: SceneSpec, voxel_size: float = 0.1, margin_voxels: int = 2) -> SceneFeatureVolume:
    """Rasterize a spec into occupancy + sdf + one-hot semantic channels.

    Deterministic by construction. Raises if two boxes of different classes
    claim the same node, or a preferred spot is not in free space.
    """
    h = float(voxel_size)
    lo = spec.room_lo - margin_voxels * h
    dims = np.ceil((spec.room_hi - spec.room_lo) / h - 1e-9).astype(int) + 2 * margin_voxels + 1
    grid = lo + np.stack(
        np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1
    ) * h

    n_sem = spec.semantic_classes
    values = np.zeros(tuple(dims) + (2 + n_sem,), dtype=np.float32)
    sdf = scene_sdf(spec, grid)
    values[..., 0] = (sdf <= 0.0).astype(np.float32)
    values[..., 1] = sdf.astype(np.float32)

    claimed = np.full(tuple(dims), -1, dtype=int)
    for box in spec.boxes:
        inside = _box_sdf(grid, box.lo, box.hi) <= 0.0
        clash = inside & (claimed >= 0) & (claimed != box.semantic)
        if np.any(clash):
            raise SynthworldError("boxes with different semantics overlap")
        claimed[inside] = box.semantic
        values[..., 2 + box.semantic][inside] = 1.0

    spot_clear = scene_sdf(spec, spec.spots)
    if np.any(spot_clear <= CLEARANCE):
        raise SynthworldError("preferred spot is not in free space")
    return SceneFeatureVolume(lo, h, values)


# ---------------------------------------------------------------------------
# policy and oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicySpec:
    """Reactive goal policy: speed thresholds, goal weights, idling, gait."""

    v_flee: float = 0.5
    v_follow: float = 0.3
    goal_weights: np.ndarray | None = None  # override of the scene's weights
    idle_prob: float = 0.25
    gait_amplitude: np.ndarray = field(default_factory=lambda: np.ones(25))

    def __post_init__(self):
        if not 0.0 < self.v_follow < self.v_flee:
            raise SynthworldError("need 0 < v_follow < v_flee")
        if not 0.0 <= self.idle_prob < 1.0:
            raise SynthworldError("idle_prob must be in [0, 1)")
        amp = np.asarray(self.gait_amplitude, dtype=float)
        if amp.ndim != 1 or np.any(amp < 0):
            raise SynthworldError("gait amplitude must be a nonnegative vector")
        object.__setattr__(self, "gait_amplitude", amp)
        if self.goal_weights is not None:
            w = np.asarray(self.goal_weights, dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise SynthworldError("goal weights must be nonnegative and sum > 0")
            object.__setattr__(self, "goal_weights", w / w.sum())


@dataclass(frozen=True)
class AgentState:
    """The pieces of world state the goal choice depends on."""

    position: np.ndarray
    observer_position: np.ndarray
    observer_velocity: np.ndarray

    def __post_init__(self):
        for name in ("position", "observer_position", "observer_velocity"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,):
                raise SynthworldError(f"{name} must be shape (3,)")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class OracleDistribution:
    """Closed-form next-goal law: categorical over spots, Gaussian endpoints."""

    probs: np.ndarray  # (S,)
    means: np.ndarray  # (S, 3)
    stds: np.ndarray  # (S,)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise SynthworldError("oracle probabilities must be a distribution")
        object.__setattr__(self, "probs", p)


def approach_speed(state: AgentState) -> float:
    """Rate at which the observer closes the floor-plane gap to the agent, m/s.

    The observer moves at head height and the agent on the floor, so all
    proximity logic uses horizontal distances.
    """
    rel = state.position[:2] - state.observer_position[:2]
    dist = np.linalg.norm(rel)
    if dist < 1e-9:
        return 0.0
    return float(np.dot(state.observer_velocity[:2], rel / dist))


def approach_mode(policy: PolicySpec, state: AgentState) -> str:
    v = approach_speed(state)
    if v > policy.v_flee:
        return "flee"
    if 0.0 < v <= policy.v_follow:
        return "follow"
    return "neutral"


def _goal_probs(spec: SceneSpec, policy: PolicySpec, state: AgentState) -> np.ndarray:
    """Shared goal-choice law; both the simulator and the oracle call this."""
    base = policy.goal_weights if policy.goal_weights is not None else spec.spot_weights
    if base.shape != (spec.spots.shape[0],):
        raise SynthworldError("goal weights disagree with spot count")
    mode = approach_mode(policy, state)
    d_obs = np.linalg.norm(spec.spots[:, :2] - state.observer_position[:2], axis=1)
    d_agent = np.linalg.norm(spec.spots[:, :2] - state.position[:2], axis=1)

    w = base.copy()
    if mode == "flee":
        w[d_obs < FLEE_RADIUS] = 0.0
        # flight must gain ground: never pick a spot nearer the observer
        # than the agent already stands
        d_here = np.linalg.norm(state.position[:2] - state.observer_position[:2])
        w[d_obs <= d_here] = 0.0
    elif mode == "follow":
        keep = np.argmin(np.where(base > 0, d_obs, np.inf))
        w = np.zeros_like(w)
        w[keep] = 1.0

    excluded = w * (d_agent >= ARRIVE_RADIUS)
    if excluded.sum() > 0:
        w = excluded  # otherwise the agent may re-pick the spot it stands on
    if w.sum() == 0:
        # fleeing zeroed everything: run to the spot farthest from the observer
        w = np.zeros_like(w)
        w[int(np.argmax(d_obs))] = 1.0
    return w / w.sum()


def oracle(state: AgentState, spec: SceneSpec, policy: PolicySpec) -> OracleDistribution:
    """Exact conditional next-goal distribution implied by the policy."""
    if scene_sdf(spec, state.position[None])[0] <= 0.0:
        raise SynthworldError("oracle state is not in free space")
    probs = _goal_probs(spec, policy, state)
    return OracleDistribution(probs, spec.spots.copy(), np.full(len(probs), GOAL_STD))


# ---------------------------------------------------------------------------
# skeleton and gait
# ---------------------------------------------------------------------------

def _leg(prefix, x, y):
    return [
        (f"{prefix}_upper", (x, y, -0.08), (0.030, 0.030, 0.055)),
        (f"{prefix}_lower", (x, y, -0.16), (0.025, 0.025, 0.050)),
        (f"{prefix}_foot", (x, y, -0.235), (0.035, 0.022, 0.018)),
    ]


_SKELETON = (
    [
        ("pelvis", (-0.18, 0.0, 0.02), (0.060, 0.050, 0.045)),
        ("spine1", (-0.06, 0.0, 0.04), (0.070, 0.055, 0.050)),
        ("spine2", (0.06, 0.0, 0.04), (0.070, 0.055, 0.050)),
        ("chest", (0.16, 0.0, 0.03), (0.065, 0.055, 0.050)),
        ("neck", (0.24, 0.0, 0.08), (0.040, 0.030, 0.030)),
        ("head", (0.30, 0.0, 0.14), (0.055, 0.045, 0.045)),
        ("ear_l", (0.32, 0.04, 0.20), (0.018, 0.012, 0.028)),
        ("ear_r", (0.32, -0.04, 0.20), (0.018, 0.012, 0.028)),
        ("shoulder_l", (0.14, 0.07, 0.02), (0.035, 0.030, 0.035)),
        ("shoulder_r", (0.14, -0.07, 0.02), (0.035, 0.030, 0.035)),
        ("tail1", (-0.26, 0.0, 0.04), (0.045, 0.018, 0.018)),
        ("tail2", (-0.34, 0.0, 0.10), (0.045, 0.015, 0.015)),
        ("tail3", (-0.42, 0.0, 0.16), (0.040, 0.012, 0.012)),
    ]
    + _leg("leg_fl", 0.16, 0.09)
    + _leg("leg_fr", 0.16, -0.09)
    + _leg("leg_bl", -0.16, 0.09)
    + _leg("leg_br", -0.16, -0.09)
)

BONE_NAMES = tuple(name for name, _, _ in _SKELETON)
BONE_COUNT = len(BONE_NAMES)
REST_OFFSETS = np.array([off for _, off, _ in _SKELETON])
BONE_SCALES = np.array([sc for _, _, sc in _SKELETON])

# per-bone oscillation profile: diagonal leg pairs in phase, tail sways,
# head bobs at double frequency
_PHASE = np.zeros(BONE_COUNT)
_LIFT = np.zeros(BONE_COUNT)
_SWING = np.zeros(BONE_COUNT)
_SWAY = np.zeros(BONE_COUNT)
_PITCH = np.zeros(BONE_COUNT)
for _i, _name in enumerate(BONE_NAMES):
    if _name.startswith("leg_"):
        _PHASE[_i] = 0.0 if _name[4:6] in ("fl", "br") else math.pi
        depth = {"upper": 0.3, "lower": 0.7, "foot": 1.0}[_name.split("_")[-1]]
        _LIFT[_i] = 0.035 * depth
        _SWING[_i] = 0.050 * depth
        _PITCH[_i] = 0.35 * depth
    elif _name.startswith("tail"):
        _SWAY[_i] = 0.03 * (1 + int(_name[-1]))
        _PHASE[_i] = 0.6 * int(_name[-1])
    elif _name in ("head", "neck", "ear_l", "ear_r"):
        _LIFT[_i] = 0.012
        _PITCH[_i] = 0.06


def rest_bones(root: SE3) -> SE3:
    """Bone poses of the motionless agent: rest offsets rigidly attached."""
    n = root.shape + (BONE_COUNT,)
    q = np.broadcast_to(np.array([1.0, 0, 0, 0]), n + (4,))
    local = SE3(q, np.broadcast_to(REST_OFFSETS, n + (3,)))
    return _attach(root, local)


def _attach(root: SE3, local: SE3) -> SE3:
    wide = SE3(
        np.broadcast_to(root.q[..., None, :], local.q.shape),
        np.broadcast_to(root.t[..., None, :], local.t.shape),
    )
    return wide.compose(local)


def _gait_bones(root: SE3, phase: np.ndarray, speed: np.ndarray, amplitude: np.ndarray) -> SE3:
    """Articulated bone poses for a batch of frames: root (T,), phase/speed (T,)."""
    amp = amplitude if amplitude.shape == (BONE_COUNT,) else np.broadcast_to(amplitude, (BONE_COUNT,))
    gate = np.clip(np.asarray(speed) / 0.3, 0.0, 1.0)  # exact rest pose when standing
    a = amp * gate[..., None]  # (T, B)
    ph = np.asarray(phase)[..., None] + _PHASE
    off = np.broadcast_to(REST_OFFSETS, a.shape + (3,)).copy()
    off[..., 2] += a * _LIFT * np.maximum(0.0, np.sin(ph))
    off[..., 0] += a * _SWING * np.cos(ph)
    off[..., 1] += a * _SWAY * np.sin(0.5 * np.asarray(phase)[..., None] + _PHASE)
    off[..., 2] += a * _LIFT * 0.5 * np.sin(2.0 * np.asarray(phase))[..., None]
    rot = np.zeros(a.shape + (3,))
    rot[..., 1] = a * _PITCH * np.cos(ph)
    local = SE3(axis_angle_to_quat(rot), off)
    return _attach(root, local)


def _yaw_quats(yaws: np.ndarray) -> np.ndarray:
    half = 0.5 * np.asarray(yaws, dtype=float)
    q = np.zeros(half.shape + (4,))
    q[..., 0] = np.cos(half)
    q[..., 3] = np.sin(half)
    return q


# ---------------------------------------------------------------------------
# navigation: A* over free nodes + string pulling
# ---------------------------------------------------------------------------

class _NavGrid:
    """2D free-space grid at agent height, using the exact scene sdf."""

    def __init__(self, spec: SceneSpec, step: float = 0.1):
        self.spec = spec
        self.step = step
        self.z = spec.room_lo[2] + AGENT_HEIGHT
        lo = spec.room_lo[:2]
        hi = spec.room_hi[:2]
        nx = int(math.ceil((hi[0] - lo[0]) / step)) + 1
        ny = int(math.ceil((hi[1] - lo[1]) / step)) + 1
        self.lo = lo
        xs = lo[0] + np.arange(nx) * step
        ys = lo[1] + np.arange(ny) * step
        pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        pts3 = np.concatenate([pts, np.full(pts.shape[:2] + (1,), self.z)], axis=-1)
        self.free = scene_sdf(spec, pts3.reshape(-1, 3)).reshape(nx, ny) > CLEARANCE

    def _node(self, p: np.ndarray):
        ij = np.rint((np.asarray(p[:2]) - self.lo) / self.step).astype(int)
        ij = np.clip(ij, 0, np.array(self.free.shape) - 1)
        if self.free[ij[0], ij[1]]:
            return tuple(ij)
        # snap to the nearest free node in a small neighborhood
        best, best_d = None, np.inf
        for di in range(-3, 4):
            for dj in range(-3, 4):
                i, j = ij[0] + di, ij[1] + dj
                if 0 <= i < self.free.shape[0] and 0 <= j < self.free.shape[1] and self.free[i, j]:
                    d = di * di + dj * dj
                    if d < best_d:
                        best, best_d = (i, j), d
        if best is None:
            raise SynthworldError("position is not near free space")
        return best

    def _pos(self, node) -> np.ndarray:
        return np.array([self.lo[0] + node[0] * self.step, self.lo[1] + node[1] * self.step, self.z])

    def line_free(self, a: np.ndarray, b: np.ndarray) -> bool:
        n = max(2, int(np.linalg.norm(b - a) / (self.step / 3)) + 1)
        ts = np.linspace(0.0, 1.0, n)[:, None]
        pts = a[None] * (1 - ts) + b[None] * ts
        return bool(np.all(scene_sdf(self.spec, pts) > CLEARANCE * 0.95))

    def plan(self, start: np.ndarray, goal: np.ndarray) -> list:
        """Waypoints from start to goal at agent height; raises if unreachable."""
        s = self._node(start)
        g = self._node(goal)
        came, cost = {s: None}, {s: 0.0}
        heap = [(0.0, 0, s)]
        tick = 0
        moves = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
        while heap:
            _, _, cur = heapq.heappop(heap)
            if cur == g:
                break
            for di, dj in moves:
                nxt = (cur[0] + di, cur[1] + dj)
                if not (0 <= nxt[0] < self.free.shape[0] and 0 <= nxt[1] < self.free.shape[1]):
                    continue
                if not self.free[nxt]:
                    continue
                if di and dj and not (self.free[cur[0] + di, cur[1]] and self.free[cur[0], cur[1] + dj]):
                    continue  # no corner cutting
                step_cost = math.sqrt(2) if di and dj else 1.0
                c = cost[cur] + step_cost
                if c < cost.get(nxt, np.inf):
                    cost[nxt] = c
                    came[nxt] = cur
                    dx, dy = abs(g[0] - nxt[0]), abs(g[1] - nxt[1])
                    octile = max(dx, dy) + (math.sqrt(2) - 1) * min(dx, dy)
                    tick += 1
                    heapq.heappush(heap, (c + octile, tick, nxt))
        if g not in came:
            raise SynthworldError("no free path between spots")
        nodes = [g]
        while came[nodes[-1]] is not None:
            nodes.append(came[nodes[-1]])
        pts = [np.array([*start[:2], self.z])] + [self._pos(n) for n in reversed(nodes)]
        pts.append(np.array([*goal[:2], self.z]))
        return self._string_pull(pts)

    def _string_pull(self, pts: list) -> list:
        out = [pts[0]]
        i = 0
        while i < len(pts) - 1:
            j = len(pts) - 1
            while j > i + 1 and not self.line_free(pts[i], pts[j]):
                j -= 1
            out.append(pts[j])
            i = j
        return out


# ---------------------------------------------------------------------------
# observer scripts
# ---------------------------------------------------------------------------

class StaticObserver:
    def __init__(self, position=None, yaw=0.0):
        self.position = position
        self.yaw = yaw

    def reset(self, spec, agent_start, rng):
        if self.position is None:
            self._pos = _random_free_point(spec, rng, OBSERVER_HEIGHT)
        else:
            self._pos = np.asarray(self.position, dtype=float)

    def step(self, i, dt, agent_pos):
        return self._pos, self.yaw


class OrbitObserver:
    """Circles a center point, facing it."""

    def __init__(self, center=None, radius=1.2, period=20.0):
        self.center = center
        self.radius = radius
        self.period = period

    def reset(self, spec, agent_start, rng):
        if self.center is None:
            c = 0.5 * (spec.room_lo + spec.room_hi)
        else:
            c = np.asarray(self.center, dtype=float)
        self._center = np.array([c[0], c[1], spec.room_lo[2] + OBSERVER_HEIGHT])
        self._phase = rng.uniform(0, 2 * math.pi)

    def step(self, i, dt, agent_pos):
        a = self._phase + 2 * math.pi * (i * dt) / self.period
        pos = self._center + np.array([self.radius * math.cos(a), self.radius * math.sin(a), 0.0])
        return pos, a + math.pi  # face the center


class ApproachObserver:
    """Walks in a straight line toward the agent's starting point, then stops."""

    def __init__(self, speed, start=None, stop_distance=0.4):
        self.speed = speed
        self.start = start
        self.stop_distance = stop_distance

    def reset(self, spec, agent_start, rng):
        target = np.array([agent_start[0], agent_start[1], spec.room_lo[2] + OBSERVER_HEIGHT])
        if self.start is None:
            for _ in range(100):
                cand = _random_free_point(spec, rng, OBSERVER_HEIGHT)
                if np.linalg.norm(cand[:2] - target[:2]) > 1.0:
                    break
            pos = cand
        else:
            pos = np.asarray(self.start, dtype=float)
        self._pos = pos.copy()
        self._target = target

    def step(self, i, dt, agent_pos):
        rel = self._target - self._pos
        dist = np.linalg.norm(rel[:2])
        if dist > self.stop_distance:
            move = min(self.speed * dt, dist - self.stop_distance)
            self._pos = self._pos + rel / max(dist, 1e-9) * move
        yaw = math.atan2(rel[1], rel[0]) if dist > 1e-6 else 0.0
        return self._pos.copy(), yaw


class PursueObserver:
    """Re-aims at the agent's current position every frame."""

    def __init__(self, speed, stop_distance=0.5):
        self.speed = speed
        self.stop_distance = stop_distance

    def reset(self, spec, agent_start, rng):
        self._pos = _random_free_point(spec, rng, OBSERVER_HEIGHT)

    def step(self, i, dt, agent_pos):
        rel = np.array([agent_pos[0], agent_pos[1], self._pos[2]]) - self._pos
        dist = np.linalg.norm(rel[:2])
        if dist > self.stop_distance:
            self._pos = self._pos + rel / max(dist, 1e-9) * min(self.speed * dt, dist - self.stop_distance)
        yaw = math.atan2(rel[1], rel[0]) if dist > 1e-6 else 0.0
        return self._pos.copy(), yaw


class RandomWalkObserver:
    """Wanders between random free waypoints at a fixed speed."""

    def __init__(self, speed=0.35):
        self.speed = speed

    def reset(self, spec, agent_start, rng):
        self._spec = spec
        self._rng = rng
        self._pos = _random_free_point(spec, rng, OBSERVER_HEIGHT)
        self._target = _random_free_point(spec, rng, OBSERVER_HEIGHT)
        self._yaw = 0.0

    def step(self, i, dt, agent_pos):
        rel = self._target - self._pos
        dist = np.linalg.norm(rel[:2])
        if dist < 0.2:
            self._target = _random_free_point(self._spec, self._rng, OBSERVER_HEIGHT)
            rel = self._target - self._pos
            dist = np.linalg.norm(rel[:2])
        self._pos = self._pos + rel / max(dist, 1e-9) * min(self.speed * dt, dist)
        if dist > 1e-6:
            self._yaw = math.atan2(rel[1], rel[0])
        return self._pos.copy(), self._yaw


class RecordedObserver:
    """Replays a prerecorded position/yaw stream (clamping at the end)."""

    def __init__(self, positions, yaws):
        self.positions = np.asarray(positions, dtype=float)
        self.yaws = np.asarray(yaws, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[0] != self.yaws.shape[0]:
            raise SynthworldError("recorded stream needs matching positions and yaws")

    def reset(self, spec, agent_start, rng):
        pass

    def step(self, i, dt, agent_pos):
        j = min(i, len(self.positions) - 1)
        return self.positions[j].copy(), float(self.yaws[j])


def _random_free_point(spec: SceneSpec, rng: np.random.Generator, height: float) -> np.ndarray:
    # the floor caps the sdf at AGENT_HEIGHT, so the margin must stay below it
    margin = min(CLEARANCE + 0.1, AGENT_HEIGHT - 0.03)
    for _ in range(500):
        xy = rng.uniform(spec.room_lo[:2] + 0.3, spec.room_hi[:2] - 0.3)
        p = np.array([xy[0], xy[1], spec.room_lo[2] + height])
        probe = np.array([xy[0], xy[1], spec.room_lo[2] + AGENT_HEIGHT])
        if scene_sdf(spec, probe[None])[0] > margin:
            return p
    raise SynthworldError("could not find a free point in the scene")


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

_NAV_CACHE: dict = {}


def _nav_for(spec: SceneSpec) -> _NavGrid:
    key = id(spec)
    hit = _NAV_CACHE.get(key)
    if hit is None or hit[0] is not spec:
        hit = (spec, _NavGrid(spec))
        _NAV_CACHE[key] = hit
    return hit[1]


def simulate(
    spec: SceneSpec,
    policy: PolicySpec,
    script,
    seconds: float,
    seed: int,
    start=None,
    pose_jitter: float = 0.0,
    clip_id: str = "clip000",
    on_decision=None,
) -> Clip:
    """Run the scripted agent for ``seconds`` at 10 Hz.

    The agent walks A*-planned, string-pulled paths to spots drawn from the
    policy's goal law, idles between trips, flees immediately when the
    observer closes faster than ``v_flee``, and articulates its bones with a
    speed-gated gait. Deterministic given (spec, policy, script, seed).
    ``on_decision(frame, spot_or_None)`` observes every goal/idle decision.
    """
    if policy.gait_amplitude.shape not in ((BONE_COUNT,), (1,)):
        raise SynthworldError(f"gait amplitude must have {BONE_COUNT} entries")
    rng = np.random.default_rng(seed)
    nav = _nav_for(spec)
    dt = 1.0 / FPS
    n_frames = int(round(seconds * FPS)) + 1

    if start is None:
        pos = _random_free_point(spec, rng, AGENT_HEIGHT)
    else:
        pos = np.array([start[0], start[1], spec.room_lo[2] + AGENT_HEIGHT], dtype=float)
        if scene_sdf(spec, pos[None])[0] <= CLEARANCE:
            raise SynthworldError("start position is not in free space")
    script.reset(spec, pos, rng)

    yaw = rng.uniform(-math.pi, math.pi)
    phase = 0.0
    speed = 0.0
    plan = None  # (waypoints, cumulative lengths, arc position)
    idle_until = 0.5 * dt  # first decision waits one frame so observer velocity exists
    goal_spot = None
    prev_obs = None

    yaws, positions, phases, speeds = [], [], [], []
    obs_yaws, obs_positions = [], []

    def decide(frame, now, state, fleeing):
        nonlocal plan, idle_until, goal_spot, speed
        if not fleeing and rng.uniform() < policy.idle_prob:
            idle_until = now + rng.uniform(*IDLE_RANGE)
            plan, goal_spot = None, None
            if on_decision is not None:
                on_decision(frame, None)
            return
        probs = _goal_probs(spec, policy, state)
        k = int(rng.choice(len(probs), p=probs))
        if on_decision is not None:
            on_decision(frame, k)
        target = spec.spots[k]
        if np.linalg.norm(target[:2] - pos[:2]) < ARRIVE_RADIUS:
            idle_until = now + rng.uniform(*IDLE_RANGE)  # already there
            plan, goal_spot = None, None
            return
        pts = nav.plan(pos, target)
        seg = np.diff(np.array(pts), axis=0)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
        plan = [pts, cum, 0.0]
        goal_spot = k

    for i in range(n_frames):
        now = i * dt
        opos, oyaw = script.step(i, dt, pos)
        ovel = (opos - prev_obs) / dt if prev_obs is not None else np.zeros(3)
        prev_obs = opos
        state = AgentState(pos, opos, ovel)

        fleeing = approach_mode(policy, state) == "flee"
        goal_bad = goal_spot is not None and np.linalg.norm(spec.spots[goal_spot][:2] - opos[:2]) < FLEE_RADIUS
        if fleeing and (plan is None or goal_bad):
            decide(i, now, state, fleeing=True)
        elif plan is None and now >= idle_until:
            decide(i, now, state, fleeing=False)

        if plan is not None:
            pts, cum, s = plan
            total = cum[-1]
            # trapezoidal speed: accelerate, cruise, brake to stop at the goal
            speed = min(CRUISE_SPEED, speed + ACCEL * dt, math.sqrt(2 * ACCEL * max(total - s, 0.0)))
            s = min(total, s + speed * dt)
            j = int(np.searchsorted(cum, s, side="right") - 1)
            if j >= len(pts) - 1:
                new_pos = pts[-1].copy()
            else:
                f = (s - cum[j]) / max(cum[j + 1] - cum[j], 1e-12)
                new_pos = pts[j] * (1 - f) + pts[j + 1] * f
            heading = new_pos - pos
            if np.linalg.norm(heading[:2]) > 1e-6:
                want = math.atan2(heading[1], heading[0])
                # first-order yaw smoothing toward the path tangent
                err = (want - yaw + math.pi) % (2 * math.pi) - math.pi
                yaw += 0.35 * err
            pos = new_pos
            plan[2] = s
            if s >= total:
                plan, goal_spot = None, None
                idle_until = now + rng.uniform(*IDLE_RANGE)
                speed = 0.0
        else:
            speed = 0.0

        phase += 2 * math.pi * STRIDE_HZ_AT_CRUISE * (speed / CRUISE_SPEED) * dt
        yaws.append(yaw)
        positions.append(pos)
        phases.append(phase)
        speeds.append(speed)
        obs_yaws.append(oyaw)
        obs_positions.append(opos)

    root = SE3(_yaw_quats(np.array(yaws)), np.stack(positions))
    bones = _gait_bones(root, np.array(phases), np.array(speeds), policy.gait_amplitude)
    if pose_jitter > 0:
        bones = SE3(bones.q, bones.t + rng.normal(scale=pose_jitter, size=bones.t.shape))

    agent = AgentTrack(clip_id, FPS, root, bones)
    observer = ObserverTrack(clip_id, FPS, SE3(_yaw_quats(np.array(obs_yaws)), np.stack(obs_positions)))
    return Clip(agent, observer)


# ---------------------------------------------------------------------------
# default scenes and corpus generation
# ---------------------------------------------------------------------------

def default_scene() -> SceneSpec:
    """One room with a doorway divider and two furniture blocks."""
    return SceneSpec(
        room_lo=(0.0, 0.0, 0.0),
        room_hi=(6.0, 4.0, 2.4),
        boxes=(
            Box((2.9, 0.0, 0.0), (3.1, 2.6, 2.4), semantic=0),  # divider, gap at far side
            Box((0.8, 2.9, 0.0), (2.2, 3.6, 0.45), semantic=1),  # couch
            Box((4.2, 0.6, 0.0), (5.0, 1.4, 0.5), semantic=1),  # table
        ),
        spots=np.array(
            [
                [0.7, 0.7, AGENT_HEIGHT],
                [5.3, 3.3, AGENT_HEIGHT],
                [0.7, 2.2, AGENT_HEIGHT],
                [5.3, 0.7, AGENT_HEIGHT],
            ]
        ),
        spot_weights=np.array([0.35, 0.30, 0.20, 0.15]),
    )


def default_policy(**overrides) -> PolicySpec:
    return PolicySpec(**overrides)


@dataclass(frozen=True)
class CorpusConfig:
    """Parameters for one generated world bundle."""

    out_dir: str
    scene: SceneSpec = field(default_factory=default_scene)
    policy: PolicySpec = field(default_factory=default_policy)
    clips: int = 23
    eval_clips: int = 1
    seconds: float = 240.0
    stride: int = 4
    observers: tuple = ("static", "orbit", "random_walk", "approach")
    pose_jitter: float = 0.0

    def __post_init__(self):
        if self.clips < 1 or not 0 <= self.eval_clips < self.clips:
            raise SynthworldError("need clips >= 1 and 0 <= eval_clips < clips")


_OBSERVER_FACTORY = {
    "static": lambda policy: StaticObserver(),
    "orbit": lambda policy: OrbitObserver(),
    "random_walk": lambda policy: RandomWalkObserver(),
    "approach": lambda policy: ApproachObserver(speed=2.0 * policy.v_flee),
    "pursue": lambda policy: PursueObserver(speed=2.0 * policy.v_flee),
    "slow_walk": lambda policy: RandomWalkObserver(speed=0.8 * policy.v_follow),
}


def flee_corpus_config(out_dir: str) -> CorpusConfig:
    """Corpus where goal choice is dominated by observer-reactive flight."""
    return CorpusConfig(
        out_dir=out_dir,
        clips=12,
        eval_clips=1,
        seconds=120.0,
        observers=("pursue", "approach"),
    )


def generate_corpus(config: CorpusConfig, seed: int) -> dict:
    """Simulate clips, write the world bundle + split manifest, return counts.

    Per-clip seeds come from spawning the root seed, so regeneration with the
    same seed is byte-identical and clips are independent.
    """
    volume = build_scene(config.scene)
    children = np.random.SeedSequence(seed).spawn(config.clips)
    clips = []
    for i, child in enumerate(children):
        kind = config.observers[i % len(config.observers)]
        script = _OBSERVER_FACTORY[kind](config.policy)
        clip_seed = int(child.generate_state(1)[0])
        clips.append(
            simulate(
                config.scene,
                config.policy,
                script,
                config.seconds,
                clip_seed,
                pose_jitter=config.pose_jitter,
                clip_id=f"clip{i:03d}",
            )
        )
    world = World(volume, clips, BONE_SCALES)
    save_world(config.out_dir, world)

    ids = [c.clip_id for c in clips]
    n_train = config.clips - config.eval_clips
    counts = [len(slice_windows(c, config.stride)) for c in clips]
    split = {
        "trainClips": ids[:n_train],
        "evalClips": ids[n_train:],
        "stride": config.stride,
        "trainWindows": int(sum(counts[:n_train])),
        "evalWindows": int(sum(counts[n_train:])),
        "seed": seed,
    }
    with open(os.path.join(config.out_dir, "split.json"), "w") as fh:
        json.dump(split, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return split


def load_split(dirpath: str) -> dict:
    with open(os.path.join(dirpath, "split.json")) as fh:
        return json.load(fh)
