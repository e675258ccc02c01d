"""World state: scene feature volumes, motion tracks, and trajectory windows.

A *world* bundles one scene feature volume with a set of motion clips. Each
clip pairs an agent track (root pose plus bone poses per frame) with an
observer track at the same frame rate. Windows of 64 frames at 10 Hz are the
unit every model consumes: 8 past frames, 56 future frames, with the frame
before the future ("anchor", index 7) defining the ego coordinate frame.

On-disk layout of a world directory:

- ``scene.vol``    binary feature volume (see :func:`save_volume`)
- ``tracks.jsonl`` one JSON object per clip
- ``meta.json``    bone count, bone scales, unit conventions
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import SE3, quat_from_yaw, se3_compose, se3_inverse

FPS = 10.0
WINDOW_STEPS = 64
PAST_STEPS = 8
HORIZON_STEPS = 56
ANCHOR_STEP = PAST_STEPS - 1

VOLUME_MAGIC = b"ATSV"
VOLUME_VERSION = 1

OCCUPANCY_CHANNEL = 0
SDF_CHANNEL = 1
SEMANTIC_CHANNEL0 = 2


class WorldFormatError(ValueError):
    """Corrupt or inconsistent world files."""


# ---------------------------------------------------------------------------
# scene feature volume
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneFeatureVolume:
    """Regular grid of per-voxel features, node-centered.

    ``values`` has shape (nx, ny, nz, C), float32. The node (i, j, k) sits at
    ``origin + (i, j, k) * voxel_size``. Channel 0 is occupancy in [0, 1],
    channel 1 is signed distance in meters (negative inside), channels 2+ are
    semantic one-hot labels.
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float32)
        values = np.asarray(self.values, dtype=np.float32)
        if origin.shape != (3,) or values.ndim != 4:
            raise WorldFormatError("volume needs origin (3,) and values (nx,ny,nz,C)")
        if self.voxel_size <= 0 or not np.all(np.isfinite(values)):
            raise WorldFormatError("bad voxel size or non-finite values")
        if min(values.shape[:3]) < 2:
            raise WorldFormatError("volume needs at least 2 nodes per axis")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def node_positions(self) -> np.ndarray:
        nx, ny, nz = self.dims
        idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
        return self.origin + idx * self.voxel_size

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear sample of all channels at world points (..., 3) -> (..., C).

        Outside the grid: occupancy reads 1, signed distance reads the value
        at the nearest in-bounds position, semantic channels read 0.
        """
        points = np.asarray(points, dtype=np.float64)
        batch = points.shape[:-1]
        p = points.reshape(-1, 3)
        g = (p - self.origin.astype(np.float64)) / float(self.voxel_size)
        hi = np.asarray(self.dims, dtype=np.float64) - 1.0
        inside = np.all((g >= 0.0) & (g <= hi), axis=-1)
        gc = np.clip(g, 0.0, hi)

        i0 = np.minimum(np.floor(gc), hi - 1.0).astype(np.int64)
        f = gc - i0
        v = self.values.astype(np.float64)
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        out = np.zeros((p.shape[0], self.channels))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    out += w[:, None] * v[x0 + dx, y0 + dy, z0 + dz]

        outside = ~inside
        out[outside, OCCUPANCY_CHANNEL] = 1.0
        out[outside, SEMANTIC_CHANNEL0:] = 0.0
        return out.reshape(batch + (self.channels,))


def save_volume(path: str, vol: SceneFeatureVolume) -> None:
    """Write ``scene.vol``: little-endian header then f32 features.

    Feature order: x fastest, then y, then z; the C channel values of one
    voxel are contiguous.
    """
    nx, ny, nz = vol.dims
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", VOLUME_VERSION))
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(struct.pack("<I", vol.channels))
        fh.write(struct.pack("<3f", *vol.origin.tolist()))
        fh.write(struct.pack("<f", float(vol.voxel_size)))
        fh.write(np.ascontiguousarray(vol.values.transpose(2, 1, 0, 3), dtype="<f4").tobytes())


def load_volume(path: str) -> SceneFeatureVolume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VOLUME_MAGIC:
        raise WorldFormatError(f"bad volume magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VOLUME_VERSION:
        raise WorldFormatError(f"unsupported volume version {version}")
    nx, ny, nz = struct.unpack_from("<3I", blob, 8)
    (channels,) = struct.unpack_from("<I", blob, 20)
    origin = np.array(struct.unpack_from("<3f", blob, 24), dtype=np.float32)
    (voxel_size,) = struct.unpack_from("<f", blob, 36)
    payload = blob[40:]
    expect = nx * ny * nz * channels * 4
    if len(payload) != expect:
        raise WorldFormatError(f"volume payload is {len(payload)} bytes, expected {expect}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx, channels)
    return SceneFeatureVolume(origin, float(voxel_size), arr.transpose(2, 1, 0, 3))


# ---------------------------------------------------------------------------
# tracks and clips
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentTrack:
    """Per-frame agent motion: root pose and bone poses, world frame."""

    clip_id: str
    fps: float
    root: SE3  # (T,)
    bones: SE3  # (T, B)

    def __post_init__(self):
        if self.root.shape != self.bones.shape[:1] or self.bones.q.ndim != 3:
            raise WorldFormatError("agent track root/bones shapes disagree")

    def __len__(self) -> int:
        return self.root.shape[0]

    @property
    def bone_count(self) -> int:
        return self.bones.shape[1]


@dataclass(frozen=True)
class ObserverTrack:
    """Per-frame observer pose, world frame."""

    clip_id: str
    fps: float
    poses: SE3  # (T,)

    def __len__(self) -> int:
        return self.poses.shape[0]


@dataclass(frozen=True)
class Clip:
    """Agent and observer tracks paired by clip id."""

    agent: AgentTrack
    observer: ObserverTrack

    def __post_init__(self):
        if self.agent.clip_id != self.observer.clip_id:
            raise WorldFormatError("clip id mismatch between agent and observer tracks")
        if self.agent.fps != self.observer.fps or len(self.agent) != len(self.observer):
            raise WorldFormatError("agent and observer tracks disagree on fps or length")

    @property
    def clip_id(self) -> str:
        return self.agent.clip_id

    @property
    def fps(self) -> float:
        return self.agent.fps

    def __len__(self) -> int:
        return len(self.agent)


def _pose_json(x: SE3, idx) -> dict:
    return {"q": x.q[idx].tolist(), "t": x.t[idx].tolist()}


def _pose_from_json(d: dict) -> tuple[list, list]:
    return d["q"], d["t"]


def save_tracks(path: str, clips: list[Clip]) -> None:
    """Write ``tracks.jsonl``, one clip per line, full float precision."""
    with open(path, "w") as fh:
        for clip in clips:
            frames = []
            for i in range(len(clip)):
                frames.append(
                    {
                        "root": _pose_json(clip.agent.root, i),
                        "bones": [_pose_json(clip.agent.bones, (i, j)) for j in range(clip.agent.bone_count)],
                        "observer": _pose_json(clip.observer.poses, i),
                    }
                )
            rec = {"clipId": clip.clip_id, "fps": clip.fps, "frames": frames}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_tracks(path: str) -> list[Clip]:
    clips = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            clip_id, fps = rec["clipId"], float(rec["fps"])
            frames = rec["frames"]
            if not frames:
                raise WorldFormatError(f"clip {clip_id} has no frames")
            b = len(frames[0]["bones"])
            root_q = np.array([f["root"]["q"] for f in frames])
            root_t = np.array([f["root"]["t"] for f in frames])
            bone_q = np.array([[bn["q"] for bn in f["bones"]] for f in frames])
            bone_t = np.array([[bn["t"] for bn in f["bones"]] for f in frames])
            obs_q = np.array([f["observer"]["q"] for f in frames])
            obs_t = np.array([f["observer"]["t"] for f in frames])
            if bone_q.shape != (len(frames), b, 4):
                raise WorldFormatError(f"clip {clip_id} has ragged bone arrays")
            agent = AgentTrack(clip_id, fps, SE3(root_q, root_t), SE3(bone_q, bone_t))
            observer = ObserverTrack(clip_id, fps, SE3(obs_q, obs_t))
            clips.append(Clip(agent, observer))
    return clips


# ---------------------------------------------------------------------------
# world = volume + clips + meta
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class World:
    scene: SceneFeatureVolume
    clips: list
    bone_scales: np.ndarray  # (B, 3), constant per world

    def __post_init__(self):
        scales = np.asarray(self.bone_scales, dtype=float)
        if scales.ndim != 2 or scales.shape[1] != 3 or np.any(scales <= 0):
            raise WorldFormatError("bone scales must be (B, 3) positive")
        for clip in self.clips:
            if clip.agent.bone_count != scales.shape[0]:
                raise WorldFormatError(
                    f"clip {clip.clip_id} has {clip.agent.bone_count} bones, meta says {scales.shape[0]}"
                )
        object.__setattr__(self, "bone_scales", scales)

    @property
    def bone_count(self) -> int:
        return self.bone_scales.shape[0]


def save_world(dirpath: str, world: World) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_volume(os.path.join(dirpath, "scene.vol"), world.scene)
    save_tracks(os.path.join(dirpath, "tracks.jsonl"), world.clips)
    meta = {
        "boneCount": world.bone_count,
        "units": "meters",
        "up": "z",
        "quaternionOrder": "wxyz",
        "boneScales": world.bone_scales.tolist(),
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_world(dirpath: str) -> World:
    with open(os.path.join(dirpath, "meta.json")) as fh:
        meta = json.load(fh)
    for key, want in (("units", "meters"), ("up", "z"), ("quaternionOrder", "wxyz")):
        if meta.get(key) != want:
            raise WorldFormatError(f"meta {key}={meta.get(key)!r}, expected {want!r}")
    scales = np.asarray(meta["boneScales"], dtype=float)
    if scales.shape[0] != meta["boneCount"]:
        raise WorldFormatError("boneScales length disagrees with boneCount")
    scene = load_volume(os.path.join(dirpath, "scene.vol"))
    clips = load_tracks(os.path.join(dirpath, "tracks.jsonl"))
    return World(scene, clips, scales)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryWindow:
    """64 consecutive frames at 10 Hz, world frame.

    Frames 0..7 are the past, frame 7 is the anchor, frames 8..63 the future.
    The goal of the window is the root translation at the final frame.
    """

    clip_id: str
    start: int
    root: SE3  # (64,)
    bones: SE3  # (64, B)
    observer: SE3  # (64,)

    def __post_init__(self):
        if self.root.shape != (WINDOW_STEPS,) or self.observer.shape != (WINDOW_STEPS,):
            raise WorldFormatError("window must have exactly 64 frames")
        if self.bones.shape[0] != WINDOW_STEPS:
            raise WorldFormatError("window bones must have exactly 64 frames")

    @property
    def anchor(self) -> SE3:
        return self.root[ANCHOR_STEP]

    @property
    def goal_world(self) -> np.ndarray:
        return self.root.t[WINDOW_STEPS - 1]

    @property
    def bone_count(self) -> int:
        return self.bones.shape[1]


def slice_windows(clip: Clip, stride: int = 4) -> list[TrajectoryWindow]:
    """All windows of 64 frames whose start advances by ``stride``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t = len(clip)
    out = []
    for s in range(0, t - WINDOW_STEPS + 1, stride):
        sl = slice(s, s + WINDOW_STEPS)
        out.append(
            TrajectoryWindow(
                clip.clip_id,
                s,
                clip.agent.root[sl],
                clip.agent.bones[sl],
                clip.observer.poses[sl],
            )
        )
    return out


@dataclass(frozen=True)
class EgoWindow:
    """A trajectory window re-expressed in its anchor frame.

    The anchor-frame root at the anchor step is the identity. ``anchor``
    retains the world pose so results map back with :func:`from_ego`.
    """

    clip_id: str
    start: int
    anchor: SE3
    root: SE3  # (64,)
    bones: SE3  # (64, B)
    observer: SE3  # (64,)

    @property
    def bone_count(self) -> int:
        return self.bones.shape[1]

    def goal(self) -> np.ndarray:
        return self.root.t[WINDOW_STEPS - 1]

    def path(self) -> np.ndarray:
        """Future root translations, shape (56, 3)."""
        return self.root.t[PAST_STEPS:]

    def horizon_pose_features(self) -> np.ndarray:
        """Future bone poses as rows of 6-vectors, shape (56, 6 B).

        Each bone contributes (axis-angle, translation) in the anchor frame;
        bones are laid out contiguously per frame.
        """
        v = self.bones[PAST_STEPS:].log6()  # (56, B, 6)
        return v.reshape(HORIZON_STEPS, -1)

    @staticmethod
    def bones_from_pose_features(feats: np.ndarray) -> SE3:
        """Inverse of :meth:`horizon_pose_features` (any leading step count)."""
        feats = np.asarray(feats, dtype=float)
        steps = feats.shape[0]
        return SE3.from_log6(feats.reshape(steps, -1, 6))

    def past_pose_features(self) -> np.ndarray:
        """Past root and bone poses as 6-vectors, shape (8, 6 (B+1))."""
        root = self.root[:PAST_STEPS].log6()[:, None, :]  # (8, 1, 6)
        bones = self.bones[:PAST_STEPS].log6()  # (8, B, 6)
        return np.concatenate([root, bones], axis=1).reshape(PAST_STEPS, -1)

    def observer_features(self) -> np.ndarray:
        """Past observer poses as 6-vectors, shape (8, 6)."""
        return self.observer[:PAST_STEPS].log6()


def _broadcast_pose(x: SE3, shape) -> SE3:
    q = np.broadcast_to(x.q, tuple(shape) + (4,))
    t = np.broadcast_to(x.t, tuple(shape) + (3,))
    return SE3(q, t)


def to_ego(window: TrajectoryWindow) -> EgoWindow:
    """Express a window in the frame of its anchor root pose."""
    inv = se3_inverse(window.anchor)
    n = WINDOW_STEPS
    b = window.bone_count
    return EgoWindow(
        window.clip_id,
        window.start,
        window.anchor,
        se3_compose(_broadcast_pose(inv, (n,)), window.root),
        se3_compose(_broadcast_pose(inv, (n, b)), window.bones),
        se3_compose(_broadcast_pose(inv, (n,)), window.observer),
    )


def from_ego(ego: EgoWindow) -> TrajectoryWindow:
    n = WINDOW_STEPS
    b = ego.bone_count
    return TrajectoryWindow(
        ego.clip_id,
        ego.start,
        se3_compose(_broadcast_pose(ego.anchor, (n,)), ego.root),
        se3_compose(_broadcast_pose(ego.anchor, (n, b)), ego.bones),
        se3_compose(_broadcast_pose(ego.anchor, (n,)), ego.observer),
    )


def sample_local_volume(scene: SceneFeatureVolume, anchor: SE3, n: int = 16, spacing: float = 0.15) -> np.ndarray:
    """Local feature grid around the anchor, shape (C, n, n, n).

    The grid is centered on the anchor position and axis-aligned with the
    anchor orientation, so it travels and turns with the agent.
    """
    half = (n - 1) / 2.0
    axis = (np.arange(n) - half) * spacing
    offsets = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)  # (n,n,n,3)
    points = anchor.apply(offsets.reshape(-1, 3)).reshape(n, n, n, 3)
    feats = scene.sample(points)  # (n,n,n,C)
    return np.ascontiguousarray(feats.transpose(3, 0, 1, 2))


# ---------------------------------------------------------------------------
# lattice-preserving world transforms (used by invariance checks and splits)
# ---------------------------------------------------------------------------

def yaw_shift_se3(quarter_turns: int, shift: np.ndarray) -> SE3:
    """World transform of k quarter turns about +z followed by a translation."""
    return SE3(quat_from_yaw(quarter_turns * np.pi / 2.0), np.asarray(shift, dtype=float))


def transform_volume(vol: SceneFeatureVolume, quarter_turns: int, shift_voxels) -> SceneFeatureVolume:
    """Rotate a volume by 90-degree steps about +z and shift by whole voxels.

    The returned volume samples to exactly the transformed field: for
    ``g = yaw_shift_se3(k, shift_voxels * voxel_size)`` and any point p,
    ``out.sample(g.apply(p)) == vol.sample(p)`` up to float rounding.
    """
    values = vol.values
    origin = vol.origin.astype(np.float64).copy()
    h = float(vol.voxel_size)
    for _ in range(quarter_turns % 4):
        nx, ny = values.shape[0], values.shape[1]
        # (x, y) -> (-y, x): new axis 0 runs over old y reversed
        values = values.transpose(1, 0, 2, 3)[::-1]
        origin = np.array([-(origin[1] + (ny - 1) * h), origin[0], origin[2]])
    shift = np.asarray(shift_voxels, dtype=np.int64)
    origin = origin + shift * h
    return SceneFeatureVolume(origin, h, np.ascontiguousarray(values))


def transform_clip(clip: Clip, g: SE3) -> Clip:
    """Left-multiply every pose in a clip by a world transform."""
    t = len(clip)
    b = clip.agent.bone_count
    agent = AgentTrack(
        clip.clip_id,
        clip.fps,
        se3_compose(_broadcast_pose(g, (t,)), clip.agent.root),
        se3_compose(_broadcast_pose(g, (t, b)), clip.agent.bones),
    )
    observer = ObserverTrack(clip.clip_id, clip.fps, se3_compose(_broadcast_pose(g, (t,)), clip.observer.poses))
    return Clip(agent, observer)
