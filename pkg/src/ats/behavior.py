"""Hierarchical behavior generation: perceive, pick a goal, plan, move.

The stack turns a world plus a short motion history into new motion. Three
encoders compress what the agent perceives into a 192-d code: a residual 3D
conv net reads a local feature grid (scene), and two small MLPs read the
recent observer poses (observer) and the agent's own recent root and bone
motion (past). Conditioned on those codes, staged denoisers then sample

    goal   -- where the root ends up 5.6 s from now, a 3-point
    path   -- the 56-step root translation track leading there, (3, 56)
    pose   -- per-step bone transforms as 6-vector logs, (6 B, 56)

each stage conditioning the next, with the goal injected densely into the
path net and the path injected densely into the pose net. Everything is
expressed in the anchor frame of the context (the root pose at the last
observed step), which is what makes a model trained in one room usable in a
translated or rotated copy of it.

Long sequences come from chaining 5.6 s segments: each segment re-encodes
the previous segment's final 0.8 s as its new context, so nothing carries
over except the motion itself.

Two ablation switches mirror the main comparisons: a one-stage variant that
denoises body motion directly from the codes (no goal, no path), and a
world-frame variant that skips the anchor inverse so all inputs and targets
stay in world coordinates.

Training is joint: every step sums the per-dimension denoising losses of
the configured stages on a shared batch and backpropagates through the
encoders, so the codes serve all stages at once. Condition groups are
dropped independently (and jointly, for the fully unconditional branch)
during training; at generation time a dropped or disabled group is exactly
the all-zero code, which the zero-initialized condition paths of the
denoisers map to their unconditional output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .diffusion import (
    ControlUNet,
    EpsilonMLP,
    NoiseSchedule,
    TrainingDivergedError,
    corrupt,
    denoise_loss,
    sample,
)
from .geometry import SE3, se3_compose, se3_inverse
from .geometry import BoneSet, blend_transform, kabsch_fit, skinning_weights
from .nn import Conv3d, Dense, Graph, GroupNorm, MLP, Module
from .nn import engine
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.engine import Tensor
from .nn.optim import AdamW
from .worldstate import (
    FPS,
    HORIZON_STEPS,
    PAST_STEPS,
    EgoWindow,
    TrajectoryWindow,
    sample_local_volume,
    slice_windows,
    to_ego,
)

CODE_DIM = 64
CODE_GROUPS = ("scene", "observer", "past")
SEGMENT_SECONDS = HORIZON_STEPS / FPS
# largest root step allowed across a segment seam; cruise speed covers
# 0.06 m per step, so this only ever trims model error, not real motion
MAX_SEAM_STEP = 0.08

_STAGES = ("goal", "path", "pose", "one_stage")
_STAGE_TAG = {"goal": 1, "path": 2, "pose": 3, "one_stage": 4}


class BehaviorError(RuntimeError):
    """Raised when generation is asked of a model that cannot provide it."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BehaviorConfig:
    """Which stages exist, how they are built, and how they are trained."""

    stages: tuple = ("goal", "path", "pose")
    world_frame: bool = False
    path_spatial_mode: str = "dense"
    grid_size: int = 16
    grid_spacing: float = 0.3
    goal_hidden: int = 256
    goal_depth: int = 5
    widths: tuple = (24, 48, 48)
    scene_widths: tuple = (8, 16, 32)
    stride: int = 4
    steps: int = 2000
    batch: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    p_drop: float = 0.1
    p_joint: float = 0.1

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("at least one stage is required")
        for name in stages:
            if name not in _STAGES:
                raise ValueError(f"unknown stage {name!r}")
        if len(set(stages)) != len(stages):
            raise ValueError("duplicate stage")
        if self.path_spatial_mode not in ("dense", "code"):
            raise ValueError(f"unknown path_spatial_mode {self.path_spatial_mode!r}")
        if self.grid_size < 8 or self.grid_size % 8 != 0:
            raise ValueError("grid_size must be a positive multiple of 8")
        if self.grid_spacing <= 0:
            raise ValueError("grid_spacing must be positive")
        if len(tuple(self.widths)) != 3 or len(tuple(self.scene_widths)) != 3:
            raise ValueError("widths must have three levels")
        if any(w % 8 != 0 for w in self.scene_widths):
            raise ValueError("scene widths must be multiples of 8")
        if self.steps < 1 or self.batch < 1 or self.stride < 1:
            raise ValueError("steps, batch and stride must be positive")
        if not (0.0 <= self.p_drop <= 1.0 and 0.0 <= self.p_joint <= 1.0):
            raise ValueError("dropout probabilities must lie in [0, 1]")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "scene_widths", tuple(self.scene_widths))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["stages"] = list(self.stages)
        out["widths"] = list(self.widths)
        out["scene_widths"] = list(self.scene_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BehaviorConfig":
        data = dict(data)
        for key in ("stages", "widths", "scene_widths"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def save_config(config: BehaviorConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> BehaviorConfig:
    with open(path) as fh:
        return BehaviorConfig.from_dict(json.load(fh))


def world_frame_variant(config: BehaviorConfig, flag: bool = True) -> BehaviorConfig:
    """The same configuration with anchor-frame re-expression on or off."""
    return dataclasses.replace(config, world_frame=bool(flag))


# ---------------------------------------------------------------------------
# perception encoders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerceptionCode:
    """The three 64-d condition codes; concatenation order is (scene, observer, past)."""

    scene: np.ndarray
    observer: np.ndarray
    past: np.ndarray

    def __post_init__(self):
        for name in CODE_GROUPS:
            v = np.asarray(getattr(self, name), dtype=np.float32)
            if v.shape != (CODE_DIM,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} code must be a finite {CODE_DIM}-vector")
            object.__setattr__(self, name, v)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.scene, self.observer, self.past])


def _as_tensor(graph: Graph, value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return graph.constant(np.asarray(value, dtype=np.float32))


class _ResBlock3d(Module):
    def __init__(self, rng, channels: int):
        self.n1 = GroupNorm(channels)
        self.c1 = Conv3d(rng, channels, channels)
        self.n2 = GroupNorm(channels)
        self.c2 = Conv3d(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c1(engine.silu(self.n1(x)))
        return x + self.c2(engine.silu(self.n2(h)))


class SceneEncoder(Module):
    """Residual 3D conv encoder: a (C, n, n, n) local grid to a 64-d code.

    Three stride-2 stages take n down to n/8, a residual block at each
    width, then global average pooling and a linear head.
    """

    def __init__(self, rng, channels: int, size: int = 16, widths=(8, 16, 32), code_dim: int = CODE_DIM):
        if size % 8 != 0:
            raise ValueError("grid size must be a multiple of 8")
        c1, c2, c3 = widths
        self.top = c3
        # non-overlapping patch stem: cheapest way off the full grid
        self.stem = Conv3d(rng, channels, c1, 2, 2, 0)
        self.block1 = _ResBlock3d(rng, c1)
        self.down1 = Conv3d(rng, c1, c2, 3, 2, 1)
        self.block2 = _ResBlock3d(rng, c2)
        self.down2 = Conv3d(rng, c2, c3, 3, 2, 1)
        self.block3 = _ResBlock3d(rng, c3)
        self.head = Dense(rng, c3, code_dim)

    def __call__(self, graph: Graph, grid) -> Tensor:
        t = _as_tensor(graph, grid)
        h = self.block1(self.stem(t))
        h = self.block2(self.down1(h))
        h = self.block3(self.down2(h))
        pooled = engine.mean(engine.reshape(h, (t.value.shape[0], self.top, -1)), axis=2)
        return self.head(pooled)


class ObserverEncoder(Module):
    """3-layer MLP over the 8 past observer log-poses (flattened to 48)."""

    def __init__(self, rng, code_dim: int = CODE_DIM):
        self.net = MLP(rng, [PAST_STEPS * 6, 128, 128, code_dim])

    def __call__(self, graph: Graph, feats) -> Tensor:
        return self.net(_as_tensor(graph, feats))


class PastEncoder(Module):
    """3-layer MLP over the agent's past root+bone log-poses, 8 x 6 (B+1) flat."""

    def __init__(self, rng, bone_count: int, code_dim: int = CODE_DIM):
        self.in_dim = PAST_STEPS * 6 * (bone_count + 1)
        self.net = MLP(rng, [self.in_dim, 128, 128, code_dim])

    def __call__(self, graph: Graph, feats) -> Tensor:
        return self.net(_as_tensor(graph, feats))


class Perception(Module):
    def __init__(self, rng, channels: int, bone_count: int, config: BehaviorConfig):
        self.scene = SceneEncoder(rng, channels, config.grid_size, config.scene_widths)
        self.observer = ObserverEncoder(rng)
        self.past = PastEncoder(rng, bone_count)

    def encode(self, graph: Graph, grid, obs, past):
        return self.scene(graph, grid), self.observer(graph, obs), self.past(graph, past)


# ---------------------------------------------------------------------------
# context views and featureization
# ---------------------------------------------------------------------------

def _broadcast_pose(x: SE3, shape) -> SE3:
    q = np.broadcast_to(x.q, tuple(shape) + (4,))
    t = np.broadcast_to(x.t, tuple(shape) + (3,))
    return SE3(q, t)


def _view(window: TrajectoryWindow, world_frame: bool) -> EgoWindow:
    """Anchor-frame view of a window, or a world-frame view with identity anchor."""
    if world_frame:
        return EgoWindow(
            window.clip_id, window.start, SE3.identity(), window.root, window.bones, window.observer
        )
    return to_ego(window)


def context_of(config: BehaviorConfig, window: TrajectoryWindow) -> EgoWindow:
    """The past-only generation context of a full window."""
    v = _view(window, config.world_frame)
    return EgoWindow(
        v.clip_id, v.start, v.anchor, v.root[:PAST_STEPS], v.bones[:PAST_STEPS], v.observer[:PAST_STEPS]
    )


def make_context(config: BehaviorConfig, clip_id: str, root: SE3, bones: SE3, observer: SE3) -> EgoWindow:
    """Generation context from the last 8 world-frame steps of a live track."""
    if root.shape != (PAST_STEPS,) or observer.shape != (PAST_STEPS,):
        raise ValueError("context needs exactly 8 past steps")
    if bones.shape[0] != PAST_STEPS:
        raise ValueError("context needs exactly 8 past steps")
    anchor = SE3.identity() if config.world_frame else root[PAST_STEPS - 1]
    inv = se3_inverse(anchor)
    b = bones.shape[1]
    return EgoWindow(
        clip_id,
        0,
        anchor,
        se3_compose(_broadcast_pose(inv, (PAST_STEPS,)), root),
        se3_compose(_broadcast_pose(inv, (PAST_STEPS, b)), bones),
        se3_compose(_broadcast_pose(inv, (PAST_STEPS,)), observer),
    )


def _grid_anchor(scene, anchor: SE3, world_frame: bool) -> SE3:
    # the world-frame variant samples a scene-fixed grid at the volume center
    if not world_frame:
        return anchor
    dims = np.asarray(scene.values.shape[:3], dtype=float)
    center = scene.origin + (dims - 1.0) * (scene.voxel_size / 2.0)
    return SE3(np.array([1.0, 0.0, 0.0, 0.0]), center)


def _context_features(world, ctx: EgoWindow, config: BehaviorConfig):
    if getattr(world, "scene", None) is None:
        raise BehaviorError("missing scene volume")
    if ctx.root.shape[0] < PAST_STEPS:
        raise ValueError("context must provide 8 past steps")
    anchor = _grid_anchor(world.scene, ctx.anchor, config.world_frame)
    grid = sample_local_volume(world.scene, anchor, config.grid_size, config.grid_spacing)
    obs = ctx.observer_features().reshape(-1)
    past = ctx.past_pose_features().reshape(-1)
    return grid.astype(np.float32), obs.astype(np.float32), past.astype(np.float32)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class BehaviorModel(Module):
    """Shared perception encoders plus one denoiser per configured stage."""

    def __init__(self, config: BehaviorConfig, channels: int, bone_count: int, seed: int = 0):
        if channels < 1 or bone_count < 1:
            raise ValueError("channels and bone_count must be positive")
        rng = np.random.default_rng([int(seed), 0])
        self.config = config
        self.channels = int(channels)
        self.bone_count = int(bone_count)
        self.perception = Perception(rng, channels, bone_count, config)
        code_dim = len(CODE_GROUPS) * CODE_DIM
        if "goal" in config.stages:
            self.net_goal = EpsilonMLP(
                rng, 3, {g: CODE_DIM for g in CODE_GROUPS}, config.goal_hidden, config.goal_depth
            )
        if "path" in config.stages:
            self.net_path = ControlUNet(
                rng, 3, 3, code_dim, config.widths, spatial_mode=config.path_spatial_mode
            )
        if "pose" in config.stages:
            self.net_pose = ControlUNet(rng, 6 * bone_count, 3, code_dim, config.widths)
        if "one_stage" in config.stages:
            self.net_one_stage = ControlUNet(rng, 6 * bone_count, 1, code_dim, config.widths)
        self.schedule = NoiseSchedule.linear()
        self.stats = None
        self.trained = False
        self.curve = None

    @property
    def pose_dim(self) -> int:
        return 6 * self.bone_count

    def net(self, stage: str):
        try:
            return getattr(self, f"net_{stage}")
        except AttributeError:
            raise BehaviorError(f"model has no {stage!r} stage") from None


def _require_trained(model: BehaviorModel) -> None:
    if not model.trained or model.stats is None:
        raise BehaviorError("untrained checkpoint")


def _normalize(x: np.ndarray, st: dict) -> np.ndarray:
    return ((x - st["mean"]) / st["std"]).astype(np.float32)


def _denormalize(x: np.ndarray, st: dict) -> np.ndarray:
    return (x * st["std"] + st["mean"]).astype(np.float32)


def _channel_stats(arr: np.ndarray, axes, shape) -> dict:
    mean = arr.mean(axis=axes, dtype=np.float64)
    std = arr.std(axis=axes, dtype=np.float64)
    # constant channels normalize to zero and denormalize back exactly
    std = np.maximum(std, 1e-2)
    return {
        "mean": mean.astype(np.float32).reshape(shape),
        "std": std.astype(np.float32).reshape(shape),
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _Dataset:
    """Normalized training arrays; local grids are sampled lazily per batch."""

    def __init__(self, world, views, config: BehaviorConfig):
        self.world = world
        self.config = config
        self.anchors = [_grid_anchor(world.scene, v.anchor, config.world_frame) for v in views]
        half = (config.grid_size - 1) / 2.0
        axis = (np.arange(config.grid_size) - half) * config.grid_spacing
        lattice = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        self._offsets = lattice.reshape(-1, 3)
        obs = np.stack([v.observer_features().reshape(-1) for v in views]).astype(np.float32)
        past = np.stack([v.past_pose_features().reshape(-1) for v in views]).astype(np.float32)
        goal = np.stack([v.goal() for v in views]).astype(np.float32)
        path = np.stack([v.path().T for v in views]).astype(np.float32)
        pose = np.stack([v.horizon_pose_features().T for v in views]).astype(np.float32)
        probe = np.linspace(0, len(views) - 1, min(len(views), 256)).astype(int)
        sample_grids = np.stack([self._raw_grid(i) for i in probe])
        self.stats = {
            "grid": _channel_stats(sample_grids, (0, 2, 3, 4), (-1, 1, 1, 1)),
            "observer": _channel_stats(obs, (0,), (-1,)),
            "past": _channel_stats(past, (0,), (-1,)),
            "goal": _channel_stats(goal, (0,), (-1,)),
            "path": _channel_stats(path, (0, 2), (-1, 1)),
            "pose": _channel_stats(pose, (0, 2), (-1, 1)),
        }
        self.obs = _normalize(obs, self.stats["observer"])
        self.past = _normalize(past, self.stats["past"])
        self.goal = _normalize(goal, self.stats["goal"])
        self.path = _normalize(path, self.stats["path"])
        self.pose = _normalize(pose, self.stats["pose"])
        self.n = len(views)
        # normalized grids are cached half precision on first use; windows
        # recur every few hundred steps and resampling dominates otherwise
        shape = (config.grid_size,) * 3
        self._grid_cache = np.zeros((self.n, world.scene.channels) + shape, dtype=np.float16)
        self._cached = np.zeros(self.n, dtype=bool)

    def _raw_grid(self, i: int) -> np.ndarray:
        vol = sample_local_volume(
            self.world.scene, self.anchors[i], self.config.grid_size, self.config.grid_spacing
        )
        return vol.astype(np.float32)

    def grids(self, sel) -> np.ndarray:
        sel = np.asarray(sel)
        missing = sel[~self._cached[sel]]
        if missing.size:
            # one scene lookup for all uncached windows; same lattice and
            # ordering as sample_local_volume
            pts = np.stack([self.anchors[i].apply(self._offsets) for i in missing])
            feats = self.world.scene.sample(pts)
            n = self.config.grid_size
            vol = np.ascontiguousarray(feats.reshape(len(missing), n, n, n, -1).transpose(0, 4, 1, 2, 3))
            self._grid_cache[missing] = _normalize(vol, self.stats["grid"]).astype(np.float16)
            self._cached[missing] = True
        return self._grid_cache[sel].astype(np.float32)


def _stage_weight(stage: str, bone_count: int) -> float:
    # per-dimension loss weights keep any one stage from dominating the
    # shared encoders
    dims = {
        "goal": 3.0,
        "path": 3.0 * HORIZON_STEPS,
        "pose": 6.0 * bone_count * HORIZON_STEPS,
        "one_stage": 6.0 * bone_count * HORIZON_STEPS,
    }
    return 1.0 / dims[stage]


def train_behavior(world, config: BehaviorConfig, clip_ids=None, seed: int = 0, callback=None) -> BehaviorModel:
    """Jointly train the encoders and every configured stage on one corpus.

    clip_ids restricts training to those clips (e.g. a train split); the
    default uses every clip in the world. Returns the trained model with
    the per-step total loss curve attached as ``model.curve``.
    """
    clips = world.clips
    if clip_ids is not None:
        wanted = set(clip_ids)
        clips = [c for c in world.clips if c.clip_id in wanted]
        missing = wanted - {c.clip_id for c in clips}
        if missing:
            raise ValueError(f"unknown clips: {sorted(missing)}")
    views = []
    for clip in clips:
        for w in slice_windows(clip, config.stride):
            views.append(_view(w, config.world_frame))
    if not views:
        raise ValueError("no training windows")

    channels = world.scene.values.shape[3]
    model = BehaviorModel(config, channels, world.bone_count, seed)
    data = _Dataset(world, views, config)
    model.stats = data.stats

    opt = AdamW(model.params(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([int(seed), 1])
    levels = model.schedule.sigmas
    spatial_of = {"path": data.goal, "pose": data.path}
    curve = []
    reference = None
    high_steps = 0
    for step in range(config.steps):
        sel = rng.integers(0, data.n, size=config.batch)
        grids = data.grids(sel)
        joint = rng.random(config.batch) < config.p_joint
        drop = {}
        for name in CODE_GROUPS + ("spatial",):
            drop[name] = joint | (rng.random(config.batch) < config.p_drop)

        g = Graph()
        t_scene, t_obs, t_past = model.perception.encode(g, grids, data.obs[sel], data.past[sel])
        codes = {"scene": t_scene, "observer": t_obs, "past": t_past}
        cat = None
        total = None
        for stage in config.stages:
            lvl = rng.integers(0, len(levels), size=config.batch)
            target = getattr(data, "pose" if stage == "one_stage" else stage)
            batch = corrupt(target[sel], levels[lvl], rng, level_index=lvl)
            if stage == "goal":
                loss = denoise_loss(
                    g, model.net_goal, batch, codes, {k: drop[k] for k in CODE_GROUPS}
                )
            else:
                if cat is None:
                    kept = [
                        engine.mul(codes[k], g.constant((~drop[k]).astype(np.float32)[:, None]))
                        for k in CODE_GROUPS
                    ]
                    cat = engine.concat(kept, axis=1)
                cond = {"codes": cat}
                stage_drop = None
                if stage != "one_stage":
                    src = spatial_of[stage]
                    spatial = src[sel]
                    if spatial.ndim == 2:  # goal point tiled across the horizon
                        spatial = np.repeat(spatial[:, :, None], HORIZON_STEPS, axis=2)
                    cond["spatial"] = spatial
                    stage_drop = {"spatial": drop["spatial"]}
                loss = denoise_loss(g, model.net(stage), batch, cond, stage_drop)
            loss = engine.mul(loss, g.constant(np.float32(_stage_weight(stage, model.bone_count))))
            total = loss if total is None else total + loss
        g.backward(total)
        opt.step()

        val = float(total.value)
        curve.append(val)
        if reference is None:
            reference = val
        if val > 10.0 * reference:
            high_steps += 1
            if high_steps >= 1000:
                raise TrainingDivergedError(f"loss {val:.3g} vs initial {reference:.3g}")
        else:
            high_steps = 0
        if callback is not None:
            callback(step, val)

    model.trained = True
    model.curve = curve
    return model


# ---------------------------------------------------------------------------
# encoding and generation
# ---------------------------------------------------------------------------

def encode_perception(model: BehaviorModel, world, context: EgoWindow) -> PerceptionCode:
    """The three condition codes for a past context; pure given frozen params."""
    grid, obs, past = _context_features(world, context, model.config)
    expected = model.perception.past.in_dim
    if past.size != expected:
        raise ValueError(f"context bone count does not match the model ({past.size} != {expected})")
    if model.stats is not None:
        grid = _normalize(grid, model.stats["grid"])
        obs = _normalize(obs, model.stats["observer"])
        past = _normalize(past, model.stats["past"])
    g = Graph()
    t_scene, t_obs, t_past = model.perception.encode(g, grid[None], obs[None], past[None])
    return PerceptionCode(t_scene.value[0], t_obs.value[0], t_past.value[0])


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call: context, guidance, sample count, optional control.

    ``goal`` and ``path`` are user-supplied spatial controls in the context
    frame; a supplied stage is passed through instead of sampled. ``disable``
    names condition groups replaced by the null code at generation time.
    """

    world: object
    past: EgoWindow
    guidance: float = 1.0
    count: int = 1
    seed: int = 0
    goal: np.ndarray = None
    path: np.ndarray = None
    disable: tuple = ()

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise ValueError("count must be a positive integer")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if not np.isfinite(self.guidance):
            raise ValueError("guidance must be finite")
        for name in self.disable:
            if name not in CODE_GROUPS:
                raise ValueError(f"unknown condition group {name!r}")
        if self.goal is not None:
            goal = np.asarray(self.goal, dtype=np.float32)
            if goal.shape != (3,) or not np.all(np.isfinite(goal)):
                raise ValueError("user goal must be a finite 3-point")
            object.__setattr__(self, "goal", goal)
        if self.path is not None:
            path = np.asarray(self.path, dtype=np.float32)
            if path.shape != (3, HORIZON_STEPS) or not np.all(np.isfinite(path)):
                raise ValueError(f"user path must be (3, {HORIZON_STEPS}) and finite")
            object.__setattr__(self, "path", path)
            if self.goal is not None and np.linalg.norm(path[:, -1] - self.goal) > 1e-6:
                raise ValueError("user path endpoint does not match the user goal")


def _stage_rng(seed: int, stage: str, k: int, extra=()) -> np.random.Generator:
    return np.random.default_rng((int(seed), _STAGE_TAG[stage], int(k)) + tuple(extra))


def _codes_for(model: BehaviorModel, req: GenerationRequest) -> dict:
    code = encode_perception(model, req.world, req.past)
    out = {}
    for name in CODE_GROUPS:
        v = getattr(code, name)
        if name in req.disable:
            v = np.zeros_like(v)
        out[name] = v[None]
    return out


def _cat_codes(codes: dict) -> np.ndarray:
    return np.concatenate([codes[name] for name in CODE_GROUPS], axis=1)


def generate_goal(model: BehaviorModel, req: GenerationRequest) -> np.ndarray:
    """K goal samples in the context frame, (K, 3); the anchor maps them to world."""
    _require_trained(model)
    if req.goal is not None:
        return np.tile(req.goal[None], (req.count, 1))
    net = model.net("goal")
    codes = _codes_for(model, req)
    out = np.empty((req.count, 3), dtype=np.float32)
    # one sample per pass: the k-th draw depends only on (seed, k), never on K
    for k in range(req.count):
        rng = _stage_rng(req.seed, "goal", k)
        x = sample(net, codes, model.schedule, req.guidance, rng, (1, 3))
        out[k] = _denormalize(x[0], model.stats["goal"])
    return out


def generate_path(model: BehaviorModel, req: GenerationRequest, goal: np.ndarray) -> np.ndarray:
    """K path samples conditioned on a goal (3,) or per-sample goals (K, 3).

    Returns (K, 3, 56) root translations in the context frame.
    """
    _require_trained(model)
    if req.path is not None:
        return np.tile(req.path[None], (req.count, 1, 1))
    net = model.net("path")
    goal = np.asarray(goal, dtype=np.float32)
    if goal.shape not in ((3,), (req.count, 3)):
        raise ValueError("goal must be (3,) or (count, 3)")
    codes = _cat_codes(_codes_for(model, req))
    out = np.empty((req.count, 3, HORIZON_STEPS), dtype=np.float32)
    for k in range(req.count):
        z = goal if goal.ndim == 1 else goal[k]
        zn = _normalize(z, model.stats["goal"])
        spatial = np.repeat(zn[:, None], HORIZON_STEPS, axis=1)[None]
        cond = {"codes": codes, "spatial": spatial}
        rng = _stage_rng(req.seed, "path", k)
        x = sample(net, cond, model.schedule, req.guidance, rng, (1, 3, HORIZON_STEPS))
        out[k] = _denormalize(x[0], model.stats["path"])
    return out


@dataclass(frozen=True)
class PoseSamples:
    """Generated body motion with its assembled transforms.

    features (K, 6 B, 56) are the raw per-bone log-pose tracks; bones and
    root are the corresponding SE3 tracks in the context frame; skinned
    (K, 56, P, 3) carries the canonical surface points through each frame.
    """

    features: np.ndarray
    bones: SE3
    root: SE3
    points: np.ndarray
    skinned: np.ndarray


def _rest_offsets(ctx: EgoWindow) -> np.ndarray:
    """Mean bone centers relative to the root over the past steps, (B, 3)."""
    inv = se3_inverse(ctx.root[:PAST_STEPS])
    b = ctx.bones.shape[1]
    local = se3_compose(_broadcast_pose(inv[:, None], (PAST_STEPS, b)), ctx.bones[:PAST_STEPS])
    return local.t.mean(axis=0)


_POINT_STENCIL = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ]
)


def _surface_points(rest: np.ndarray, scales: np.ndarray) -> np.ndarray:
    pts = rest[:, None, :] + scales[:, None, :] * _POINT_STENCIL[None]
    return pts.reshape(-1, 3)


def _assemble_pose(model: BehaviorModel, req: GenerationRequest, features: np.ndarray) -> PoseSamples:
    k, _, steps = features.shape
    rest = _rest_offsets(req.past)
    b = rest.shape[0]
    bones = EgoWindow.bones_from_pose_features(
        features.transpose(0, 2, 1).reshape(k * steps, -1)
    )
    bones = SE3(bones.q.reshape(k, steps, b, 4), bones.t.reshape(k, steps, b, 3))
    root = kabsch_fit(np.broadcast_to(rest, (k, steps, b, 3)), bones.t)
    scales = np.asarray(req.world.bone_scales, dtype=float)
    points = _surface_points(rest, scales)
    bind = SE3(np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), (b, 4)), rest)
    weights = skinning_weights(points, BoneSet(rest, bind.q, scales))
    rel = se3_compose(bones, _broadcast_pose(se3_inverse(bind), (k, steps, b)))
    p = points.shape[0]
    blended = blend_transform(
        np.broadcast_to(weights, (k, steps, p, b)),
        _broadcast_pose(SE3(rel.q[:, :, None], rel.t[:, :, None]), (k, steps, p, b)),
    )
    skinned = blended.apply(points)
    return PoseSamples(features, bones, root, points, skinned)


def generate_pose(model: BehaviorModel, req: GenerationRequest, path: np.ndarray) -> PoseSamples:
    """K pose samples conditioned on a path (3, 56) or per-sample paths (K, 3, 56)."""
    _require_trained(model)
    net = model.net("pose")
    path = np.asarray(path, dtype=np.float32)
    if path.shape not in ((3, HORIZON_STEPS), (req.count, 3, HORIZON_STEPS)):
        raise ValueError("path must be (3, 56) or (count, 3, 56)")
    codes = _cat_codes(_codes_for(model, req))
    feats = np.empty((req.count, model.pose_dim, HORIZON_STEPS), dtype=np.float32)
    for k in range(req.count):
        p = path if path.ndim == 2 else path[k]
        cond = {"codes": codes, "spatial": _normalize(p, model.stats["path"])[None]}
        rng = _stage_rng(req.seed, "pose", k)
        x = sample(net, cond, model.schedule, req.guidance, rng, (1, model.pose_dim, HORIZON_STEPS))
        feats[k] = _denormalize(x[0], model.stats["pose"])
    return _assemble_pose(model, req, feats)


def generate_one_stage(model: BehaviorModel, req: GenerationRequest) -> PoseSamples:
    """K pose samples denoised directly from the codes, skipping goal and path."""
    _require_trained(model)
    net = model.net("one_stage")
    codes = {"codes": _cat_codes(_codes_for(model, req))}
    feats = np.empty((req.count, model.pose_dim, HORIZON_STEPS), dtype=np.float32)
    for k in range(req.count):
        rng = _stage_rng(req.seed, "one_stage", k)
        x = sample(net, codes, model.schedule, req.guidance, rng, (1, model.pose_dim, HORIZON_STEPS))
        feats[k] = _denormalize(x[0], model.stats["pose"])
    return _assemble_pose(model, req, feats)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def _se3_cat(parts) -> SE3:
    return SE3(
        np.concatenate([p.q for p in parts], axis=0), np.concatenate([p.t for p in parts], axis=0)
    )


def _se3_stack(parts) -> SE3:
    return SE3(np.stack([p.q for p in parts]), np.stack([p.t for p in parts]))


def _observer_at(stream, index: int) -> SE3:
    try:
        if isinstance(stream, SE3):
            if index >= stream.shape[0]:
                raise IndexError(index)
            return stream[index]
        return stream(index)
    except (IndexError, StopIteration):
        raise BehaviorError("observer stream ended mid-rollout") from None


def _seam_corrected(root: SE3, bones: SE3) -> tuple:
    """Shift a generated segment so its first step stays within MAX_SEAM_STEP.

    The shift decays linearly to zero across the segment, so only the seam
    moves and the endpoint is untouched.
    """
    first = root.t[0]
    dist = float(np.linalg.norm(first))
    if dist <= MAX_SEAM_STEP:
        return root, bones
    delta = first * (1.0 - MAX_SEAM_STEP / dist)
    fade = 1.0 - np.arange(HORIZON_STEPS) / (HORIZON_STEPS - 1.0)
    shift = delta[None] * fade[:, None]
    return SE3(root.q, root.t - shift), SE3(bones.q, bones.t - shift[:, None, :])


def rollout(model: BehaviorModel, req: GenerationRequest, horizon_seconds: float, observer) -> list:
    """Chain 5.6 s segments into a long motion; returns world-frame windows.

    Each segment re-encodes the previous segment's final 0.8 s as context.
    ``observer`` supplies future observer poses, either an SE3 batch indexed
    by step or a callable step -> SE3; running out raises. A user goal keeps
    steering every segment; sampling uses the first stream (k = 0) only.
    """
    _require_trained(model)
    if req.path is not None:
        raise ValueError("a fixed user path cannot steer a rollout")
    steps_total = int(round(horizon_seconds * FPS))
    if steps_total <= 0 or steps_total % HORIZON_STEPS != 0 or not np.isclose(
        steps_total, horizon_seconds * FPS
    ):
        raise ValueError("horizon must be a whole number of 5.6 s segments")
    segments = steps_total // HORIZON_STEPS
    one_stage = "one_stage" in model.config.stages and "path" not in model.config.stages

    anchor0 = req.past.anchor
    b = req.past.bones.shape[1]
    root_w = se3_compose(_broadcast_pose(anchor0, (PAST_STEPS,)), req.past.root[:PAST_STEPS])
    bones_w = se3_compose(_broadcast_pose(anchor0, (PAST_STEPS, b)), req.past.bones[:PAST_STEPS])
    obs_w = se3_compose(_broadcast_pose(anchor0, (PAST_STEPS,)), req.past.observer[:PAST_STEPS])
    goal_world = anchor0.apply(req.goal) if req.goal is not None else None

    windows = []
    for seg in range(segments):
        ctx = make_context(model.config, req.past.clip_id, root_w[-PAST_STEPS:], bones_w[-PAST_STEPS:], obs_w[-PAST_STEPS:])
        sub = GenerationRequest(
            world=req.world,
            past=ctx,
            guidance=req.guidance,
            count=1,
            seed=req.seed,
            goal=None if goal_world is None else se3_inverse(ctx.anchor).apply(goal_world).astype(np.float32),
            disable=req.disable,
        )
        if one_stage:
            codes = {"codes": _cat_codes(_codes_for(model, sub))}
            rng = _stage_rng(req.seed, "one_stage", 0, (seg,))
            x = sample(
                model.net("one_stage"), codes, model.schedule, req.guidance, rng,
                (1, model.pose_dim, HORIZON_STEPS),
            )
            feats = _denormalize(x[0], model.stats["pose"])[None]
            poses = _assemble_pose(model, sub, feats)
        else:
            codes = _codes_for(model, sub)
            if sub.goal is not None:
                z = sub.goal
            else:
                rng = _stage_rng(req.seed, "goal", 0, (seg,))
                zx = sample(model.net("goal"), codes, model.schedule, req.guidance, rng, (1, 3))
                z = _denormalize(zx[0], model.stats["goal"])
            cat = _cat_codes(codes)
            zn = _normalize(z, model.stats["goal"])
            cond = {"codes": cat, "spatial": np.repeat(zn[:, None], HORIZON_STEPS, axis=1)[None]}
            rng = _stage_rng(req.seed, "path", 0, (seg,))
            px = sample(model.net("path"), cond, model.schedule, req.guidance, rng, (1, 3, HORIZON_STEPS))
            p = _denormalize(px[0], model.stats["path"])
            cond = {"codes": cat, "spatial": _normalize(p, model.stats["path"])[None]}
            rng = _stage_rng(req.seed, "pose", 0, (seg,))
            gx = sample(
                model.net("pose"), cond, model.schedule, req.guidance, rng,
                (1, model.pose_dim, HORIZON_STEPS),
            )
            feats = _denormalize(gx[0], model.stats["pose"])[None]
            poses = _assemble_pose(model, sub, feats)

        root_seg, bones_seg = _seam_corrected(poses.root[0], poses.bones[0])
        aw = ctx.anchor
        new_root = se3_compose(_broadcast_pose(aw, (HORIZON_STEPS,)), root_seg)
        new_bones = se3_compose(_broadcast_pose(aw, (HORIZON_STEPS, b)), bones_seg)
        new_obs = _se3_stack(
            [_observer_at(observer, seg * HORIZON_STEPS + i) for i in range(HORIZON_STEPS)]
        )

        windows.append(
            TrajectoryWindow(
                req.past.clip_id,
                seg * HORIZON_STEPS,
                _se3_cat([root_w[-PAST_STEPS:], new_root]),
                _se3_cat([bones_w[-PAST_STEPS:], new_bones]),
                _se3_cat([obs_w[-PAST_STEPS:], new_obs]),
            )
        )
        root_w = _se3_cat([root_w, new_root])
        bones_w = _se3_cat([bones_w, new_bones])
        obs_w = _se3_cat([obs_w, new_obs])
    return windows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _pack_stats(stats) -> dict:
    if stats is None:
        return None
    out = {}
    for key, st in stats.items():
        out[key] = {
            "mean": st["mean"].ravel().tolist(),
            "std": st["std"].ravel().tolist(),
            "shape": list(st["mean"].shape),
        }
    return out


def _unpack_stats(packed) -> dict:
    if packed is None:
        return None
    out = {}
    for key, st in packed.items():
        shape = tuple(st["shape"])
        out[key] = {
            "mean": np.asarray(st["mean"], dtype=np.float32).reshape(shape),
            "std": np.asarray(st["std"], dtype=np.float32).reshape(shape),
        }
    return out


def save_model(model: BehaviorModel, path: str) -> None:
    meta = {
        "kind": "behavior-model",
        "config": model.config.to_dict(),
        "channels": model.channels,
        "boneCount": model.bone_count,
        "trained": bool(model.trained),
        "stats": _pack_stats(model.stats),
    }
    save_checkpoint(path, [(n, p.value) for n, p in model.named_params()], meta)


def load_model(path: str) -> BehaviorModel:
    meta, values = load_checkpoint(path)
    if meta.get("kind") != "behavior-model":
        raise BehaviorError(f"{path} is not a behavior model checkpoint")
    config = BehaviorConfig.from_dict(meta["config"])
    model = BehaviorModel(config, meta["channels"], meta["boneCount"])
    for name, param in model.named_params():
        if name not in values:
            raise BehaviorError(f"checkpoint missing parameter {name}")
        v = values[name]
        if tuple(v.shape) != tuple(param.value.shape):
            raise BehaviorError(f"checkpoint shape mismatch for {name}")
        param.value[...] = v
    model.stats = _unpack_stats(meta["stats"])
    model.trained = bool(meta["trained"])
    return model
