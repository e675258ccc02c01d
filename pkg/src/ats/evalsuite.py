"""Sampling-based evaluation: displacement metrics, baselines, and reports.

The metrics score a K-sample set against ground truth by its best member,
the way the benchmark tables do. Two reference generators calibrate the
numbers: a histogram prior over goal locations and a Gaussian regressor
trained on the same conditioning as the denoisers. ``eval_model`` runs any
of them over a held-out world with the same K-samples-by-L-trials protocol
and returns one report row per call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .behavior import (
    CODE_DIM,
    CODE_GROUPS,
    BehaviorConfig,
    BehaviorModel,
    GenerationRequest,
    _assemble_pose,
    _context_features,
    _Dataset,
    _denormalize,
    _normalize,
    _view,
    Perception,
    generate_goal,
    generate_one_stage,
    generate_path,
    generate_pose,
)
from .geometry import SE3, quat_conj, quat_mul, rotation_geodesic
from .nn import AdamW, Dense, Graph, Module, engine
from .worldstate import HORIZON_STEPS, OCCUPANCY_CHANNEL, PAST_STEPS, slice_windows


class EvalError(ValueError):
    """Raised for empty sample sets, shape mismatches, or empty splits."""


# ---------------------------------------------------------------------------
# displacement metrics
# ---------------------------------------------------------------------------

def min_de(samples: np.ndarray, gt: np.ndarray) -> float:
    """Distance from ``gt`` to the closest of K sampled points."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 3 or gt.shape != (3,):
        raise EvalError("samples must be (K, 3) and gt (3,)")
    if samples.shape[0] < 1:
        raise EvalError("empty sample set")
    return float(np.linalg.norm(samples - gt, axis=1).min())


def min_ade_path(samples: np.ndarray, gt: np.ndarray) -> float:
    """Smallest per-step-averaged L2 error of K sampled paths, time major."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if samples.ndim != 3 or gt.ndim != 2 or samples.shape[2] != 3 or gt.shape[1] != 3:
        raise EvalError("samples must be (K, steps, 3) and gt (steps, 3)")
    if samples.shape[0] < 1:
        raise EvalError("empty sample set")
    if samples.shape[1] != gt.shape[0]:
        raise EvalError("path length mismatch")
    per = np.linalg.norm(samples - gt[None], axis=2).mean(axis=1)
    return float(per.min())


def min_ade_rot(sample_root: SE3, sample_bones: SE3, gt_root: SE3, gt_bones: SE3) -> tuple:
    """Best-of-K rotation errors: (root orientation, bone-relative-to-root).

    Orientation is the per-step geodesic distance between sampled and true
    root rotations, averaged over steps, minimized over K. The second
    number does the same for every bone rotation expressed relative to its
    own root, averaged over steps and bones. The two minima are taken
    independently.
    """
    k = sample_root.shape[0] if sample_root.shape else 0
    steps = gt_root.shape[0] if gt_root.shape else 0
    if k < 1:
        raise EvalError("empty sample set")
    if sample_root.shape != (k, steps) or gt_bones.shape[:1] != (steps,):
        raise EvalError("pose sequence shapes do not match")
    if sample_bones.shape != (k, steps) + gt_bones.shape[1:]:
        raise EvalError("pose sequence shapes do not match")
    ori = rotation_geodesic(sample_root.q, gt_root.q[None]).mean(axis=1)
    rel_s = quat_mul(quat_conj(sample_root.q)[:, :, None], sample_bones.q)
    rel_g = quat_mul(quat_conj(gt_root.q)[:, None], gt_bones.q)
    joint = rotation_geodesic(rel_s, rel_g[None]).mean(axis=(1, 2))
    return float(ori.min()), float(joint.min())


def wall_penetration_rate(scene, anchor: SE3, paths: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of sampled paths that cross into occupied voxels.

    ``paths`` are (K, 3, steps) in the frame mapped to world by ``anchor``;
    a path counts as penetrating if any step lands where the occupancy
    channel exceeds the threshold.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim != 3 or paths.shape[1] != 3:
        raise EvalError("paths must be (K, 3, steps)")
    k, _, steps = paths.shape
    pts = anchor.apply(paths.transpose(0, 2, 1).reshape(-1, 3))
    occ = scene.sample(pts)[:, OCCUPANCY_CHANNEL].reshape(k, steps)
    return float((occ > threshold).any(axis=1).mean())


# ---------------------------------------------------------------------------
# location prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocationPrior:
    """Histogram over goal offsets, normalized to bin probabilities."""

    probs: np.ndarray
    bin_size: float
    extent: float

    def __post_init__(self):
        total = float(self.probs.sum())
        if not np.isclose(total, 1.0, atol=1e-6):
            raise EvalError("histogram probabilities must sum to 1")


def fit_location_prior(corpus, bin_size: float = 0.25, extent: float = 4.0) -> LocationPrior:
    """Histogram of goal offsets, from a world or an (N, 3) array.

    Bins cover a cube of half-width ``extent``; goals outside land in the
    boundary bins so every observation is counted.
    """
    if hasattr(corpus, "clips"):
        goals = [
            _view(w, False).goal() for clip in corpus.clips for w in slice_windows(clip)
        ]
        goals = np.stack(goals) if goals else np.zeros((0, 3))
    else:
        goals = np.asarray(corpus, dtype=float).reshape(-1, 3)
    if goals.shape[0] == 0:
        raise EvalError("no goals to fit")
    n = int(round(2.0 * extent / bin_size))
    idx = np.floor((goals + extent) / bin_size).astype(int)
    idx = np.clip(idx, 0, n - 1)
    counts = np.zeros((n, n, n), dtype=np.float64)
    np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
    return LocationPrior(counts / counts.sum(), float(bin_size), float(extent))


def sample_location_prior(prior: LocationPrior, count: int, seed=0) -> np.ndarray:
    """K goal draws: a probability-weighted bin, then uniform jitter in it."""
    if count < 1:
        raise EvalError("count must be positive")
    rng = np.random.default_rng(seed)
    flat = prior.probs.ravel()
    pick = rng.choice(flat.size, size=count, p=flat)
    ijk = np.stack(np.unravel_index(pick, prior.probs.shape), axis=1)
    centers = -prior.extent + (ijk + 0.5) * prior.bin_size
    jitter = rng.uniform(-0.5, 0.5, size=(count, 3)) * prior.bin_size
    return (centers + jitter).astype(np.float32)


# ---------------------------------------------------------------------------
# gaussian baseline
# ---------------------------------------------------------------------------

VAR_FLOOR = 1e-4


def gaussian_nll(mean, var, target) -> "engine.Tensor":
    """Batch-mean diagonal-Gaussian NLL, summed over dims.

    Drops the 0.5 log 2 pi per-dim constant; add it back when comparing
    against entropies.
    """
    nll = engine.sum_(engine.log(var) + engine.square(mean - target) / var, axis=1)
    return engine.mean(nll) * 0.5


class _GaussianHead(Module):
    """Mean and floored diagonal variance over a flat target."""

    def __init__(self, rng, in_dim: int, out_dim: int, hidden: int):
        self.h1 = Dense(rng, in_dim, hidden)
        self.h2 = Dense(rng, hidden, hidden)
        self.mean = Dense(rng, hidden, out_dim, zero_init=True)
        self.raw = Dense(rng, hidden, out_dim, zero_init=True)

    def __call__(self, feats):
        h = engine.silu(self.h1(feats))
        h = engine.silu(self.h2(h))
        return self.mean(h), engine.softplus(self.raw(h)) + VAR_FLOOR


_GAUSS_TAG = {"goal": 21, "path": 22, "pose": 23}


class GaussianBaseline(Module):
    """Unimodal reference: the same conditioning, a Gaussian instead of a
    denoiser.

    Each stage regresses the mean and diagonal variance of its normalized
    target given the perception codes plus the upstream control (goal for
    paths, path for poses); sampling is mean plus scaled normal draws. A
    single Gaussian averages across behavior modes, which is exactly the
    failure the comparison is meant to expose.
    """

    def __init__(self, config: BehaviorConfig, channels: int, bone_count: int, seed: int = 0):
        rng = np.random.default_rng([int(seed), 7])
        self.config = config
        self.channels = int(channels)
        self.bone_count = int(bone_count)
        self.perception = Perception(rng, channels, bone_count, config)
        code_dim = len(CODE_GROUPS) * CODE_DIM
        hidden = config.goal_hidden
        path_dim = 3 * HORIZON_STEPS
        pose_dim = 6 * bone_count * HORIZON_STEPS
        self.head_goal = _GaussianHead(rng, code_dim, 3, hidden)
        self.head_path = _GaussianHead(rng, code_dim + 3, path_dim, hidden)
        self.head_pose = _GaussianHead(rng, code_dim + path_dim, pose_dim, hidden)
        self.stats = None
        self.trained = False
        self.curve = None

    def _codes(self, req: GenerationRequest) -> np.ndarray:
        if not self.trained or self.stats is None:
            raise EvalError("untrained baseline")
        grid, obs, past = _context_features(req.world, req.past, self.config)
        if past.size != self.perception.past.in_dim:
            raise ValueError("context bone count does not match the model")
        grid = _normalize(grid, self.stats["grid"])
        obs = _normalize(obs, self.stats["observer"])
        past = _normalize(past, self.stats["past"])
        g = Graph()
        parts = dict(zip(CODE_GROUPS, self.perception.encode(g, grid[None], obs[None], past[None])))
        flat = [
            np.zeros_like(parts[name].value) if name in req.disable else parts[name].value
            for name in CODE_GROUPS
        ]
        return np.concatenate(flat, axis=1)

    def _head(self, stage: str, feats: np.ndarray):
        g = Graph()
        mean, var = getattr(self, f"head_{stage}")(g.constant(feats.astype(np.float32)))
        return mean.value, np.sqrt(var.value)

    def predict_goal(self, req: GenerationRequest) -> tuple:
        """Denormalized goal mean and per-axis std for one context."""
        mean, std = self._head("goal", self._codes(req))
        scale = self.stats["goal"]["std"]
        return _denormalize(mean[0], self.stats["goal"]), std[0] * scale

    def sample_goal(self, req: GenerationRequest) -> np.ndarray:
        mean, std = self._head("goal", self._codes(req))
        out = np.empty((req.count, 3), dtype=np.float32)
        for k in range(req.count):
            rng = np.random.default_rng((int(req.seed), _GAUSS_TAG["goal"], k))
            out[k] = mean[0] + std[0] * rng.standard_normal(3)
        return _denormalize(out, self.stats["goal"])

    def sample_path(self, req: GenerationRequest, goal: np.ndarray) -> np.ndarray:
        goal = np.asarray(goal, dtype=np.float32)
        if goal.shape not in ((3,), (req.count, 3)):
            raise ValueError("goal must be (3,) or (count, 3)")
        goals = np.broadcast_to(goal, (req.count, 3))
        codes = self._codes(req)
        zn = _normalize(goals, self.stats["goal"])
        feats = np.concatenate([np.repeat(codes, req.count, axis=0), zn], axis=1)
        mean, std = self._head("path", feats)
        out = np.empty_like(mean)
        for k in range(req.count):
            rng = np.random.default_rng((int(req.seed), _GAUSS_TAG["path"], k))
            out[k] = mean[k] + std[k] * rng.standard_normal(mean.shape[1])
        flat = _denormalize(
            out.reshape(req.count, 3, HORIZON_STEPS), self.stats["path"]
        )
        return flat

    def sample_pose(self, req: GenerationRequest, path: np.ndarray):
        path = np.asarray(path, dtype=np.float32)
        if path.shape not in ((3, HORIZON_STEPS), (req.count, 3, HORIZON_STEPS)):
            raise ValueError(f"path must be (3, {HORIZON_STEPS}) or (count, 3, {HORIZON_STEPS})")
        paths = np.broadcast_to(path, (req.count, 3, HORIZON_STEPS))
        codes = self._codes(req)
        pn = _normalize(paths, self.stats["path"]).reshape(req.count, -1)
        feats = np.concatenate([np.repeat(codes, req.count, axis=0), pn], axis=1)
        mean, std = self._head("pose", feats)
        out = np.empty_like(mean)
        for k in range(req.count):
            rng = np.random.default_rng((int(req.seed), _GAUSS_TAG["pose"], k))
            out[k] = mean[k] + std[k] * rng.standard_normal(mean.shape[1])
        dim = 6 * self.bone_count
        feats56 = _denormalize(out.reshape(req.count, dim, HORIZON_STEPS), self.stats["pose"])
        return _assemble_pose(None, req, feats56)


def train_gaussian_baseline(
    world, config: BehaviorConfig, clip_ids=None, seed: int = 0, callback=None
) -> GaussianBaseline:
    """Fit the Gaussian reference by negative log-likelihood.

    Mirrors the denoiser training protocol: same windows, same normalized
    targets, same perception encoders, jointly trained from scratch.
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
    base = GaussianBaseline(config, channels, world.bone_count, seed)
    data = _Dataset(world, views, config)
    base.stats = data.stats
    flat_path = data.path.reshape(data.n, -1)
    flat_pose = data.pose.reshape(data.n, -1)
    targets = {"goal": data.goal, "path": flat_path, "pose": flat_pose}
    conds = {"goal": None, "path": data.goal, "pose": flat_path}

    opt = AdamW(base.params(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([int(seed), 8])
    curve = []
    for step in range(config.steps):
        sel = rng.integers(0, data.n, size=config.batch)
        g = Graph()
        enc = base.perception.encode(g, data.grids(sel), data.obs[sel], data.past[sel])
        cat = engine.concat(list(enc), axis=1)
        total = None
        for stage, target in targets.items():
            feats = cat
            if conds[stage] is not None:
                feats = engine.concat([cat, g.constant(conds[stage][sel])], axis=1)
            mean, var = getattr(base, f"head_{stage}")(feats)
            # per-dim NLL so the pose head does not drown the shared encoders
            loss = gaussian_nll(mean, var, target[sel]) * (1.0 / target.shape[1])
            total = loss if total is None else total + loss
        g.backward(total)
        opt.step()
        curve.append(float(total.value))
        if callback is not None:
            callback(step, curve[-1])
    base.trained = True
    base.curve = curve
    return base


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_NOTE = (
    "orientation is the root-only geodesic; joint angles are bone rotations "
    "relative to the root, averaged over bones"
)

_METRIC_ORDER = (
    "goal_de",
    "path_ade",
    "orientation",
    "joint_angles",
    "e2e_path_ade",
    "e2e_orientation",
    "e2e_joint_angles",
)


@dataclass(frozen=True)
class MetricRow:
    """One generator's metrics: name -> (mean, std) over trials."""

    label: str
    metrics: dict


@dataclass(frozen=True)
class MetricReport:
    """K/L protocol results plus every per-trial, per-window number."""

    k: int
    trials: int
    rows: tuple
    per_window: dict
    note: str = _NOTE

    def row(self, label: str) -> MetricRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def table(self) -> str:
        names = [m for m in _METRIC_ORDER if any(m in r.metrics for r in self.rows)]
        width = max([len(r.label) for r in self.rows] + [5])
        head = f"K={self.k} L={self.trials} | {self.note}"
        lines = [head, " ".join([f"{'row':<{width}}"] + [f"{n:>17}" for n in names])]
        for r in self.rows:
            cells = [f"{r.label:<{width}}"]
            for n in names:
                if n in r.metrics:
                    mean, std = r.metrics[n]
                    cells.append(f"{mean:>9.4f}±{std:.4f}")
                else:
                    cells.append(f"{'-':>17}")
            lines.append(" ".join(cells))
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "trials": self.trials,
            "note": self.note,
            "rows": [
                {"label": r.label, "metrics": {n: list(v) for n, v in r.metrics.items()}}
                for r in self.rows
            ],
            "per_window": self.per_window,
        }
        return json.dumps(payload, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())


def combine_reports(reports) -> MetricReport:
    """Merge single-model reports into one table; labels must be unique."""
    reports = list(reports)
    if not reports:
        raise EvalError("nothing to combine")
    first = reports[0]
    rows, per = [], {}
    for rep in reports:
        if (rep.k, rep.trials) != (first.k, first.trials):
            raise EvalError("reports use different K or trial counts")
        for row in rep.rows:
            if row.label in per:
                raise EvalError(f"duplicate row label {row.label!r}")
            rows.append(row)
        per.update(rep.per_window)
    return MetricReport(first.k, first.trials, tuple(rows), per, first.note)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

class _DiffusionRow:
    label = "diffusion"

    def __init__(self, model: BehaviorModel, guidance: float, disable: tuple):
        self.model = model
        self.guidance = guidance
        self.disable = tuple(disable)
        self.world_frame = model.config.world_frame
        stages = model.config.stages
        self.one_stage = "one_stage" in stages and "path" not in stages
        self.supported = set()
        if "goal" in stages:
            self.supported.add("goal_de")
        if "path" in stages:
            self.supported.add("path_ade")
        if "pose" in stages:
            self.supported.update(("orientation", "joint_angles"))
        if {"goal", "path"} <= set(stages):
            self.supported.add("e2e_path_ade")
            if "pose" in stages:
                self.supported.update(("e2e_orientation", "e2e_joint_angles"))
        if self.one_stage:
            self.supported.update(("e2e_path_ade", "e2e_orientation", "e2e_joint_angles"))

    def request(self, world, view, k, seed):
        return GenerationRequest(
            world, view, guidance=self.guidance, count=k, seed=seed, disable=self.disable
        )

    def goal(self, req, wi):
        return generate_goal(self.model, req)

    def path(self, req, goal):
        return generate_path(self.model, req, goal)

    def pose(self, req, path):
        return generate_pose(self.model, req, path)

    def end_to_end(self, req, with_pose):
        if self.one_stage:
            ps = generate_one_stage(self.model, req)
            return ps.root.t.transpose(0, 2, 1), ps
        goals = generate_goal(self.model, req)
        paths = generate_path(self.model, req, goals)
        ps = self.pose(req, paths) if with_pose else None
        return paths, ps


class _GaussianRow(_DiffusionRow):
    label = "gaussian"

    def __init__(self, base: GaussianBaseline, guidance: float, disable: tuple):
        self.model = base
        self.guidance = guidance
        self.disable = tuple(disable)
        self.world_frame = base.config.world_frame
        self.one_stage = False
        self.supported = {
            "goal_de", "path_ade", "orientation", "joint_angles",
            "e2e_path_ade", "e2e_orientation", "e2e_joint_angles",
        }

    def goal(self, req, wi):
        return self.model.sample_goal(req)

    def path(self, req, goal):
        return self.model.sample_path(req, goal)

    def pose(self, req, path):
        return self.model.sample_pose(req, path)

    def end_to_end(self, req, with_pose):
        goals = self.model.sample_goal(req)
        paths = self.model.sample_path(req, goals)
        ps = self.model.sample_pose(req, paths) if with_pose else None
        return paths, ps


class _PriorRow:
    label = "location_prior"
    world_frame = False
    supported = {"goal_de"}

    def __init__(self, prior: LocationPrior):
        self.prior = prior

    def request(self, world, view, k, seed):
        return (k, seed)

    def goal(self, req, wi):
        k, seed = req
        return sample_location_prior(self.prior, k, seed=(int(seed), 31, wi))


class GroundTruthSampler:
    """Row that answers every query with the window's own future.

    Every metric it produces is exactly zero, so a nonzero row pins a bug
    on the evaluation harness rather than on a generator.
    """

    label = "oracle"
    world_frame = False
    supported = frozenset(_METRIC_ORDER)

    def request(self, world, view, k, seed):
        return (view, int(k))

    def goal(self, req, wi):
        view, k = req
        return np.repeat(view.goal()[None], k, axis=0)

    def path(self, req, goal):
        view, k = req
        truth = np.ascontiguousarray(view.path().T)
        return np.repeat(truth[None], k, axis=0)

    def pose(self, req, path):
        view, k = req
        root = view.root[PAST_STEPS:]
        bones = view.bones[PAST_STEPS:]
        return _TiledPose(
            SE3(_tile(root.q, k), _tile(root.t, k)),
            SE3(_tile(bones.q, k), _tile(bones.t, k)),
        )

    def end_to_end(self, req, with_pose):
        return self.path(req, None), (self.pose(req, None) if with_pose else None)


@dataclass(frozen=True)
class _TiledPose:
    root: SE3
    bones: SE3


def _tile(x: np.ndarray, k: int) -> np.ndarray:
    return np.broadcast_to(x, (k,) + x.shape).copy()


def _sampler_for(model, guidance, disable):
    if isinstance(model, BehaviorModel):
        return _DiffusionRow(model, guidance, disable)
    if isinstance(model, GaussianBaseline):
        return _GaussianRow(model, guidance, disable)
    if isinstance(model, LocationPrior):
        return _PriorRow(model)
    # anything exposing the row protocol evaluates as-is (oracles, stubs)
    if hasattr(model, "supported") and hasattr(model, "request"):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def eval_model(
    model,
    world,
    k: int = 16,
    trials: int = 12,
    seeds=None,
    clip_ids=None,
    stride: int = 4,
    metrics=None,
    guidance: float = 1.0,
    disable=(),
    label: str = None,
) -> MetricReport:
    """Score one generator over held-out windows with K samples, L trials.

    Trials share the test windows and differ only in sampling seeds; the
    row reports each metric's mean and deviation over the L per-trial
    means. Path metrics condition on the true goal and pose metrics on the
    true path; the e2e variants chain the generator's own stages instead.
    """
    sampler = _sampler_for(model, guidance, disable)
    if seeds is None:
        seeds = tuple(range(trials))
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) != trials:
        raise EvalError("need exactly one seed per trial")
    clips = world.clips
    if clip_ids is not None:
        wanted = set(clip_ids)
        clips = [c for c in world.clips if c.clip_id in wanted]
    views = [_view(w, sampler.world_frame) for c in clips for w in slice_windows(c, stride)]
    if not views:
        raise EvalError("empty test split")
    if metrics is None:
        metrics = tuple(m for m in _METRIC_ORDER if m in sampler.supported)
    else:
        metrics = tuple(metrics)
        bad = [m for m in metrics if m not in _METRIC_ORDER]
        if bad:
            raise EvalError(f"unknown metrics: {bad}")
        unsupported = [m for m in metrics if m not in sampler.supported]
        if unsupported:
            raise EvalError(f"{sampler.label} row cannot produce: {unsupported}")

    gt = []
    for view in views:
        gt.append(
            {
                "goal": view.goal(),
                "path": view.path(),
                "root": view.root[PAST_STEPS:],
                "bones": view.bones[PAST_STEPS:],
            }
        )
    need_pose_gt = {"orientation", "joint_angles"} & set(metrics)
    need_e2e = {"e2e_path_ade", "e2e_orientation", "e2e_joint_angles"} & set(metrics)
    need_e2e_pose = {"e2e_orientation", "e2e_joint_angles"} & set(metrics)

    per = {m: np.zeros((trials, len(views))) for m in metrics}
    for ti, seed in enumerate(seeds):
        for wi, view in enumerate(views):
            req = sampler.request(world, view, k, seed)
            ref = gt[wi]
            if "goal_de" in per:
                per["goal_de"][ti, wi] = min_de(sampler.goal(req, wi), ref["goal"])
            if "path_ade" in per:
                paths = sampler.path(req, ref["goal"])
                per["path_ade"][ti, wi] = min_ade_path(paths.transpose(0, 2, 1), ref["path"])
            if need_pose_gt:
                ps = sampler.pose(req, np.ascontiguousarray(ref["path"].T))
                ori, joint = min_ade_rot(ps.root, ps.bones, ref["root"], ref["bones"])
                if "orientation" in per:
                    per["orientation"][ti, wi] = ori
                if "joint_angles" in per:
                    per["joint_angles"][ti, wi] = joint
            if need_e2e:
                paths, ps = sampler.end_to_end(req, bool(need_e2e_pose))
                if "e2e_path_ade" in per:
                    per["e2e_path_ade"][ti, wi] = min_ade_path(
                        paths.transpose(0, 2, 1), ref["path"]
                    )
                if ps is not None:
                    ori, joint = min_ade_rot(ps.root, ps.bones, ref["root"], ref["bones"])
                    if "e2e_orientation" in per:
                        per["e2e_orientation"][ti, wi] = ori
                    if "e2e_joint_angles" in per:
                        per["e2e_joint_angles"][ti, wi] = joint

    name = label if label is not None else sampler.label
    summary = {}
    for m in metrics:
        means = per[m].mean(axis=1)
        summary[m] = (float(means.mean()), float(means.std()))
    row = MetricRow(name, summary)
    per_w = {name: {m: per[m].tolist() for m in metrics}}
    return MetricReport(int(k), int(trials), (row,), per_w)


def split_clips(world, seed: int = 0) -> tuple:
    """Deterministic train/test clip ids, roughly one held out per 23."""
    ids = [c.clip_id for c in world.clips]
    if len(ids) < 2:
        raise EvalError("need at least two clips to split")
    rng = np.random.default_rng([int(seed), 23])
    order = rng.permutation(len(ids))
    n_test = max(1, round(len(ids) / 23))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test
