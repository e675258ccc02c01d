"""Score-based denoising: schedule, corruption, guidance, sampler, trainer, nets.

The formulation is variance-exploding with raw-noise prediction: a clean
sample x is corrupted to x + eps with eps ~ N(0, sigma^2 I), and networks
predict eps itself. Sampling runs the deterministic update

    x_hat0 = x - eps_hat
    x      = x_hat0 + (sigma_next / sigma) * (x - x_hat0)

down a descending 50-level linear schedule, with sigma after the last level
taken as 0. Classifier-free guidance mixes a conditional and an
unconditional prediction; the null condition is the all-zero code, and the
unconditional branch is always computed by zeroing condition inputs rather
than skipping layers, so both branches share every bias and normalization.

Networks implement a small protocol:

    condition_groups() -> list of group names
    eps(graph, x, sigma, cond, drop) -> Tensor like x

where ``cond`` maps group name to an array or Tensor (Tensors let encoder
gradients flow through) and ``drop`` selects rows whose condition is
replaced by the null code: None (keep all), "all", or {group: bool (N,)}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv1d, ConvTranspose1d, Dense, Graph, GroupNorm, Module
from .nn import engine
from .nn.engine import Tensor
from .nn.optim import AdamW

SIGMA_EMB_DIM = 64


class SamplingError(RuntimeError):
    """Non-finite value produced while denoising."""


class TrainingDivergedError(RuntimeError):
    """Loss stayed above 10x its initial value for 1000 consecutive steps."""


# ---------------------------------------------------------------------------
# schedule and corruption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Ascending noise levels sigma_1 < ... < sigma_n."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or len(s) < 1 or s[0] <= 0 or np.any(np.diff(s) <= 0):
            raise ValueError("schedule must be strictly increasing and positive")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def linear(cls, levels: int = 50, sigma_min: float = 0.01, sigma_max: float = 2.0) -> "NoiseSchedule":
        return cls(np.linspace(sigma_min, sigma_max, levels))

    def __len__(self):
        return len(self.sigmas)


def sigma_embedding(sigma: np.ndarray, dim: int = SIGMA_EMB_DIM) -> np.ndarray:
    """Sinusoidal features of log sigma, shape (N, dim)."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(0.5), np.log(64.0), half))
    phase = np.log(sigma)[:, None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1).astype(np.float32)


@dataclass(frozen=True)
class CorruptedSample:
    clean: np.ndarray
    noise: np.ndarray
    corrupted: np.ndarray
    sigma: np.ndarray  # (N,)
    level_index: np.ndarray  # (N,), -1 when sigma is off-schedule


def corrupt(x: np.ndarray, sigma, rng: np.random.Generator, level_index=None) -> CorruptedSample:
    """Add N(0, sigma^2 I) noise; sigma is a scalar or per-sample (N,)."""
    x = np.asarray(x, dtype=np.float32)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    shaped = sig.reshape((-1,) + (1,) * (x.ndim - 1))
    noise = (rng.standard_normal(x.shape) * shaped).astype(np.float32)
    corrupted = x + noise
    # store the representable difference so corrupted - clean == noise exactly
    noise = corrupted - x
    idx = np.full(x.shape[0], -1) if level_index is None else np.asarray(level_index)
    return CorruptedSample(x, noise, corrupted, sig, idx)


# ---------------------------------------------------------------------------
# loss and guidance
# ---------------------------------------------------------------------------

def denoise_loss(graph: Graph, model, batch: CorruptedSample, cond=None, drop=None) -> Tensor:
    """Mean over the batch of the summed squared noise-prediction error."""
    if batch.clean.shape[0] == 0:
        raise ValueError("empty batch")
    eps_hat = model.eps(graph, batch.corrupted, batch.sigma, cond, drop)
    if not np.all(np.isfinite(eps_hat.value)):
        raise SamplingError("non-finite network output in loss")
    diff = eps_hat - graph.constant(batch.noise)
    per_sample = engine.sum_(engine.reshape(engine.square(diff), (batch.clean.shape[0], -1)), axis=1)
    return engine.mean(per_sample)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """eps_uncond + s (eps_cond - eps_uncond); s=0 and s=1 return their input unchanged."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if s == 0.0:
        return eps_uncond
    if s == 1.0:
        return eps_cond
    return eps_uncond + np.float32(s) * (eps_cond - eps_uncond)


def guided_eps(model, x: np.ndarray, sigma: np.ndarray, cond, s: float) -> np.ndarray:
    """One guided prediction; skips whichever branch the scale makes irrelevant."""
    if cond is None or s == 0.0:
        return model.eps(Graph(), x, sigma, cond, "all").value
    eps_c = model.eps(Graph(), x, sigma, cond, None).value
    if s == 1.0:
        return eps_c
    eps_u = model.eps(Graph(), x, sigma, cond, "all").value
    return cfg_combine(eps_c, eps_u, s)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def denoise_from(model, cond, schedule: NoiseSchedule, s: float, x: np.ndarray) -> np.ndarray:
    """Deterministically denoise x assumed to sit at the top noise level."""
    x = np.asarray(x, dtype=np.float32)
    desc = schedule.sigmas[::-1]
    for i, sk in enumerate(desc):
        nxt = desc[i + 1] if i + 1 < len(desc) else 0.0
        sig = np.full(x.shape[0], sk, dtype=np.float64)
        eps_hat = guided_eps(model, x, sig, cond, s)
        x_hat0 = x - eps_hat
        x = x_hat0 + np.float32(nxt / sk) * (x - x_hat0)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sample at level {len(desc) - 1 - i}")
    return x


def sample(model, cond, schedule: NoiseSchedule, s: float, rng: np.random.Generator, shape) -> np.ndarray:
    """Draw x ~ N(0, sigma_max^2 I) and denoise it; deterministic given rng state."""
    x = (rng.standard_normal(shape) * schedule.sigmas[-1]).astype(np.float32)
    return denoise_from(model, cond, schedule, s, x)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    p_drop: float = 0.1
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.linear)


def train(model, x: np.ndarray, cond, config: TrainConfig, rng: np.random.Generator, callback=None):
    """Noise-prediction training with per-group condition dropout.

    Returns the per-step loss curve. cond maps group names to full-dataset
    arrays aligned with x along axis 0 (or is None for unconditional data).
    """
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    opt = AdamW(model.params(), lr=config.lr, weight_decay=config.weight_decay)
    groups = model.condition_groups() if cond is not None else []
    levels = config.schedule.sigmas
    curve = []
    reference = None
    high_steps = 0
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch)
        lvl = rng.integers(0, len(levels), size=config.batch)
        batch = corrupt(x[idx], levels[lvl], rng, level_index=lvl)
        cond_batch = {name: cond[name][idx] for name in groups} if groups else None
        drop = {name: rng.random(config.batch) < config.p_drop for name in groups} or None
        g = Graph()
        loss = denoise_loss(g, model, batch, cond_batch, drop)
        g.backward(loss)
        opt.step()
        val = float(loss.value)
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
    return curve


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _drop_mask(drop, group: str, n: int):
    if drop is None:
        return None
    if drop == "all":
        return np.ones(n, dtype=bool)
    return drop.get(group)


def _conditioned(graph: Graph, value, group: str, drop) -> Tensor:
    """Wrap a condition value, zeroing dropped rows (null condition = zeros)."""
    t = value if isinstance(value, Tensor) else graph.constant(np.asarray(value, dtype=np.float32))
    mask = _drop_mask(drop, group, t.value.shape[0])
    if mask is None or not np.any(mask):
        return t
    keep = (~mask).astype(np.float32).reshape((-1,) + (1,) * (t.value.ndim - 1))
    return engine.mul(t, graph.constant(keep))


class EpsilonMLP(Module):
    """Dense noise predictor: x and the sigma embedding feed a SiLU stack.

    Condition groups enter as zero-initialized projections added to the
    first hidden pre-activation, which is the same map as concatenating them
    to the input with zero-initialized weight rows: at initialization (and
    whenever a group is dropped) the network reduces exactly to its
    unconditional form.
    """

    def __init__(self, rng, x_dim: int, cond_dims: dict | None = None, hidden: int = 128, depth: int = 6):
        cond_dims = dict(cond_dims or {})
        self.inp = Dense(rng, x_dim + SIGMA_EMB_DIM, hidden)
        self.group_names = sorted(cond_dims)
        self.cond_proj = [Dense(rng, cond_dims[name], hidden, zero_init=True) for name in self.group_names]
        self.body = [Dense(rng, hidden, hidden) for _ in range(max(depth - 2, 0))]
        self.out = Dense(rng, hidden, x_dim)

    def condition_groups(self):
        return list(self.group_names)

    def eps(self, graph: Graph, x: np.ndarray, sigma: np.ndarray, cond=None, drop=None) -> Tensor:
        feats = np.concatenate([np.asarray(x, dtype=np.float32), sigma_embedding(sigma)], axis=1)
        h = self.inp(graph.constant(feats))
        for name, proj in zip(self.group_names, self.cond_proj):
            value = cond[name] if cond is not None else np.zeros((x.shape[0], proj.w.value.shape[0]), np.float32)
            h = h + proj(_conditioned(graph, value, name, drop))
        h = engine.silu(h)
        for layer in self.body:
            h = engine.silu(layer(h))
        return self.out(h)


class ResBlock1d(Module):
    """Pre-norm residual conv block with zero-initialized modulation add."""

    def __init__(self, rng, cin: int, cout: int, mod_dim: int, groups: int = 8):
        self.n1 = GroupNorm(cin, groups)
        self.conv1 = Conv1d(rng, cin, cout, 3, 1, 1)
        self.mod = Dense(rng, mod_dim, cout, zero_init=True)
        self.n2 = GroupNorm(cout, groups)
        self.conv2 = Conv1d(rng, cout, cout, 3, 1, 1)
        self.skip = Conv1d(rng, cin, cout, 1) if cin != cout else None

    def __call__(self, x: Tensor, mod: Tensor) -> Tensor:
        h = self.conv1(engine.silu(self.n1(x)))
        h = h + engine.reshape(self.mod(mod), (x.value.shape[0], -1, 1))
        h = self.conv2(engine.silu(self.n2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class _UNetCore(Module):
    """Two-level 1D UNet over the 56-step axis."""

    def __init__(self, rng, x_channels: int, widths, mod_dim: int):
        c1, c2, c3 = widths
        self.stem = Conv1d(rng, x_channels, c1, 3, 1, 1)
        self.enc1 = ResBlock1d(rng, c1, c1, mod_dim)
        self.down1 = Conv1d(rng, c1, c2, 3, 2, 1)
        self.enc2 = ResBlock1d(rng, c2, c2, mod_dim)
        self.down2 = Conv1d(rng, c2, c3, 3, 2, 1)
        self.mid = ResBlock1d(rng, c3, c3, mod_dim)
        self.up2 = ConvTranspose1d(rng, c3, c2)
        self.dec2 = ResBlock1d(rng, 2 * c2, c2, mod_dim)
        self.up1 = ConvTranspose1d(rng, c2, c1)
        self.dec1 = ResBlock1d(rng, 2 * c1, c1, mod_dim)
        self.head = Conv1d(rng, c1, x_channels, 3, 1, 1)

    def encode(self, x: Tensor, mod: Tensor, inject=None):
        e1 = self.enc1(self.stem(x), mod)
        if inject is not None:
            e1 = e1 + inject[0]
        e2 = self.enc2(self.down1(e1), mod)
        if inject is not None:
            e2 = e2 + inject[1]
        m = self.mid(self.down2(e2), mod)
        if inject is not None:
            m = m + inject[2]
        return e1, e2, m

    def decode(self, e1: Tensor, e2: Tensor, m: Tensor, mod: Tensor) -> Tensor:
        d2 = self.dec2(engine.concat([self.up2(m), e2], axis=1), mod)
        d1 = self.dec1(engine.concat([self.up1(d2), e1], axis=1), mod)
        return self.head(d1)


class ControlUNet(Module):
    """Main denoising UNet plus a mirror branch for a spatial condition.

    The spatial branch injects its per-level features into the main encoder
    through zero-initialized 1x1 convolutions, so at initialization the
    output equals the plain unconditional UNet exactly. Only the injections
    start at zero: a zero stem as well would leave the branch gradient-dead
    until the injections drift off the constant component. Sigma embedding
    and the condition code vector modulate every residual block of both
    branches through zero-initialized projections.

    ``spatial_mode`` selects how the spatial condition enters: "dense" is
    the branch-and-inject form; "code" flattens the condition and appends it
    to the modulation vector instead (the weaker variant kept for
    comparison).
    """

    def __init__(
        self,
        rng,
        x_channels: int,
        spatial_channels: int,
        code_dim: int,
        widths=(32, 64, 64),
        steps: int = 56,
        spatial_mode: str = "dense",
    ):
        if spatial_mode not in ("dense", "code"):
            raise ValueError(f"unknown spatial_mode {spatial_mode!r}")
        self.spatial_mode = spatial_mode
        self.spatial_channels = spatial_channels
        self.code_dim = code_dim
        self.steps = steps
        mod_dim = SIGMA_EMB_DIM + code_dim
        if spatial_mode == "code":
            mod_dim += spatial_channels * steps
        c1, c2, c3 = widths
        self.main = _UNetCore(rng, x_channels, widths, mod_dim)
        if spatial_mode == "dense":
            self.ctrl_stem = Conv1d(rng, spatial_channels, c1, 3, 1, 1)
            self.ctrl_enc1 = ResBlock1d(rng, c1, c1, mod_dim)
            self.ctrl_down1 = Conv1d(rng, c1, c2, 3, 2, 1)
            self.ctrl_enc2 = ResBlock1d(rng, c2, c2, mod_dim)
            self.ctrl_down2 = Conv1d(rng, c2, c3, 3, 2, 1)
            self.ctrl_mid = ResBlock1d(rng, c3, c3, mod_dim)
            self.inject1 = Conv1d(rng, c1, c1, 1, zero_init=True)
            self.inject2 = Conv1d(rng, c2, c2, 1, zero_init=True)
            self.inject_mid = Conv1d(rng, c3, c3, 1, zero_init=True)

    def condition_groups(self):
        return ["codes", "spatial"]

    def eps(self, graph: Graph, x: np.ndarray, sigma: np.ndarray, cond=None, drop=None) -> Tensor:
        x = np.asarray(x, dtype=np.float32)
        n = x.shape[0]
        emb = graph.constant(sigma_embedding(sigma))
        codes = cond.get("codes") if cond else None
        if codes is None:
            codes = np.zeros((n, self.code_dim), np.float32)
        codes_t = _conditioned(graph, codes, "codes", drop)
        spatial = cond.get("spatial") if cond else None
        if spatial is None:
            spatial = np.zeros((n, self.spatial_channels, self.steps), np.float32)
        spatial_t = _conditioned(graph, spatial, "spatial", drop)

        if self.spatial_mode == "code":
            flat = engine.reshape(spatial_t, (n, -1))
            mod = engine.concat([emb, codes_t, flat], axis=1)
            e1, e2, m = self.main.encode(graph.constant(x), mod)
            return self.main.decode(e1, e2, m, mod)

        mod = engine.concat([emb, codes_t], axis=1)
        c1f = self.ctrl_enc1(self.ctrl_stem(spatial_t), mod)
        c2f = self.ctrl_enc2(self.ctrl_down1(c1f), mod)
        cmf = self.ctrl_mid(self.ctrl_down2(c2f), mod)
        inject = (self.inject1(c1f), self.inject2(c2f), self.inject_mid(cmf))
        e1, e2, m = self.main.encode(graph.constant(x), mod, inject)
        return self.main.decode(e1, e2, m, mod)
