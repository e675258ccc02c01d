"""Session fixtures shared between unit tests and the acceptance suite.

Trained models and generated corpora are expensive, so anything reused by
multiple test modules is built once per session here.
"""

import numpy as np
import pytest

from ats.behavior import BehaviorConfig, train_behavior, world_frame_variant
from ats.diffusion import EpsilonMLP, NoiseSchedule, TrainConfig, train

from worlds import bimodal_world, flee_world, goal_world, mixed_world


MIXTURE_MODES = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
MIXTURE_STD = 0.1


def draw_mixture(rng, n):
    comp = rng.integers(0, 2, size=n)
    return (MIXTURE_MODES[comp] + rng.normal(scale=MIXTURE_STD, size=(n, 3))).astype(np.float32)


@pytest.fixture(scope="session")
def two_mode_model():
    """Unconditional denoiser trained on the two-mode 3D Gaussian mixture."""
    rng = np.random.default_rng(2024)
    data = draw_mixture(rng, 4096)
    model = EpsilonMLP(rng, x_dim=3, cond_dims=None, hidden=128, depth=5)
    config = TrainConfig(steps=3000, batch=256, lr=1e-3, p_drop=0.0)
    curve = train(model, data, None, config, rng)
    schedule = config.schedule
    return model, schedule, curve


@pytest.fixture(scope="session")
def mixed_model():
    """Full three-stage model on the mixed corpus; the workhorse fixture.

    Slow to build (a few thousand steps), so every path/pose/rollout margin
    test shares this one instance.
    """
    world = mixed_world()
    config = BehaviorConfig(grid_size=8, widths=(24, 48, 48), steps=3500, batch=64, lr=1e-3)
    model = train_behavior(world, config, seed=0)
    return world, config, model


@pytest.fixture(scope="session")
def flee_model():
    """Three-stage model on the observer-driven corpus.

    Motion in that corpus happens only in response to the observer, so
    rollouts must react to the supplied observer stream to match it.
    """
    world = flee_world()
    config = BehaviorConfig(grid_size=8, widths=(16, 32, 32), steps=2500, batch=64, lr=1e-3)
    model = train_behavior(world, config, seed=0)
    return world, config, model


@pytest.fixture(scope="session")
def goal_models():
    """Goal-only ego and world-frame models on the constant-speed corpus.

    Trained on the first ten clips; the last two are held out for the
    translation-generalization comparison.
    """
    world = goal_world()
    train_ids = [c.agent.clip_id for c in world.clips[:10]]
    config = BehaviorConfig(
        stages=("goal",), grid_size=8, goal_hidden=128, goal_depth=4,
        steps=1500, batch=64, lr=1e-3,
    )
    ego = train_behavior(world, config, clip_ids=train_ids, seed=0)
    wrd = train_behavior(world, world_frame_variant(config, True), clip_ids=train_ids, seed=0)
    return world, config, ego, wrd


@pytest.fixture(scope="session")
def bimodal_pair():
    """Hierarchical (goal+path) and one-stage models on the veer corpus."""
    world = bimodal_world()
    hier_cfg = BehaviorConfig(
        stages=("goal", "path"), grid_size=8, widths=(24, 48, 48), steps=1500, batch=48, lr=1e-3
    )
    one_cfg = BehaviorConfig(
        stages=("one_stage",), grid_size=8, widths=(24, 48, 48), steps=1500, batch=48, lr=1e-3
    )
    hier = train_behavior(world, hier_cfg, seed=0)
    one = train_behavior(world, one_cfg, seed=0)
    return world, hier, one
