"""Scene building, scripted-agent simulation, oracle, and corpus bundles."""

import hashlib
import os

import numpy as np
import pytest

from ats.synthworld import (
    AGENT_HEIGHT,
    BONE_COUNT,
    REST_OFFSETS,
    AgentState,
    ApproachObserver,
    Box,
    CorpusConfig,
    OracleDistribution,
    PolicySpec,
    RecordedObserver,
    SceneSpec,
    StaticObserver,
    SynthworldError,
    approach_mode,
    build_scene,
    default_policy,
    default_scene,
    flee_corpus_config,
    generate_corpus,
    load_split,
    oracle,
    rest_bones,
    scene_sdf,
    simulate,
)
from ats.worldstate import SDF_CHANNEL, load_world, slice_windows
from ats.geometry import SE3


def room(spots=((1.5, 1.0, AGENT_HEIGHT),), weights=None, boxes=(), hi=(3.0, 2.0, 2.4)):
    spots = np.asarray(spots, dtype=float)
    if weights is None:
        weights = np.ones(len(spots))
    return SceneSpec((0.0, 0.0, 0.0), hi, tuple(boxes), spots, np.asarray(weights, float))


CORRIDOR = SceneSpec(
    room_lo=(0.0, 0.0, 0.0),
    room_hi=(8.0, 3.0, 2.4),
    boxes=(),
    spots=np.array([[0.8, 0.8, AGENT_HEIGHT], [7.2, 2.2, AGENT_HEIGHT], [7.2, 0.8, AGENT_HEIGHT]]),
    spot_weights=np.array([0.3, 0.4, 0.3]),
)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def test_empty_room_occupied_only_at_boundary():
    vol = build_scene(room())
    occ = vol.values[..., 0]
    pos = vol.node_positions()
    # nodes on the wall planes themselves count as wall; classify with a
    # half-voxel margin so float32 node coordinates cannot flip sides
    margin = 0.5 * vol.voxel_size
    inside = np.all((pos > margin) & (pos < np.array([3.0, 2.0, 2.4]) - margin), axis=-1)
    assert np.all(occ[inside] == 0.0)
    assert np.all(occ[~inside] == 1.0)


def test_cube_sdf_half_meter_on_face_axis():
    spec = SceneSpec(
        (-2.0, -2.0, 0.0),
        (2.0, 2.0, 2.4),
        (Box((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), semantic=0),),
        np.array([[1.5, 1.5, AGENT_HEIGHT]]),
        np.array([1.0]),
    )
    assert scene_sdf(spec, np.array([[1.0, 0.0, 0.5]]))[0] == pytest.approx(0.5, abs=1e-12)
    vol = build_scene(spec)
    sampled = vol.sample(np.array([1.0, 0.0, 0.5]))[SDF_CHANNEL]
    assert abs(sampled - 0.5) < 0.06


def test_build_scene_deterministic():
    a = build_scene(default_scene())
    b = build_scene(default_scene())
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.origin, b.origin)


def test_semantic_channels_and_conflicts():
    boxes = (
        Box((0.5, 0.5, 0.0), (1.0, 1.0, 0.5), semantic=0),
        Box((2.0, 1.2, 0.0), (2.5, 1.7, 0.5), semantic=1),
    )
    vol = build_scene(room(boxes=boxes, spots=((1.6, 0.5, AGENT_HEIGHT),)))
    assert vol.channels == 4
    assert vol.sample(np.array([0.75, 0.75, 0.25]))[2] == 1.0
    assert vol.sample(np.array([2.25, 1.45, 0.25]))[3] == 1.0

    clash = (
        Box((0.5, 0.5, 0.0), (1.2, 1.2, 0.5), semantic=0),
        Box((1.0, 1.0, 0.0), (1.6, 1.6, 0.5), semantic=1),
    )
    with pytest.raises(SynthworldError):
        build_scene(room(boxes=clash, spots=((2.5, 0.5, AGENT_HEIGHT),)))
    # same class may overlap freely
    merged = (
        Box((0.5, 0.5, 0.0), (1.2, 1.2, 0.5), semantic=0),
        Box((1.0, 1.0, 0.0), (1.6, 1.6, 0.5), semantic=0),
    )
    build_scene(room(boxes=merged, spots=((2.5, 0.5, AGENT_HEIGHT),)))


def test_spec_rejects_bad_geometry():
    with pytest.raises(SynthworldError):
        room(boxes=(Box((2.5, 1.5, 0.0), (3.5, 1.8, 0.5), semantic=0),))  # pokes through wall
    with pytest.raises(SynthworldError):
        build_scene(room(spots=((0.02, 0.02, AGENT_HEIGHT),)))  # spot inside wall clearance
    with pytest.raises(SynthworldError):
        Box((1.0, 1.0, 1.0), (0.5, 1.5, 1.5), semantic=0)
    with pytest.raises(SynthworldError):
        PolicySpec(v_flee=0.2, v_follow=0.3)
    with pytest.raises(SynthworldError):
        PolicySpec(idle_prob=1.0)
    with pytest.raises(SynthworldError):
        AgentState((0, 0), (0, 0, 0), (0, 0, 0))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def test_agent_reaches_single_spot_and_idles():
    spec = room(spots=((2.5, 1.5, AGENT_HEIGHT),))
    clip = simulate(spec, default_policy(idle_prob=0.0), StaticObserver(position=(0.5, 0.5, 1.4)),
                    20.0, seed=3, start=(0.8, 1.0))
    end = clip.agent.root.t[-1]
    assert np.linalg.norm(end[:2] - np.array([2.5, 1.5])) < 0.3
    # parked: the last second of root positions is constant
    assert np.ptp(clip.agent.root.t[-10:], axis=0).max() < 1e-9


def test_fast_approach_increases_distance():
    pol = default_policy()
    clip = simulate(CORRIDOR, pol, ApproachObserver(speed=2 * pol.v_flee, start=(0.4, 1.5, 1.4)),
                    8.0, seed=11, start=(1.2, 1.5))
    d = np.linalg.norm(clip.agent.root.t[:, :2] - clip.observer.poses.t[:, :2], axis=1)
    assert d[-1] > d[0]


def test_flee_trend_holds_across_seeds():
    pol = default_policy()
    wins = 0
    for s in range(100):
        rng = np.random.default_rng(9000 + s)
        a = rng.uniform(2 * np.pi / 3, 4 * np.pi / 3)
        obs0 = np.array([1.2 + 1.2 * np.cos(a), 1.5 + 1.2 * np.sin(a), 1.4])
        obs0[:2] = np.clip(obs0[:2], 0.35, [7.65, 2.65])
        clip = simulate(CORRIDOR, pol, ApproachObserver(speed=2 * pol.v_flee, start=obs0),
                        8.0, seed=9000 + s, start=(1.2, 1.5))
        d = np.linalg.norm(clip.agent.root.t[:, :2] - clip.observer.poses.t[:, :2], axis=1)
        half = len(d) // 2
        wins += d[half:].mean() > d[:half].mean()
    assert wins >= 95


def test_zero_seconds_gives_single_valid_frame():
    clip = simulate(default_scene(), default_policy(), StaticObserver(), 0.0, seed=0)
    assert len(clip) == 1
    assert clip.agent.bones.shape == (1, BONE_COUNT)


def test_root_stays_out_of_occupied_voxels():
    spec = default_scene()
    vol = build_scene(spec)
    for seed in range(6):
        clip = simulate(spec, default_policy(), StaticObserver(), 30.0, seed=seed)
        occ = vol.sample(clip.agent.root.t)[:, 0]
        assert occ.max() <= 0.5
        assert scene_sdf(spec, clip.agent.root.t).min() > 0.0


def test_simulation_deterministic_per_seed():
    spec = default_scene()
    a = simulate(spec, default_policy(), StaticObserver(), 10.0, seed=5)
    b = simulate(spec, default_policy(), StaticObserver(), 10.0, seed=5)
    c = simulate(spec, default_policy(), StaticObserver(), 10.0, seed=6)
    assert np.array_equal(a.agent.bones.t, b.agent.bones.t)
    assert np.array_equal(a.observer.poses.t, b.observer.poses.t)
    assert not np.array_equal(a.agent.root.t, c.agent.root.t)


def test_idle_frames_hold_exact_rest_pose():
    spec = room(spots=((2.5, 1.5, AGENT_HEIGHT),))
    clip = simulate(spec, default_policy(idle_prob=0.0), StaticObserver(position=(0.5, 0.5, 1.4)),
                    20.0, seed=3, start=(0.8, 1.0))
    want = rest_bones(clip.agent.root[-1])
    got = clip.agent.bones[-1]
    assert np.array_equal(got.t, want.t) and np.array_equal(got.q, want.q)


def test_rest_bones_are_rest_offsets_at_identity():
    bones = rest_bones(SE3.identity())
    assert np.allclose(bones.t, REST_OFFSETS, atol=1e-15)


def test_gait_moves_feet_while_walking():
    clip = simulate(CORRIDOR, default_policy(idle_prob=0.0), StaticObserver(position=(4.0, 2.6, 1.4)),
                    10.0, seed=2, start=(1.0, 1.0))
    speed = np.linalg.norm(np.diff(clip.agent.root.t, axis=0), axis=1) * 10.0
    moving = np.where(speed > 0.5)[0]
    assert len(moving) > 20
    foot = clip.agent.bones.t[moving, -1, 2]  # last bone is a foot
    assert np.ptp(foot) > 0.02
    # articulation amplitude scales the oscillation away entirely at zero
    still = simulate(CORRIDOR, default_policy(idle_prob=0.0, gait_amplitude=np.zeros(BONE_COUNT)),
                     StaticObserver(position=(4.0, 2.6, 1.4)), 5.0, seed=2, start=(1.0, 1.0))
    rel = still.agent.root[:, None].inverse().compose(still.agent.bones)
    assert np.allclose(rel.t, REST_OFFSETS, atol=1e-12)


def test_unreachable_spot_raises():
    divider = Box((2.9, 0.0, 0.0), (3.1, 4.0, 2.4), semantic=0)
    spec = SceneSpec((0, 0, 0), (6.0, 4.0, 2.4), (divider,),
                     np.array([[1.0, 2.0, AGENT_HEIGHT], [5.0, 2.0, AGENT_HEIGHT]]),
                     np.array([0.5, 0.5]))
    with pytest.raises(SynthworldError):
        simulate(spec, default_policy(idle_prob=0.0), StaticObserver(position=(1.0, 3.0, 1.4)),
                 5.0, seed=1, start=(1.0, 2.0))


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def test_oracle_neutral_returns_base_weights():
    spec = room(spots=((0.8, 0.6, AGENT_HEIGHT), (2.4, 1.5, AGENT_HEIGHT)), weights=(0.7, 0.3))
    state = AgentState((1.5, 1.0, AGENT_HEIGHT), (0.5, 1.8, 1.4), (0.0, 0.0, 0.0))
    dist = oracle(state, spec, default_policy())
    assert np.array_equal(dist.probs, np.array([0.7, 0.3]))
    assert np.array_equal(dist.means, spec.spots)


def test_oracle_flee_zeroes_spots_near_observer():
    spec = default_scene()
    pol = default_policy()
    obs = np.array([1.25, 2.25, 1.4])
    vel = np.array([2.5, -3.5, 0.0])  # rushing the agent
    state = AgentState((1.5, 1.9, AGENT_HEIGHT), obs, vel)
    assert approach_mode(pol, state) == "flee"
    dist = oracle(state, spec, pol)
    near = np.linalg.norm(spec.spots[:, :2] - obs[:2], axis=1) < 1.0
    assert near.any()
    assert np.all(dist.probs[near] == 0.0)
    assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_oracle_follow_targets_spot_nearest_observer():
    spec = default_scene()
    pol = default_policy()
    state = AgentState((2.0, 2.0, AGENT_HEIGHT), (3.5, 2.4, 1.4), (-0.2, 0.0, 0.0))
    assert approach_mode(pol, state) == "follow"
    probs = oracle(state, spec, pol).probs
    nearest = np.argmin(np.linalg.norm(spec.spots[:, :2] - np.array([3.5, 2.4]), axis=1))
    want = np.zeros(len(spec.spots))
    want[nearest] = 1.0
    assert np.array_equal(probs, want)


def test_oracle_rejects_state_in_solid():
    spec = default_scene()
    state = AgentState((3.0, 1.0, 1.0), (1.0, 1.0, 1.4), (0.0, 0.0, 0.0))  # inside divider
    with pytest.raises(SynthworldError):
        oracle(state, spec, default_policy())
    with pytest.raises(SynthworldError):
        OracleDistribution(np.array([0.5, 0.4]), np.zeros((2, 3)), np.ones(2))


def test_spawn_states_goal_law_is_multimodal():
    spec = default_scene()
    pol = default_policy()
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform((0.5, 0.5), (5.5, 3.5))
        if scene_sdf(spec, np.array([[p[0], p[1], AGENT_HEIGHT]]))[0] <= 0.15:
            continue
        state = AgentState((p[0], p[1], AGENT_HEIGHT), (3.0, 3.8, 1.4), (0.0, 0.0, 0.0))
        probs = oracle(state, spec, pol).probs
        assert (probs >= 0.2).sum() >= 2


def test_goal_frequencies_match_oracle_monte_carlo():
    # 1e4 simulate runs; the first decision happens at frame 1, where the
    # observer state matches the closed-form query exactly
    spec = default_scene()
    pol = default_policy(idle_prob=0.0)
    start = (1.5, 1.9)
    obs = (3.0, 3.8, 1.4)
    hits = np.zeros(len(spec.spots))
    for s in range(10_000):
        got = []
        simulate(spec, pol, StaticObserver(position=obs), 0.3, seed=s, start=start,
                 on_decision=lambda f, k: got.append(k))
        hits[got[0]] += 1
    want = oracle(AgentState((*start, AGENT_HEIGHT), obs, (0, 0, 0)), spec, pol).probs
    assert np.abs(hits / 10_000 - want).max() < 0.03


def test_flee_frequencies_match_oracle_monte_carlo():
    spec = default_scene()
    pol = default_policy(idle_prob=0.0)
    start = (1.5, 1.9)
    obs_path = np.linspace((1.0, 2.6, 1.4), (1.25, 2.25, 1.4), 5)
    hits = np.zeros(len(spec.spots))
    n = 3000
    for s in range(n):
        got = []
        simulate(spec, pol, RecordedObserver(obs_path, np.zeros(5)), 0.3, seed=s, start=start,
                 on_decision=lambda f, k: got.append(k))
        hits[got[0]] += 1
    vel = (obs_path[1] - obs_path[0]) * 10.0
    want = oracle(AgentState((*start, AGENT_HEIGHT), obs_path[1], vel), spec, pol).probs
    assert want[2] == 0.0  # the spot beside the observer drops out
    assert np.abs(hits / n - want).max() < 0.03


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

def _tree_digest(d):
    h = hashlib.sha256()
    for name in sorted(os.listdir(d)):
        with open(os.path.join(d, name), "rb") as fh:
            h.update(name.encode())
            h.update(fh.read())
    return h.hexdigest()


def test_corpus_roundtrip_and_split_counts(tmp_path):
    cfg = CorpusConfig(out_dir=str(tmp_path / "w"), clips=3, eval_clips=1, seconds=30.0)
    split = generate_corpus(cfg, seed=7)
    world = load_world(cfg.out_dir)
    assert [c.clip_id for c in world.clips] == split["trainClips"] + split["evalClips"]
    counts = {c.clip_id: len(slice_windows(c, split["stride"])) for c in world.clips}
    assert split["trainWindows"] == sum(counts[i] for i in split["trainClips"])
    assert split["evalWindows"] == sum(counts[i] for i in split["evalClips"])
    assert load_split(cfg.out_dir) == split


def test_corpus_regeneration_byte_identical(tmp_path):
    a = CorpusConfig(out_dir=str(tmp_path / "a"), clips=2, eval_clips=1, seconds=20.0)
    b = CorpusConfig(out_dir=str(tmp_path / "b"), clips=2, eval_clips=1, seconds=20.0)
    generate_corpus(a, seed=42)
    generate_corpus(b, seed=42)
    assert _tree_digest(a.out_dir) == _tree_digest(b.out_dir)


def test_corpus_seed_changes_tracks_not_scene(tmp_path):
    a = CorpusConfig(out_dir=str(tmp_path / "a"), clips=2, eval_clips=1, seconds=20.0)
    b = CorpusConfig(out_dir=str(tmp_path / "b"), clips=2, eval_clips=1, seconds=20.0)
    generate_corpus(a, seed=1)
    generate_corpus(b, seed=2)
    with open(os.path.join(a.out_dir, "scene.vol"), "rb") as fh:
        sa = fh.read()
    with open(os.path.join(b.out_dir, "scene.vol"), "rb") as fh:
        sb = fh.read()
    assert sa == sb
    with open(os.path.join(a.out_dir, "tracks.jsonl")) as fh:
        ta = fh.read()
    with open(os.path.join(b.out_dir, "tracks.jsonl")) as fh:
        tb = fh.read()
    assert ta != tb


def test_default_corpus_reports_twelve_thousand_windows():
    # window arithmetic only; generating the full bundle is a session fixture
    cfg = CorpusConfig(out_dir="unused")
    frames = int(round(cfg.seconds * 10.0)) + 1
    per_clip = (frames - 64) // cfg.stride + 1
    assert (cfg.clips - cfg.eval_clips) * per_clip >= 12_000
    flee = flee_corpus_config("unused")
    assert flee.observers[0] == "pursue"
