"""CLI round trips and the live session protocol.

The service fixtures train a deliberately tiny checkpoint: these tests pin
plumbing contracts (determinism, schemas, state safety), not motion quality.
"""

import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from starlette.testclient import TestClient

from ats.behavior import GenerationRequest, generate_goal, load_model, make_context
from ats.simserver import (
    PROTOCOL_VERSION,
    Service,
    SessionError,
    create_app,
    generate_window,
    resample_observer,
    step_seed,
)
from ats.simserver.cli import main
from ats.worldstate import load_world
from worlds import goal_world

SYNTH_SPEC = {"clips": 3, "evalClips": 1, "seconds": 12.0, "observers": ["static", "approach"]}
TRAIN_SPEC = {
    "stages": ["goal", "path", "pose"],
    "grid_size": 8,
    "widths": [8, 16, 16],
    "scene_widths": [8, 8, 8],
    "goal_hidden": 32,
    "goal_depth": 3,
    "steps": 10,
    "batch": 8,
    "lr": 1e-3,
}


def _write(path: Path, payload) -> str:
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    spec = _write(root / "synth.json", SYNTH_SPEC)
    out = root / "world"
    assert main(["synth", "--config", spec, "--out", str(out), "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt_path(bundle_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    spec = _write(root / "train.json", TRAIN_SPEC)
    out = root / "tiny.ckpt"
    code = main(["train", "--world", str(bundle_dir), "--config", spec, "--out", str(out)])
    assert code == 0
    assert json.loads((root / "tiny.ckpt.loss.json").read_text())["loss"]
    return out


@pytest.fixture(scope="module")
def served(bundle_dir, ckpt_path):
    world = load_world(str(bundle_dir))
    model = load_model(str(ckpt_path))
    service = Service({"world": world}, model)
    return service, TestClient(create_app(service))


def _open(client, **over) -> str:
    body = {"worldId": "world", "s": 1.0, "K": 2, "seed": 5, **over}
    response = client.post("/api/session", json=body)
    assert response.status_code == 200
    return response.json()["id"]


def _drive(client, sid: str, script) -> list:
    """Send (message, expected replies) pairs; collects reply texts in order.

    Waiting for each step's reply before sending on serializes the steps,
    the way an interactive client would.
    """
    out = []
    with client.websocket_connect(f"/api/session/{sid}/stream") as ws:
        for msg, expect in script:
            ws.send_text(msg if isinstance(msg, str) else json.dumps(msg))
            for _ in range(expect):
                out.append(ws.receive_text())
    return out


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_synth_bundles_are_byte_identical(bundle_dir, tmp_path):
    spec = _write(tmp_path / "synth.json", SYNTH_SPEC)
    other = tmp_path / "again"
    assert main(["synth", "--config", spec, "--out", str(other), "--seed", "7"]) == 0
    names = sorted(p.name for p in bundle_dir.iterdir())
    assert names == sorted(p.name for p in other.iterdir())
    for name in names:
        assert (bundle_dir / name).read_bytes() == (other / name).read_bytes()


def test_cli_failures_are_one_line_json(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", "x"]) == 2
    err = capsys.readouterr().err
    assert len(err.strip().splitlines()) == 1
    assert json.loads(err)["error"] == "missing_file"

    assert main(["eval", "--world", "x", "--badflag"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"


def test_eval_is_deterministic_across_training_runs(bundle_dir, tmp_path, capsys):
    spec = _write(tmp_path / "train.json", {**TRAIN_SPEC, "stages": ["goal"], "steps": 6})
    reports = []
    for tag in ("a", "b"):
        ckpt = tmp_path / f"{tag}.ckpt"
        assert main(["train", "--world", str(bundle_dir), "--config", spec, "--out", str(ckpt)]) == 0
        out = tmp_path / f"{tag}.json"
        code = main(
            ["eval", "--world", str(bundle_dir), "--ckpt", str(ckpt),
             "--K", "2", "--L", "2", "--stride", "16", "--out", str(out)]
        )
        assert code == 0
        reports.append(out.read_bytes())
    capsys.readouterr()
    assert reports[0] == reports[1]


def test_eval_oracle_row_is_exactly_zero(bundle_dir, tmp_path, capsys):
    out = tmp_path / "oracle.json"
    code = main(
        ["eval", "--world", str(bundle_dir), "--ablation", "oracle",
         "--K", "3", "--L", "2", "--stride", "16", "--out", str(out)]
    )
    assert code == 0
    capsys.readouterr()
    report = json.loads(out.read_text())
    row = report["rows"][0]
    assert row["label"] == "oracle"
    assert len(row["metrics"]) == 7
    for mean, std in row["metrics"].values():
        assert mean == 0.0 and std == 0.0


def test_eval_location_prior_needs_no_checkpoint(bundle_dir, tmp_path, capsys):
    out = tmp_path / "prior.json"
    code = main(
        ["eval", "--world", str(bundle_dir), "--ablation", "location-prior",
         "--K", "4", "--L", "2", "--stride", "16", "--out", str(out)]
    )
    assert code == 0
    capsys.readouterr()
    report = json.loads(out.read_text())
    assert report["rows"][0]["label"] == "location_prior"
    assert list(report["rows"][0]["metrics"]) == ["goal_de"]
    assert report["rows"][0]["metrics"]["goal_de"][0] > 0.0


def test_eval_guards_mismatched_ablations(bundle_dir, tmp_path, capsys):
    spec = _write(tmp_path / "train.json", {**TRAIN_SPEC, "stages": ["goal"], "steps": 6})
    ckpt = tmp_path / "goal.ckpt"
    assert main(["train", "--world", str(bundle_dir), "--config", spec, "--out", str(ckpt)]) == 0
    capsys.readouterr()
    code = main(["eval", "--world", str(bundle_dir), "--ckpt", str(ckpt), "--ablation", "one-stage"])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "bad_config"
    code = main(["eval", "--world", str(bundle_dir), "--ckpt", str(ckpt), "--ablation", "world-frame"])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "bad_config"


def test_sample_writes_window_sets(bundle_dir, ckpt_path, tmp_path, capsys):
    out = tmp_path / "samples.json"
    code = main(
        ["sample", "--ckpt", str(ckpt_path), "--world", str(bundle_dir),
         "--s", "1.5", "--K", "3", "--seed", "4", "--out", str(out)]
    )
    assert code == 0
    capsys.readouterr()
    payload = json.loads(out.read_text())
    assert np.asarray(payload["goals"]).shape == (3, 3)
    paths = np.asarray(payload["paths"])
    assert paths.shape == (3, 56, 3)
    bones_q = np.asarray(payload["bones"]["q"])
    assert bones_q.shape[:2] == (3, 56) and bones_q.shape[3] == 4
    # distinct samples, not one tiled draw
    assert not np.allclose(paths[0], paths[1])


# ---------------------------------------------------------------------------
# observer resampling and seed derivation
# ---------------------------------------------------------------------------

def test_resample_observer_matches_brute_force():
    rng = np.random.default_rng(3)
    times = np.sort(rng.uniform(-2.0, 8.0, size=17))

    def unit(v):
        return v / np.linalg.norm(v)

    entries = [(float(t), unit(rng.normal(size=4)), rng.normal(size=3)) for t in times]
    ticks = rng.uniform(-1.0, 9.0, size=40)
    got = resample_observer(entries, ticks)
    for j, tick in enumerate(ticks):
        best, best_d = 0, abs(entries[0][0] - tick)
        for i, (t, _, _) in enumerate(entries):
            d = abs(t - tick)
            if d < best_d:  # strict: ties keep the earlier entry
                best, best_d = i, d
        assert np.allclose(got.q[j], entries[best][1])
        assert np.allclose(got.t[j], entries[best][2])


def test_resample_observer_holds_last_pose_over_gaps():
    entries = [(0.0, np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0]))]
    out = resample_observer(entries, np.array([5.0, 50.0, 500.0]))
    assert np.allclose(out.t, [[1, 0, 0]] * 3)


def test_step_seeds_are_distinct_and_stable():
    seeds = [step_seed(9, i) for i in range(20)]
    assert len(set(seeds)) == 20
    assert seeds == [step_seed(9, i) for i in range(20)]
    assert step_seed(10, 0) != step_seed(9, 0)


# ---------------------------------------------------------------------------
# HTTP control plane
# ---------------------------------------------------------------------------

def test_open_session_returns_16_hex_ids(served):
    _, client = served
    sid = _open(client)
    assert len(sid) == 16 and int(sid, 16) >= 0
    assert client.delete(f"/api/session/{sid}").json()["closed"] is True
    assert client.delete(f"/api/session/{sid}").status_code == 404


def test_open_session_rejects_unknown_world_and_bad_params(served):
    _, client = served
    assert client.post("/api/session", json={"worldId": "nope"}).status_code == 404
    bad = client.post("/api/session", json={"worldId": "world", "K": 0})
    assert bad.status_code == 422 and bad.json()["error"] == "bad_params"
    bad = client.post("/api/session", json={"worldId": "world", "s": "high"})
    assert bad.status_code == 422 and bad.json()["error"] == "bad_schema"


def test_incompatible_checkpoints_raise_typed_errors():
    toy = goal_world(n_clips=2, t_len=80)
    service = Service({"toy": toy}, SimpleNamespace(bone_count=3, channels=4))
    with pytest.raises(SessionError) as err:
        service.open_session("toy")
    assert err.value.code == "bone_count_mismatch"
    service = Service({"toy": toy}, SimpleNamespace(bone_count=toy.bone_count, channels=5))
    with pytest.raises(SessionError) as err:
        service.open_session("toy")
    assert err.value.code == "channel_count_mismatch"
    # and over HTTP the code arrives as a conflict body
    client = TestClient(create_app(Service({"toy": toy}, SimpleNamespace(bone_count=3, channels=4))))
    response = client.post("/api/session", json={"worldId": "toy"})
    assert response.status_code == 409
    assert response.json()["error"] == "bone_count_mismatch"


def test_scene_payload_matches_the_volume(served):
    service, client = served
    scene = service.worlds["world"].scene
    payload = client.get("/api/scene/world").json()
    assert payload["shape"] == list(scene.values.shape[:3])
    assert payload["voxelSize"] == pytest.approx(scene.voxel_size)
    assert np.allclose(payload["origin"], scene.origin)
    occ = np.asarray(payload["occupancy"])
    assert occ.shape == (scene.values.shape[2],) + scene.values.shape[:2]
    assert np.allclose(occ[4], scene.values[:, :, 4, 0], atol=5e-4)
    assert client.get("/api/scene/missing").status_code == 404


# ---------------------------------------------------------------------------
# session protocol
# ---------------------------------------------------------------------------

OBSERVER_WALK = [
    ({"type": "observer", "t": 0.2, "q": [1, 0, 0, 0], "p": [2.0, 2.0, 1.4]}, 0),
    ({"type": "observer", "t": 1.7, "q": [0, 0, 0, 1], "p": [2.4, 1.8, 1.4]}, 0),
    ({"type": "step"}, 1),
    ({"type": "observer", "t": 6.0, "q": [1, 0, 0, 0], "p": [2.8, 1.5, 1.4]}, 0),
    ({"type": "step"}, 1),
]


def test_replay_reproduces_windows_bit_identically(served):
    _, client = served
    first = _drive(client, _open(client, seed=11), OBSERVER_WALK)
    again = _drive(client, _open(client, seed=11), OBSERVER_WALK)
    assert len(first) == 2
    assert first == again
    msg = json.loads(first[0])
    assert msg["v"] == PROTOCOL_VERSION and msg["type"] == "window"
    assert msg["tStart"] == 0.0 and json.loads(first[1])["tStart"] == 5.6
    assert np.asarray(msg["goals"]).shape == (2, 3)
    assert np.asarray(msg["path"]).shape == (56, 3)
    assert len(msg["bones"]) == 56
    assert {"q", "t"} == set(msg["bones"][0][0])


def test_sessions_are_isolated_and_seeded(served):
    _, client = served
    alt = _drive(client, _open(client, seed=12), OBSERVER_WALK)
    base = _drive(client, _open(client, seed=11), OBSERVER_WALK)
    assert alt != base  # different seeds, same stream


def test_malformed_messages_never_alter_state(served):
    _, client = served
    clean = _drive(client, _open(client, seed=13), OBSERVER_WALK)
    noisy_script = [
        OBSERVER_WALK[0],
        ("{{{ not json", 1),
        ({"type": "warp", "x": 1}, 1),
        ({"type": "observer", "t": 0.1, "q": [1, 0, 0, 0], "p": [9.0, 9.0, 9.0]}, 1),
        ({"type": "observer", "t": 0.4, "q": [0, 0, 0, 0], "p": [0.0, 0.0, 0.0]}, 1),
        ({"type": "set_params", "s": "loud", "K": 2}, 1),
        OBSERVER_WALK[1],
        OBSERVER_WALK[2],
        ({"type": "observer"}, 1),
        OBSERVER_WALK[3],
        OBSERVER_WALK[4],
    ]
    noisy = _drive(client, _open(client, seed=13), noisy_script)
    codes = [json.loads(r).get("code") for r in noisy]
    assert codes[:5] == ["bad_json", "unknown_type", "stale_timestamp", "bad_schema", "bad_schema"]
    assert codes[6] == "bad_schema"  # observer with missing fields
    # the interleaved garbage left the generated windows untouched
    assert [noisy[5], noisy[7]] == clean


def test_set_params_zero_guidance_matches_direct_sampler(served):
    service, client = served
    sid = _open(client, seed=9, K=3)
    script = [({"type": "set_params", "s": 0.0, "K": 3}, 0), ({"type": "step"}, 1)]
    msg = json.loads(_drive(client, sid, script)[0])

    # a fresh session opened at s=0 generates the identical window offline
    session = service.open_session("world", s=0.0, k=3, seed=9)
    result = generate_window(session.snapshot())
    assert result["message"] == msg

    # and the goal cloud equals the plain unconditional sampler output
    world = service.worlds["world"]
    model = service.model
    req = GenerationRequest(
        world,
        make_context(model.config, "live", session.root8, session.bones8, session.obs8),
        guidance=0.0,
        count=3,
        seed=step_seed(9, 0),
    )
    direct = req.past.anchor.apply(generate_goal(model, req))
    assert np.allclose(np.asarray(msg["goals"]), direct, atol=1e-6)


def test_hold_goal_persists_across_steps(served):
    service, client = served
    sid = _open(client, seed=21, holdGoal=True)
    with client.websocket_connect(f"/api/session/{sid}/stream") as ws:
        ws.send_text(json.dumps({"type": "step"}))
        first = json.loads(ws.receive_text())
        held = service.sessions[sid].goal_world
        assert held is not None
        assert np.allclose(held, first["goals"][0], atol=1e-6)
        ws.send_text(json.dumps({"type": "step"}))
        json.loads(ws.receive_text())
        assert np.allclose(service.sessions[sid].goal_world, held)
        ws.send_text(json.dumps({"type": "set_params", "s": 1.0, "K": 2, "holdGoal": False}))
        ws.send_text(json.dumps({"type": "step"}))
        json.loads(ws.receive_text())
        assert service.sessions[sid].goal_world is None


def test_busy_reply_when_generation_in_flight(served, monkeypatch):
    import ats.simserver.service as srv

    real = srv.generate_window

    def slow(snap):
        time.sleep(0.4)
        return real(snap)

    monkeypatch.setattr(srv, "generate_window", slow)
    _, client = served
    sid = _open(client, seed=2)
    with client.websocket_connect(f"/api/session/{sid}/stream") as ws:
        ws.send_text(json.dumps({"type": "step"}))
        ws.send_text(json.dumps({"type": "step"}))
        kinds = sorted(json.loads(ws.receive_text())["type"] for _ in range(2))
        assert kinds == ["busy", "window"]  # exactly one reply per step
        ws.send_text(json.dumps({"type": "step"}))
        assert json.loads(ws.receive_text())["type"] == "window"


def test_deleted_session_closes_the_stream(served):
    _, client = served
    sid = _open(client, seed=3)
    with client.websocket_connect(f"/api/session/{sid}/stream") as ws:
        client.delete(f"/api/session/{sid}")
        ws.send_text(json.dumps({"type": "step"}))
        assert json.loads(ws.receive_text())["code"] == "unknown_session"
