"""Live session service: HTTP control plane plus a streaming socket.

A session owns a rolling 0.8 s agent state. Each ``step`` message turns the
observer poses received so far into a 10 Hz track, rolls the generator one
5.6 s segment forward, and replies with one window message. Generation runs
on a bounded worker pool; a session with a segment in flight answers further
steps with ``busy`` instead of queueing them.
"""

from __future__ import annotations

import asyncio
import json
import secrets
import sys
import traceback

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from ..behavior import (
    BehaviorModel,
    GenerationRequest,
    generate_goal,
    make_context,
    rollout,
)
from ..geometry import SE3, se3_inverse
from ..worldstate import FPS, HORIZON_STEPS, OCCUPANCY_CHANNEL, PAST_STEPS

PROTOCOL_VERSION = 1
MAX_K = 64
SEGMENT_SECONDS = HORIZON_STEPS / FPS


class SessionError(ValueError):
    """Carries a short machine-readable code plus a human detail string."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code)
        self.code = code


# ---------------------------------------------------------------------------
# observer stream resampling
# ---------------------------------------------------------------------------

def resample_observer(entries, ticks: np.ndarray) -> SE3:
    """Nearest-timestamp pick of one pose per tick; ties go to the earlier.

    ``entries`` is a non-empty time-sorted list of (t, q, p). Ticks beyond
    the last entry keep returning it, which is the zero-order hold for gaps.
    """
    times = np.array([e[0] for e in entries])
    qs = np.array([e[1] for e in entries])
    ps = np.array([e[2] for e in entries])
    right = np.searchsorted(times, ticks)
    left = np.clip(right - 1, 0, len(entries) - 1)
    right = np.clip(right, 0, len(entries) - 1)
    use_right = np.abs(times[right] - ticks) < np.abs(ticks - times[left])
    idx = np.where(use_right, right, left)
    return SE3(qs[idx], ps[idx])


def step_seed(seed: int, index: int) -> int:
    """Per-step sampling seed; depends only on the session seed and index."""
    return int(np.random.SeedSequence((int(seed), 101, int(index))).generate_state(1)[0])


# ---------------------------------------------------------------------------
# session state
# ---------------------------------------------------------------------------

class Session:
    """One live agent: parameters, observer buffer, rolling last 0.8 s."""

    def __init__(self, sid: str, world, model: BehaviorModel, s: float, k: int, seed: int, hold_goal: bool = False):
        self.id = sid
        self.world = world
        self.model = model
        self.s = float(s)
        self.k = int(k)
        self.seed = int(seed)
        self.hold_goal = bool(hold_goal)
        self.goal_world = None
        self.steps_done = 0
        self.busy = False

        clip = world.clips[0]
        root0 = clip.agent.root[0]
        bones0 = clip.agent.bones[0]
        obs0 = clip.observer.poses[0]
        self.root8 = SE3(np.tile(root0.q, (PAST_STEPS, 1)), np.tile(root0.t, (PAST_STEPS, 1)))
        self.bones8 = SE3(
            np.tile(bones0.q[None], (PAST_STEPS, 1, 1)), np.tile(bones0.t[None], (PAST_STEPS, 1, 1))
        )
        self.obs8 = SE3(np.tile(obs0.q, (PAST_STEPS, 1)), np.tile(obs0.t, (PAST_STEPS, 1)))
        # the spawn pose is the hold-last fallback before any client message;
        # its timestamp also floors the strictly-increasing check
        self.entries = [(-10.0, np.asarray(obs0.q, dtype=float), np.asarray(obs0.t, dtype=float))]
        self.last_t = -10.0

    # -- message-side mutations, all validated before any state change -----

    def accept_observer(self, t, q, p) -> None:
        t = _finite_float(t, "t")
        q = _finite_vector(q, 4, "q")
        p = _finite_vector(p, 3, "p")
        norm = float(np.linalg.norm(q))
        if norm < 1e-8:
            raise SessionError("bad_schema", "observer quaternion has zero norm")
        if t <= self.last_t:
            raise SessionError("stale_timestamp", f"t={t} after t={self.last_t}")
        self.entries.append((t, q / norm, p))
        self.last_t = t

    def set_params(self, s, k, hold=None) -> None:
        s = _finite_float(s, "s")
        k = _int_in_range(k, 1, MAX_K, "K")
        if hold is not None and not isinstance(hold, bool):
            raise SessionError("bad_schema", "holdGoal must be a boolean")
        self.s = s
        self.k = k
        if hold is not None:
            self.hold_goal = hold
            if not hold:
                self.goal_world = None

    def snapshot(self) -> dict:
        """Frozen inputs for one step, taken at step receipt."""
        t0 = self.steps_done * SEGMENT_SECONDS
        return {
            "world": self.world,
            "model": self.model,
            "s": self.s,
            "k": self.k,
            "seed": step_seed(self.seed, self.steps_done),
            "t0": t0,
            "entries": list(self.entries),
            "hold_goal": self.hold_goal,
            "goal_world": self.goal_world,
            "root8": self.root8,
            "bones8": self.bones8,
            "obs8": self.obs8,
        }

    def commit(self, state: dict) -> None:
        self.root8 = state["root8"]
        self.bones8 = state["bones8"]
        self.obs8 = state["obs8"]
        self.goal_world = state["goal_world"]
        self.steps_done += 1
        # keep the newest pre-window entry as the hold candidate, drop older
        t_next = self.steps_done * SEGMENT_SECONDS
        past = [e for e in self.entries if e[0] < t_next]
        rest = [e for e in self.entries if e[0] >= t_next]
        self.entries = past[-1:] + rest


def _finite_float(x, name: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
        raise SessionError("bad_schema", f"{name} must be a finite number")
    return float(x)


def _finite_vector(x, n: int, name: str) -> np.ndarray:
    if not isinstance(x, (list, tuple)) or len(x) != n:
        raise SessionError("bad_schema", f"{name} must be a list of {n} numbers")
    out = []
    for v in x:
        out.append(_finite_float(v, name))
    return np.array(out)


def _int_in_range(x, lo: int, hi: int, name: str):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or int(x) != x:
        raise SessionError("bad_schema", f"{name} must be an integer")
    x = int(x)
    if not lo <= x <= hi:
        raise SessionError("bad_params", f"{name} must be in [{lo}, {hi}]")
    return x


# ---------------------------------------------------------------------------
# one generation step, pure in its snapshot
# ---------------------------------------------------------------------------

def generate_window(snap: dict) -> dict:
    """Run one 5.6 s segment from a session snapshot.

    Returns the wire message plus the committed rolling state. The chosen
    path always steers toward the first displayed goal sample, so the cloud
    the client renders contains the goal actually pursued.
    """
    model = snap["model"]
    ticks = snap["t0"] + (np.arange(HORIZON_STEPS) + 1.0) / FPS
    obs_track = resample_observer(snap["entries"], ticks)

    ctx = make_context(model.config, "live", snap["root8"], snap["bones8"], snap["obs8"])
    req_cloud = GenerationRequest(
        snap["world"], ctx, guidance=snap["s"], count=snap["k"], seed=snap["seed"]
    )
    goals_ego = generate_goal(model, req_cloud)
    goals_world = ctx.anchor.apply(goals_ego)

    if snap["hold_goal"] and snap["goal_world"] is not None:
        goal_world = np.asarray(snap["goal_world"], dtype=float)
        chosen = se3_inverse(ctx.anchor).apply(goal_world).astype(np.float32)
    else:
        chosen = goals_ego[0]
        goal_world = goals_world[0]
    req = GenerationRequest(
        snap["world"], ctx, guidance=snap["s"], count=1, seed=snap["seed"], goal=chosen
    )
    win = rollout(model, req, SEGMENT_SECONDS, obs_track)[0]

    # no wall-clock fields: a replayed stream must reproduce these bytes
    bones = win.bones[PAST_STEPS:]
    message = {
        "v": PROTOCOL_VERSION,
        "type": "window",
        "tStart": float(snap["t0"]),
        "goals": goals_world.tolist(),
        "path": win.root.t[PAST_STEPS:].tolist(),
        "bones": [
            [
                {"q": bones.q[i, j].tolist(), "t": bones.t[i, j].tolist()}
                for j in range(bones.shape[1])
            ]
            for i in range(HORIZON_STEPS)
        ],
    }
    state = {
        "root8": win.root[-PAST_STEPS:],
        "bones8": win.bones[-PAST_STEPS:],
        "obs8": win.observer[-PAST_STEPS:],
        "goal_world": goal_world if snap["hold_goal"] else None,
    }
    return {"message": message, "state": state}


# ---------------------------------------------------------------------------
# service registry
# ---------------------------------------------------------------------------

class Service:
    """Shared worlds and model, session registry, bounded generation pool."""

    def __init__(self, worlds: dict, model: BehaviorModel, pool_size: int = 2):
        if pool_size < 1:
            raise SessionError("bad_params", "pool size must be >= 1")
        self.worlds = dict(worlds)
        self.model = model
        self.pool_size = int(pool_size)
        self.sessions = {}
        self._semaphore = None

    def semaphore(self) -> asyncio.Semaphore:
        # created lazily so the service can be built outside an event loop
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self.pool_size)
        return self._semaphore

    def open_session(self, world_id, s=1.0, k=16, seed=0, hold_goal=False) -> Session:
        if world_id not in self.worlds:
            raise SessionError("unknown_world", f"no world {world_id!r}")
        world = self.worlds[world_id]
        if self.model.bone_count != world.bone_count:
            raise SessionError(
                "bone_count_mismatch",
                f"checkpoint has {self.model.bone_count} bones, world has {world.bone_count}",
            )
        channels = world.scene.values.shape[3]
        if self.model.channels != channels:
            raise SessionError(
                "channel_count_mismatch",
                f"checkpoint expects {self.model.channels} channels, world has {channels}",
            )
        s = _finite_float(s, "s")
        k = _int_in_range(k, 1, MAX_K, "K")
        seed = _int_in_range(seed, 0, 2**32 - 1, "seed")
        if not isinstance(hold_goal, bool):
            raise SessionError("bad_schema", "holdGoal must be a boolean")
        sid = secrets.token_hex(8)
        session = Session(sid, world, self.model, s, k, seed, hold_goal)
        self.sessions[sid] = session
        return session

    def close_session(self, sid: str) -> bool:
        return self.sessions.pop(sid, None) is not None

    def scene_payload(self, world_id: str) -> dict:
        if world_id not in self.worlds:
            raise SessionError("unknown_world", f"no world {world_id!r}")
        world = self.worlds[world_id]
        scene = world.scene
        occ = np.round(np.moveaxis(scene.values[:, :, :, OCCUPANCY_CHANNEL], 2, 0), 3)
        return {
            "worldId": world_id,
            "origin": scene.origin.tolist(),
            "voxelSize": float(scene.voxel_size),
            "shape": list(scene.values.shape[:3]),
            "channels": int(scene.values.shape[3]),
            "boneCount": int(world.bone_count),
            "fps": FPS,
            # occupancy[k][i][j] is channel 0 at grid node (i, j, k)
            "occupancy": occ.tolist(),
        }


# ---------------------------------------------------------------------------
# wire app
# ---------------------------------------------------------------------------

def _error_json(code: str, detail: str = "") -> dict:
    out = {"v": PROTOCOL_VERSION, "type": "error", "code": code}
    if detail:
        out["detail"] = detail
    return out


def _handle_text(session: Session, text: str):
    """Validate and apply one client message; returns (reply or None, is_step)."""
    try:
        msg = json.loads(text)
    except ValueError:
        return _error_json("bad_json"), False
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        return _error_json("bad_schema", "message must be an object with a type"), False
    kind = msg["type"]
    try:
        if kind == "observer":
            session.accept_observer(msg.get("t"), msg.get("q"), msg.get("p"))
            return None, False
        if kind == "set_params":
            session.set_params(msg.get("s"), msg.get("K"), msg.get("holdGoal"))
            return None, False
        if kind == "step":
            return None, True
    except SessionError as err:
        return _error_json(err.code, str(err)), False
    return _error_json("unknown_type", f"no such message type {kind!r}"), False


def create_app(service: Service, static_dir: str = None):
    app = FastAPI(title="agent behavior service")
    app.state.service = service
    status_of = {
        "unknown_world": 404,
        "unknown_session": 404,
        "bone_count_mismatch": 409,
        "channel_count_mismatch": 409,
        "bad_schema": 422,
        "bad_params": 422,
    }

    def fail(err: SessionError) -> JSONResponse:
        return JSONResponse(
            {"error": err.code, "detail": str(err)}, status_code=status_of.get(err.code, 400)
        )

    @app.get("/api/worlds")
    def list_worlds():
        return {"worlds": sorted(service.worlds)}

    @app.get("/api/scene/{world_id}")
    def get_scene(world_id: str):
        try:
            return service.scene_payload(world_id)
        except SessionError as err:
            return fail(err)

    @app.post("/api/session")
    async def open_session(body: dict):
        try:
            session = service.open_session(
                body.get("worldId"),
                body.get("s", 1.0),
                body.get("K", 16),
                body.get("seed", 0),
                body.get("holdGoal", False),
            )
        except SessionError as err:
            return fail(err)
        return {"id": session.id}

    @app.delete("/api/session/{sid}")
    def close_session(sid: str):
        if not service.close_session(sid):
            return fail(SessionError("unknown_session", f"no session {sid!r}"))
        return {"id": sid, "closed": True}

    async def send_json(ws, payload) -> None:
        try:
            await ws.send_text(json.dumps(payload))
        except Exception:
            pass  # client already gone; the step still completed

    async def run_step(session: Session, ws, snap: dict) -> None:
        try:
            pool = service.semaphore()
            await pool.acquire()
            try:
                result = await run_in_threadpool(generate_window, snap)
            finally:
                pool.release()
            session.commit(result["state"])
            reply = result["message"]
        except Exception:
            traceback.print_exc(file=sys.stderr)
            reply = _error_json("generation_failed")
        session.busy = False
        await send_json(ws, reply)

    @app.websocket("/api/session/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        await ws.accept()
        pending = set()
        try:
            while True:
                text = await ws.receive_text()
                session = service.sessions.get(sid)
                if session is None:
                    await send_json(ws, _error_json("unknown_session"))
                    break
                reply, is_step = _handle_text(session, text)
                if reply is not None:
                    await send_json(ws, reply)
                elif is_step:
                    if session.busy:
                        await send_json(ws, {"v": PROTOCOL_VERSION, "type": "busy"})
                    else:
                        session.busy = True
                        task = asyncio.ensure_future(run_step(session, ws, session.snapshot()))
                        pending.add(task)
                        task.add_done_callback(pending.discard)
        except WebSocketDisconnect:
            pass
        finally:
            for task in pending:
                await task

    if static_dir is not None:
        from starlette.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
