"""HTTP service for interactive simulator sessions.

Exposes seeded EgoGym episodes over a small JSON API (schema version 1)
so a browser client can look through the wrist camera, click a contact
prompt, and watch the policy roll out:

    POST /sessions                      {task, seed, distractor_count}
    GET  /sessions/{id}/frame?step=N    current or historical PNG render
    POST /sessions/{id}/prompt          {"u", "v"} or {"x", "y", "z"}
    POST /sessions/{id}/rollout         {"max_steps"?} -> ndjson stream
    GET  /sessions/{id}/events?from=N   replay of the event log

A session moves AwaitingPrompt -> RollingOut -> Finished and accepts
exactly one command at a time (409 otherwise). The rollout itself runs
on a worker thread that owns the environment; the streaming response
merely tails the session's event log, so a dropped connection never
stops the episode and a reconnect replays from any offset. Events carry
frames by reference (a URL per step), never pixels: the log stays small
and two runs with the same (task, seed, prompt) produce identical logs.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.responses import StreamingResponse
from PIL import Image

from .evaluation import ModelLoadFailure, load_policy
from .episodes import Task
from .geometry import (
    AnchorFrame,
    ContactAnchor,
    GeometryError,
    deproject,
    project,
    propagate_anchor,
)
from .sim import Action, EgoGymEnv
from .sim.core import SIM_INTRINSICS
from .sim.failure import EpisodeTrace, classify_failure

__all__ = ["SCHEMA_VERSION", "create_app"]

SCHEMA_VERSION = 1

_TASKS = {"pick": Task.PICK, "open": Task.OPEN, "close": Task.CLOSE}

# aperture-closure freeze rule, matching the follower policy
_FREEZE_MIN_CLOSE = 0.2
_FREEZE_STALL_EPS = 0.01


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _state_etag(state) -> str:
    """Content hash of the full simulator state; doubles as the frame ETag."""
    h = hashlib.sha256()
    h.update(state.ee_pose.quat.tobytes())
    h.update(state.ee_pose.trans.tobytes())
    h.update(np.array([state.aperture_cmd, state.aperture_meas, state.max_lift,
                       state.initial_target_z], dtype=float).tobytes())
    h.update(np.array(state.qs, dtype=float).tobytes())
    for pose in state.object_poses:
        h.update(pose.quat.tobytes())
        h.update(pose.trans.tobytes())
    tail = (state.attached_kind, str(state.attached_index),
            str(state.step_count), str(state.done), str(state.success))
    h.update("|".join(tail).encode())
    return h.hexdigest()


def _pose_json(pose) -> dict:
    return {"quaternion": [float(x) for x in pose.quat],
            "translation": [float(x) for x in pose.trans]}


def _anchor_json(anchor: ContactAnchor) -> dict:
    try:
        u, v = project(SIM_INTRINSICS, anchor.point)
        pixel = [float(u), float(v)]
    except GeometryError:
        pixel = None
    return {"point": [float(x) for x in anchor.point],
            "frame": anchor.frame.value,
            "frozen": bool(anchor.frozen),
            "pixel": pixel}


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status, {"error": code, "message": message})


class _AnchorTracker:
    """The canonical streamed anchor.

    Re-expressed through the current camera each step (constant world
    point) until the measured aperture has closed by ``_FREEZE_MIN_CLOSE``
    and stalled within ``_FREEZE_STALL_EPS``; from then on the frozen
    anchor is repeated verbatim.
    """

    def __init__(self, anchor: ContactAnchor, camera_pose, aperture_meas: float):
        self._ref = anchor
        self._ref_pose = camera_pose
        self._start = float(aperture_meas)
        self._prev = float(aperture_meas)
        self.current = anchor

    def update(self, camera_pose, aperture_meas: float) -> ContactAnchor:
        meas = float(aperture_meas)
        if not self.current.frozen:
            moved = propagate_anchor(camera_pose, self._ref_pose, self._ref)
            closed = (self._start - meas) >= _FREEZE_MIN_CLOSE
            stalled = abs(meas - self._prev) < _FREEZE_STALL_EPS
            if closed and stalled:
                moved = ContactAnchor(moved.point, AnchorFrame.CAMERA, frozen=True)
            self.current = moved
        self._prev = meas
        return self.current


class _Session:
    """One environment plus its event log; owned by one worker at a time."""

    def __init__(self, sid: str, task_name: str, seed: int,
                 distractor_count: int, policy):
        self.id = sid
        self.task_name = task_name
        self.seed = seed
        self.distractor_count = distractor_count
        self.policy = policy
        self.env = EgoGymEnv(_TASKS[task_name], seed=seed,
                             distractor_count=distractor_count, images=True)
        self.obs = self.env.observe()
        self.state_name = "AwaitingPrompt"
        self.anchor: ContactAnchor | None = None
        self.tracker: _AnchorTracker | None = None
        self.agent = None
        self.wants_env = False
        self.log: list[dict] = []
        self.frames: dict[int, tuple[bytes, str, dict]] = {}
        self.current_step = 0
        self.mutex = threading.Lock()
        self.cond = threading.Condition(self.mutex)
        self.command = threading.Lock()  # held across a whole rollout
        self._cache_frame()

    def _cache_frame(self) -> None:
        step = self.env.state.step_count
        meta = {"step": step,
                "state": self.state_name,
                "camera_pose": _pose_json(self.obs.camera_pose),
                "aperture": float(self.obs.aperture_meas),
                "done": bool(self.env.state.done)}
        self.frames[step] = (_png_bytes(self.obs.rgb),
                             _state_etag(self.env.state), meta)
        self.current_step = step

    def append_event(self, event: dict) -> None:
        with self.cond:
            event["index"] = len(self.log)
            self.log.append(event)
            self.cond.notify_all()

    def classify(self) -> str:
        if _TASKS[self.task_name] is Task.PICK:
            trace = EpisodeTrace.from_state(self.env.scene, self.env.state)
            return classify_failure(trace).value
        return "Success" if self.env.state.success else "DidNotSucceed"


def _run_rollout(s: _Session, max_steps: int | None) -> None:
    """Worker body: steps the episode to its end (or budget), appending
    events as it goes. Always terminates the log and releases the
    command lock, even on internal failure."""
    try:
        taken = 0
        while not s.env.state.done and (max_steps is None or taken < max_steps):
            action = s.agent.act(s.env) if s.wants_env else s.agent.act(s.obs)
            if not isinstance(action, Action):
                action = Action.from_vector(np.asarray(action, dtype=float))
            obs, reward, done, _ = s.env.step(action)
            taken += 1
            anchor = s.tracker.update(obs.camera_pose, obs.aperture_meas)
            step = s.env.state.step_count
            event = {
                "type": "step",
                "step": step,
                "action": {
                    "translation": [float(x) for x in action.delta_translation],
                    "rotation": [float(x) for x in action.delta_rotation],
                    "aperture": float(action.aperture_cmd),
                },
                "reward": float(reward),
                "anchor": _anchor_json(anchor),
                # relative to the session resource, so two runs with the
                # same (task, seed, prompt) write identical logs
                "frame": f"frame?step={step}",
                "done": bool(done),
                "failure": None,
            }
            with s.mutex:
                s.obs = obs
                s._cache_frame()
            s.append_event(event)
        finished = bool(s.env.state.done)
        failure = s.classify() if finished else None
        with s.mutex:
            if finished:
                s.state_name = "Finished"
        s.append_event({"type": "terminal", "step": s.env.state.step_count,
                        "done": finished, "failure": failure})
    except Exception as e:  # noqa: BLE001 - must surface on the stream
        with s.mutex:
            s.state_name = "Finished"
        s.append_event({"type": "error", "done": True,
                        "error": f"{type(e).__name__}: {e}"})
    finally:
        s.command.release()


def _follow(s: _Session, start: int):
    """Yield ndjson lines from the log, starting at ``start``, until the
    rollout that began there terminates."""
    i = start
    while True:
        with s.cond:
            while len(s.log) <= i:
                s.cond.wait(timeout=30.0)
            events = list(s.log[i:])
        for event in events:
            yield json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n"
            i += 1
            if event["type"] in ("terminal", "error"):
                return


def create_app(policy="follower") -> FastAPI:
    """Build the service around one configured policy.

    ``policy`` is ``"follower"``, ``"oracle"``, or a path to a trained
    model's JSON; a path that fails to load surfaces as 503 on session
    creation rather than at startup, so the service can come up first
    and be given the model later. An already-built agent (or a factory
    taking the prompt anchor) is also accepted for embedding.
    """
    app = FastAPI(title="cap session service", version=str(SCHEMA_VERSION))
    registry: dict[str, _Session] = {}
    registry_lock = threading.Lock()
    loaded: dict[str, object] = {}

    def configured_policy():
        if "policy" not in loaded:
            loaded["policy"] = (load_policy(policy)
                                if isinstance(policy, str) else policy)
        return loaded["policy"]

    def get_session(sid: str) -> _Session:
        with registry_lock:
            s = registry.get(sid)
        if s is None:
            raise _error(404, "UnknownSession", f"no session {sid!r}")
        return s

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        task_name = body.get("task")
        if task_name not in _TASKS:
            raise _error(400, "UnknownTask", f"task must be one of "
                         f"{sorted(_TASKS)}, got {task_name!r}")
        try:
            seed = int(body.get("seed", 0))
            count = int(body.get("distractor_count", 0))
        except (TypeError, ValueError) as e:
            raise _error(400, "BadRequest", str(e)) from e
        if seed < 0 or count < 0:
            raise _error(400, "BadRequest",
                         "seed and distractor_count must be >= 0")
        try:
            the_policy = configured_policy()
        except ModelLoadFailure as e:
            raise _error(503, "ModelUnavailable", str(e)) from e
        sid = uuid.uuid4().hex[:16]
        session = _Session(sid, task_name, seed, count, the_policy)
        with registry_lock:
            registry[sid] = session
        k = SIM_INTRINSICS
        return {"version": SCHEMA_VERSION, "id": sid, "task": task_name,
                "seed": seed, "distractor_count": count,
                "state": session.state_name,
                "horizon": session.env.config.horizon,
                "width": k.width, "height": k.height,
                "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                               "width": k.width, "height": k.height}}

    @app.get("/sessions/{sid}/frame")
    def get_frame(sid: str, step: int | None = None):
        s = get_session(sid)
        with s.mutex:
            key = s.current_step if step is None else step
            entry = s.frames.get(key)
            state_name = s.state_name
        if entry is None:
            raise _error(404, "UnknownFrame", f"no frame for step {key}")
        png, etag, meta = entry
        meta = dict(meta, state=state_name)
        return Response(png, media_type="image/png",
                        headers={"ETag": f'"{etag}"',
                                 "X-Frame-Meta": json.dumps(meta)})

    @app.post("/sessions/{sid}/prompt")
    def post_prompt(sid: str, body: dict):
        s = get_session(sid)
        with s.mutex:
            if s.state_name != "AwaitingPrompt":
                raise _error(409, "WrongState",
                             f"prompt requires AwaitingPrompt, session is "
                             f"{s.state_name}")
            obs = s.obs
            has_pixel = "u" in body and "v" in body
            has_point = all(key in body for key in ("x", "y", "z"))
            if has_pixel == has_point:
                raise _error(400, "BadPrompt",
                             "give either pixel {u, v} or point {x, y, z}")
            k = SIM_INTRINSICS
            if has_pixel:
                try:
                    u, v = float(body["u"]), float(body["v"])
                except (TypeError, ValueError) as e:
                    raise _error(400, "BadPrompt", str(e)) from e
                col, row = int(round(u)), int(round(v))
                if not (0 <= col < k.width and 0 <= row < k.height):
                    raise _error(400, "BadPrompt",
                                 f"pixel ({u}, {v}) outside {k.width}x{k.height}")
                depth = float(obs.depth[row, col])
                if depth <= 0.0:
                    raise _error(422, "NoDepthAtPixel",
                                 f"no surface under pixel ({col}, {row})")
                anchor = deproject(k, u, v, depth)
            else:
                point = np.array([body["x"], body["y"], body["z"]], dtype=float)
                if not np.all(np.isfinite(point)) or point[2] <= 0:
                    raise _error(400, "BadPrompt",
                                 "point must be finite and in front of the camera")
                anchor = ContactAnchor(point, AnchorFrame.CAMERA)
            s.anchor = anchor
            s.tracker = _AnchorTracker(anchor, obs.camera_pose, obs.aperture_meas)
            s.agent = None  # a new prompt re-conditions the policy
            return {"version": SCHEMA_VERSION, "state": s.state_name,
                    "anchor": _anchor_json(anchor)}

    @app.post("/sessions/{sid}/rollout")
    def start_rollout(sid: str, body: dict | None = None):
        s = get_session(sid)
        max_steps = None
        if body and body.get("max_steps") is not None:
            try:
                max_steps = int(body["max_steps"])
            except (TypeError, ValueError) as e:
                raise _error(400, "BadRequest", str(e)) from e
            if max_steps < 0:
                raise _error(400, "BadRequest", "max_steps must be >= 0")
        if not s.command.acquire(blocking=False):
            raise _error(409, "CommandInFlight",
                         "a rollout is already running for this session")
        try:
            with s.mutex:
                if s.state_name == "Finished":
                    raise _error(409, "WrongState", "session is Finished")
                if s.anchor is None:
                    raise _error(409, "WrongState", "no prompt set")
                s.state_name = "RollingOut"
                if s.agent is None:
                    p = s.policy
                    s.agent = p if hasattr(p, "act") else p(s.anchor)
                    s.wants_env = bool(getattr(s.agent, "wants_env", False))
                start = len(s.log)
        except Exception:
            s.command.release()
            raise
        threading.Thread(target=_run_rollout, args=(s, max_steps),
                         daemon=True).start()
        return StreamingResponse(_follow(s, start),
                                 media_type="application/x-ndjson")

    @app.get("/sessions/{sid}/events")
    def get_events(sid: str, from_index: int = Query(0, alias="from", ge=0)):
        s = get_session(sid)
        with s.mutex:
            events = list(s.log[from_index:])
            return {"version": SCHEMA_VERSION, "state": s.state_name,
                    "from": from_index, "total": len(s.log), "events": events}

    return app
