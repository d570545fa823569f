"""Prompting, verification, retries, and multi-stage tool plans.

The pieces that close the loop around a single-stage policy:

- a prompt source turns an observation into a contact anchor (a privileged
  oracle, a user click, a deterministic mock of a pointing model, or an
  HTTP client for a real one);
- a verifier judges a finished attempt (ground truth from the simulator,
  a deterministic noisy wrapper, or an HTTP client);
- ``run_with_retries`` chains attempts until the verifier accepts one,
  re-prompting each time and recording the verdict next to the truth;
- ``compose_tools`` strings staged tools (open / pick / drop / ...) into
  a plan, retrying each stage in place and aborting the rest on failure.

Every mock is deterministic under its seed so failure rates in tests are
exact binomial draws rather than flakes.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .episodes import Task
from .geometry import (
    AnchorFrame,
    CameraIntrinsics,
    ContactAnchor,
    GeometryError,
    deproject,
    project,
)
from .sim import (
    SIM_INTRINSICS,
    Action,
    EgoGymEnv,
    EpisodeTrace,
    FailureMode,
    Observation,
    classify_failure,
)

__all__ = [
    "PromptError",
    "PointingTimeout",
    "UnknownTool",
    "StageAborted",
    "OraclePrompt",
    "ClickPrompt",
    "MockPointing",
    "PointingModelClient",
    "PromptFollower",
    "make_prompt",
    "GroundTruthVerifier",
    "NoisyVerifier",
    "RemoteVerifier",
    "AttemptRecord",
    "RetryReport",
    "run_with_retries",
    "Tool",
    "ToolStage",
    "ToolPlan",
    "ManipulationTool",
    "StageRecord",
    "ComposeReport",
    "compose_tools",
    "scripted_drop",
    "scripted_move_base",
    "oracle_toolkit",
]


class PromptError(RuntimeError):
    """A prompt source failed to produce an anchor."""


class PointingTimeout(PromptError):
    """The remote pointing model did not answer in time."""


class UnknownTool(ValueError):
    """A plan references a tool the toolkit does not provide."""


class StageAborted(RuntimeError):
    """A composite plan stopped early; ``report`` holds what happened."""

    def __init__(self, message: str, report: "ComposeReport"):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# prompt sources


def _target_pixel(obs: Observation, k: CameraIntrinsics) -> tuple[float, float, float]:
    """Project the stage target's grasp point; returns (u, v, z-depth)."""
    cam_pt = obs.camera_pose.inverse().transform_point(obs.privileged_pose.trans)
    u, v = project(k, cam_pt)
    return float(u), float(v), float(cam_pt[2])


def _anchor_at_pixel(obs: Observation, k: CameraIntrinsics, u: float, v: float) -> ContactAnchor:
    """Deproject a pixel through the rendered depth map."""
    if obs.depth is None:
        raise PromptError("pixel prompts need a rendered depth image")
    ui = int(np.clip(round(u), 0, k.width - 1))
    vi = int(np.clip(round(v), 0, k.height - 1))
    return deproject(k, float(u), float(v), float(obs.depth[vi, ui]))


@dataclass(frozen=True)
class OraclePrompt:
    """Privileged anchor: the exact grasp point of the stage target.

    Projects the target point and deprojects it at its own continuous
    depth, so the anchor reproduces the point to round-off regardless of
    what else is in the scene.
    """

    def point(self, obs: Observation, query: str, k: CameraIntrinsics) -> ContactAnchor:
        u, v, z = _target_pixel(obs, k)
        return deproject(k, u, v, z)


@dataclass(frozen=True)
class ClickPrompt:
    """A user click at pixel (u, v), deprojected through the depth map."""

    u: float
    v: float

    def point(self, obs: Observation, query: str, k: CameraIntrinsics) -> ContactAnchor:
        return _anchor_at_pixel(obs, k, float(self.u), float(self.v))


@dataclass(eq=False)
class MockPointing:
    """Deterministic stand-in for a language-conditioned pointing model.

    With probability ``alpha`` the prompt lands on a uniformly chosen
    visible distractor pixel instead of the target; pixel noise with
    std ``sigma`` is added either way. ``alpha`` is drawn per call and
    does not depend on how many distractors there are, only on whether
    at least one is visible. With ``sigma == 0`` and no confusion the
    anchor equals the oracle's exactly.
    """

    sigma: float = 0.0
    alpha: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        self._rng = np.random.default_rng(self.seed)

    def _distractor_pixel(self, obs: Observation) -> tuple[float, float] | None:
        others = [b for b in obs.object_body_ids if b != obs.target_body_id]
        if not others or obs.segmentation is None:
            return None
        visible = [b for b in others if np.any(obs.segmentation == b)]
        if not visible:
            return None
        body = visible[int(self._rng.integers(len(visible)))]
        rows = np.argwhere(obs.segmentation == body)
        v, u = rows[int(self._rng.integers(len(rows)))]
        return float(u), float(v)

    def point(self, obs: Observation, query: str, k: CameraIntrinsics) -> ContactAnchor:
        confused = self.alpha > 0 and self._rng.random() < self.alpha
        hit = self._distractor_pixel(obs) if confused else None
        if hit is None:
            u, v, z = _target_pixel(obs, k)
            if self.sigma == 0:
                return deproject(k, u, v, z)
        else:
            u, v = hit
        if self.sigma > 0:
            u += float(self._rng.normal()) * self.sigma
            v += float(self._rng.normal()) * self.sigma
        return _anchor_at_pixel(obs, k, u, v)


@dataclass(frozen=True)
class PointingModelClient:
    """HTTP client for a pointing model.

    Sends ``{"image": <png base64>, "query": str}`` and expects
    ``{"u": float, "v": float}`` back; the pixel is deprojected through
    the local depth map.
    """

    endpoint: str
    timeout: float = 5.0

    def point(self, obs: Observation, query: str, k: CameraIntrinsics) -> ContactAnchor:
        import requests

        if obs.rgb is None:
            raise PromptError("pointing model needs a rendered color image")
        payload = {"image": encode_png(obs.rgb), "query": query}
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
        except requests.Timeout as e:
            raise PointingTimeout(f"pointing model at {self.endpoint} timed out") from e
        except requests.RequestException as e:
            raise PromptError(f"pointing model request failed: {e}") from e
        if resp.status_code != 200:
            raise PromptError(f"pointing model returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            u, v = float(body["u"]), float(body["v"])
        except (ValueError, KeyError, TypeError) as e:
            raise PromptError(f"malformed pointing response: {e}") from e
        return _anchor_at_pixel(obs, k, u, v)


def encode_png(rgb: np.ndarray) -> str:
    """Base64-encoded PNG of an (H, W, 3) uint8 image."""
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def make_prompt(
    source,
    obs: Observation,
    query: str = "",
    intrinsics: CameraIntrinsics = SIM_INTRINSICS,
) -> ContactAnchor:
    """Resolve a prompt source into a camera-frame contact anchor."""
    anchor = source.point(obs, query, intrinsics)
    if anchor.frame is not AnchorFrame.CAMERA:
        raise PromptError("prompt sources must produce camera-frame anchors")
    if not np.all(np.isfinite(anchor.point)):
        raise PromptError("prompt produced a non-finite anchor")
    return anchor


class PromptFollower:
    """Scripted agent that trusts its prompt completely.

    Drives the fingertips to the anchored point, closes until the grip
    stalls, then lifts straight up. Reads only unprivileged observation
    fields (camera pose, measured aperture), so its success rate is a
    direct measure of prompt quality: hand it oracle anchors and it
    picks; hand it a confused prompt and it picks the wrong thing.
    """

    wants_env = False
    wants_pixels = False

    def __init__(self, anchor: ContactAnchor, *, approach_step: float = 0.045,
                 reach_tol: float = 0.008, lift_step: float = 0.04,
                 min_close: float = 0.2, stall_eps: float = 0.01):
        if anchor.frame is not AnchorFrame.CAMERA:
            raise PromptError("follower prompts must be camera-frame anchors")
        self._anchor = anchor
        self._approach = approach_step
        self._reach_tol = reach_tol
        self._lift = lift_step
        self._min_close = min_close
        self._stall_eps = stall_eps
        self._goal: np.ndarray | None = None
        self._start_meas: float | None = None
        self._prev_meas: float | None = None
        self._holding = False

    def act(self, obs: Observation) -> Action:
        from .sim.core import TIP_OFFSET

        pose = obs.camera_pose
        if self._goal is None:
            # the anchor names a world point; pin it at the first view
            self._goal = pose.transform_point(self._anchor.point)
            self._start_meas = float(obs.aperture_meas)
        meas = float(obs.aperture_meas)
        prev, self._prev_meas = self._prev_meas, meas
        if not self._holding and prev is not None:
            closed = (self._start_meas - meas) >= self._min_close
            stalled = abs(meas - prev) < self._stall_eps
            if closed and stalled:
                self._holding = True
        rot = pose.rotation_matrix()
        if self._holding:
            return Action(rot.T @ np.array([0.0, 0.0, self._lift]),
                          np.zeros(3), 0.0)
        tip = rot @ TIP_OFFSET + pose.trans
        d = self._goal - tip
        dist = float(np.linalg.norm(d))
        if dist > self._reach_tol:
            if dist > self._approach:
                d *= self._approach / dist
            return Action(rot.T @ d, np.zeros(3), 1.0)
        return Action(np.zeros(3), np.zeros(3), 0.0)


# ---------------------------------------------------------------------------
# verifiers


@dataclass(frozen=True)
class AttemptRecord:
    """One attempt of one stage: what the policy did and who believed it."""

    attempt: int
    seed: int
    success: bool
    verified: bool
    max_lift: float
    steps: int
    failure: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "attempt": self.attempt,
            "seed": self.seed,
            "success": self.success,
            "verified": self.verified,
            "max_lift": self.max_lift,
            "steps": self.steps,
            "failure": self.failure,
            "error": self.error,
        }


@dataclass(frozen=True)
class GroundTruthVerifier:
    """Reports the simulator's own success predicate."""

    def verify(self, record: AttemptRecord) -> bool:
        return bool(record.success)


@dataclass(frozen=True)
class NoisyVerifier:
    """Flips the true verdict at configured rates, deterministically.

    The draw is seeded by (verifier seed, episode seed, attempt index),
    so a given attempt always gets the same verdict but retries of it
    are fresh draws.
    """

    false_positive: float = 0.0
    false_negative: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("false_positive", "false_negative"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {r}")

    def verify(self, record: AttemptRecord) -> bool:
        rng = np.random.default_rng(
            [self.seed, int(record.seed) & (2**63 - 1), record.attempt]
        )
        if record.success:
            return bool(rng.random() >= self.false_negative)
        return bool(rng.random() < self.false_positive)


@dataclass(frozen=True)
class RemoteVerifier:
    """HTTP client for an episode verifier.

    Sends ``{"images": [<png base64>, ...], "task": str}`` and expects
    ``{"success": bool}``.
    """

    endpoint: str
    task: str = "pick"
    timeout: float = 5.0

    def verify(self, record: AttemptRecord, images: Sequence[np.ndarray] = ()) -> bool:
        import requests

        payload = {"images": [encode_png(im) for im in images], "task": self.task}
        try:
            resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            return bool(resp.json()["success"])
        except requests.Timeout as e:
            raise PointingTimeout(f"verifier at {self.endpoint} timed out") from e
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise PromptError(f"verifier request failed: {e}") from e


# ---------------------------------------------------------------------------
# retries


@dataclass(frozen=True)
class RetryReport:
    """All attempts of one stage, oldest first."""

    attempts: tuple[AttemptRecord, ...]
    verified_success: bool
    true_success: bool

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)

    def to_dict(self) -> dict:
        return {
            "attempts": [a.to_dict() for a in self.attempts],
            "verified_success": self.verified_success,
            "true_success": self.true_success,
        }


def _resolve_policy(policy, anchor: ContactAnchor):
    """A policy argument is either a ready agent or a factory over anchors."""
    if hasattr(policy, "act"):
        return policy
    if callable(policy):
        return policy(anchor)
    raise TypeError("policy must expose .act() or be a factory anchor -> agent")


def _rollout(env: EgoGymEnv, agent, obs: Observation):
    """Drive one episode to its done flag; returns (info, steps)."""
    wants_env = bool(getattr(agent, "wants_env", False))
    info = {"success": env.state.success, "max_lift": env.state.max_lift}
    steps = 0
    done = env.state.done
    while not done:
        action = agent.act(env) if wants_env else agent.act(obs)
        if not isinstance(action, Action):
            action = Action.from_vector(np.asarray(action, dtype=float))
        obs, _, done, info = env.step(action)
        steps += 1
    return info, steps


def run_with_retries(
    env: EgoGymEnv,
    policy,
    source,
    verifier,
    *,
    max_retries: int = 10,
    query: str = "",
    reset: str = "scene",
    intrinsics: CameraIntrinsics = SIM_INTRINSICS,
) -> RetryReport:
    """Attempt a stage until the verifier accepts or retries run out.

    Makes at most ``max_retries + 1`` attempts. Each attempt re-prompts
    the source on a fresh observation; a prompt or rollout error fails
    that attempt and the loop moves on. ``reset="scene"`` restarts the
    env's own task from its initial state; ``reset="home"`` returns the
    gripper home but keeps scene state, which is what composite plans
    need between attempts. Records carry both the verifier's verdict
    and the ground-truth outcome; the loop stops on the first verified
    attempt.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be non-negative")
    if reset not in ("scene", "home"):
        raise ValueError("reset must be 'scene' or 'home'")
    records: list[AttemptRecord] = []
    for attempt in range(max_retries + 1):
        if reset == "scene":
            obs = env.reset()
        else:
            env.home()
            obs = env.observe()
        try:
            anchor = make_prompt(source, obs, query, intrinsics)
            agent = _resolve_policy(policy, anchor)
            info, steps = _rollout(env, agent, obs)
        except (PromptError, GeometryError) as e:
            records.append(AttemptRecord(
                attempt=attempt, seed=env.seed, success=False, verified=False,
                max_lift=0.0, steps=0, error=str(e),
            ))
            continue
        success = bool(info["success"])
        failure = None
        scene_target = next(
            (j for j, o in enumerate(env.scene.objects) if o.is_target), None
        )
        if env.stage_task is Task.PICK and env.stage_target_obj in (None, scene_target):
            # the taxonomy is defined relative to the scene's own target,
            # so staged picks of other objects stay unclassified
            trace = dataclasses.replace(
                EpisodeTrace.from_state(env.scene, env.state), task=Task.PICK
            )
            mode = classify_failure(trace)
            if mode is not FailureMode.SUCCESS:
                failure = mode.value
        record = AttemptRecord(
            attempt=attempt, seed=env.seed, success=success, verified=False,
            max_lift=float(info["max_lift"]), steps=steps, failure=failure,
        )
        verified = bool(verifier.verify(record))
        records.append(dataclasses.replace(record, verified=verified))
        if verified:
            break
    last = records[-1]
    return RetryReport(
        attempts=tuple(records),
        verified_success=last.verified,
        true_success=last.success,
    )


# ---------------------------------------------------------------------------
# tool composition


class Tool(str, Enum):
    OPEN = "open"
    PICK = "pick"
    CLOSE = "close"
    DROP = "drop"
    MOVE_BASE = "move_base"


_MANIPULATION_TASK = {
    Tool.OPEN: Task.OPEN,
    Tool.PICK: Task.PICK,
    Tool.CLOSE: Task.CLOSE,
}


@dataclass(frozen=True)
class ToolStage:
    """One step of a plan: which tool, on what, with how many retries."""

    tool: Tool
    target: int | None = None
    query: str = ""
    max_retries: int = 10

    def __post_init__(self):
        if not isinstance(self.tool, Tool):
            object.__setattr__(self, "tool", Tool(self.tool))
        if not 0 <= self.max_retries <= 10:
            raise ValueError("per-stage max_retries must be in [0, 10]")


@dataclass(frozen=True)
class ToolPlan:
    stages: tuple[ToolStage, ...]

    def __post_init__(self):
        if not isinstance(self.stages, tuple):
            object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a plan needs at least one stage")

    @staticmethod
    def from_json(text: str) -> "ToolPlan":
        doc = json.loads(text)
        stages = []
        for raw in doc["stages"]:
            try:
                tool = Tool(raw["tool"])
            except ValueError as e:
                raise UnknownTool(f"unknown tool {raw['tool']!r}") from e
            stages.append(ToolStage(
                tool=tool,
                target=raw.get("target"),
                query=raw.get("query", ""),
                max_retries=int(raw.get("max_retries", 10)),
            ))
        return ToolPlan(tuple(stages))

    def to_json(self) -> str:
        return json.dumps({"stages": [
            {"tool": s.tool.value, "target": s.target, "query": s.query,
             "max_retries": s.max_retries}
            for s in self.stages
        ]})


@dataclass(frozen=True)
class ManipulationTool:
    """A staged skill: a policy plus how to prompt and verify it."""

    policy: object
    source: object
    verifier: object


@dataclass(frozen=True)
class StageRecord:
    index: int
    tool: Tool
    status: str  # completed | failed | not_attempted
    attempts: int
    verified_success: bool
    true_success: bool

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "tool": self.tool.value,
            "status": self.status,
            "attempts": self.attempts,
            "verified_success": self.verified_success,
            "true_success": self.true_success,
        }


@dataclass(frozen=True)
class ComposeReport:
    stages: tuple[StageRecord, ...]

    @property
    def success(self) -> bool:
        return all(s.status == "completed" for s in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages],
                "success": self.success}


def scripted_drop(env: EgoGymEnv, stage: ToolStage | None = None) -> bool:
    """Carry the held object aside and release it.

    Runs on the live state (no homing: that would already drop the
    object where it was picked). Succeeds when nothing is attached
    afterwards.
    """
    if env.state.attached_kind != "object":
        return False
    # the previous stage ended with done set; re-arm it before stepping
    env.set_stage(env.stage_task, env.stage_target_obj, env.stage_target_art)
    zone = np.array([0.52, 0.0, 0.30])
    for _ in range(14):
        ee = env.state.ee_pose
        tip = ee.rotation_matrix() @ np.array([0.0, 0.0, 0.15]) + ee.trans
        d = zone - tip
        dist = float(np.linalg.norm(d))
        if dist < 0.02:
            break
        if dist > 0.045:
            d *= 0.045 / dist
        env.step(Action(ee.rotation_matrix().T @ d, np.zeros(3), 0.0))
    for _ in range(4):
        if env.state.attached_kind == "":
            break
        env.step(Action(np.zeros(3), np.zeros(3), 1.0))
    return env.state.attached_kind == ""


def scripted_move_base(env: EgoGymEnv, stage: ToolStage | None = None) -> bool:
    """Base motion is out of scope for the tabletop sim; always succeeds."""
    return True


def compose_tools(
    plan: ToolPlan,
    env: EgoGymEnv,
    tools: Mapping[Tool, ManipulationTool | Callable],
    *,
    intrinsics: CameraIntrinsics = SIM_INTRINSICS,
) -> ComposeReport:
    """Run a staged plan on one persistent scene.

    Manipulation stages re-target the env and retry with home resets, so
    scene progress (an opened door, a lifted object) carries across
    stages. Scripted stages act on the live state directly. A stage whose
    verifier never accepts aborts the plan: the remaining stages are
    recorded as not attempted and ``StageAborted`` carries the report.
    Verifier false positives are not corrected here; later stages simply
    run against the true state, which is the point of measuring both.
    """
    for stage in plan.stages:
        if stage.tool not in tools:
            raise UnknownTool(f"no tool registered for {stage.tool.value!r}")
        if isinstance(tools[stage.tool], ManipulationTool) and stage.tool not in _MANIPULATION_TASK:
            raise UnknownTool(f"{stage.tool.value!r} is a scripted tool, not a staged skill")

    records: list[StageRecord] = []
    for i, stage in enumerate(plan.stages):
        tool = tools[stage.tool]
        if isinstance(tool, ManipulationTool):
            task = _MANIPULATION_TASK[stage.tool]
            env.set_stage(
                task,
                target_obj=stage.target if task is Task.PICK else None,
                target_art=stage.target if task is not Task.PICK else None,
            )
            rr = run_with_retries(
                env, tool.policy, tool.source, tool.verifier,
                max_retries=stage.max_retries, query=stage.query,
                reset="home", intrinsics=intrinsics,
            )
            ok = rr.verified_success
            records.append(StageRecord(
                index=i, tool=stage.tool,
                status="completed" if ok else "failed",
                attempts=rr.attempts_used,
                verified_success=rr.verified_success,
                true_success=rr.true_success,
            ))
        else:
            ok = bool(tool(env, stage))
            records.append(StageRecord(
                index=i, tool=stage.tool,
                status="completed" if ok else "failed",
                attempts=1, verified_success=ok, true_success=ok,
            ))
        if not ok:
            for j in range(i + 1, len(plan.stages)):
                records.append(StageRecord(
                    index=j, tool=plan.stages[j].tool, status="not_attempted",
                    attempts=0, verified_success=False, true_success=False,
                ))
            report = ComposeReport(tuple(records))
            raise StageAborted(
                f"stage {i} ({stage.tool.value}) failed after "
                f"{records[i].attempts} attempts", report,
            )
    return ComposeReport(tuple(records))


def oracle_toolkit(verifier=None) -> dict:
    """A toolkit driven entirely by the privileged expert."""
    from .sim.oracle import OraclePolicy

    v = verifier if verifier is not None else GroundTruthVerifier()
    skill = ManipulationTool(OraclePolicy(), OraclePrompt(), v)
    return {
        Tool.OPEN: skill,
        Tool.PICK: skill,
        Tool.CLOSE: skill,
        Tool.DROP: scripted_drop,
        Tool.MOVE_BASE: scripted_move_base,
    }
