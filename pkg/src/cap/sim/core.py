"""Kinematic simulation core: state, stepping, grasping, articulation, rendering glue.

The embodiment is a free-flying camera/gripper rig. Quasi-static rules,
no forces: objects move only while attached to the gripper; released
objects teleport straight down onto whatever supports them. The gripper
closes by slewing the measured aperture toward the command, stalling at
an object's width when the fingers straddle it; a stalled close attaches
the body, reopening past the width by a fixed margin releases it. While
a handle is held, commanded motion is projected onto the joint
coordinate and the gripper rides the joint.

Collision is checked for the fingertip points only, against static
"blocking" geometry (support surface, cabinet walls, door/drawer
bodies), with the translation swept in substeps so thin panels cannot
be tunneled through. Graspable bodies never block.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..episodes import Task
from ..geometry import (
    CameraIntrinsics,
    RigidTransform,
    mirror_transform,
    rotvec_to_quat,
    transform_point,
)
from .render import RenderSettings, render_bodies
from .scene import (
    ArticulationKind,
    Primitive,
    SceneSpec,
    generate_scene,
    handle_pose,
    handle_velocity,
    panel_pose,
)

__all__ = [
    "SIM_INTRINSICS",
    "TIP_OFFSET",
    "FINGER_BODY_ID",
    "SimConfig",
    "Action",
    "Observation",
    "SimState",
    "EpisodeFinished",
    "Body",
    "scene_bodies",
    "mirror_bodies",
    "reset_state",
    "sim_step",
    "render_state",
    "EgoGymEnv",
    "make",
    "ENV_NAMES",
]

SIM_INTRINSICS = CameraIntrinsics(fx=200.0, fy=200.0, cx=111.5, cy=111.5, width=224, height=224)
TIP_OFFSET = np.array([0.0, 0.0, 0.15])
FINGER_BODY_ID = 99
SUPPORT_BODY_ID = 1
_WALL_T = 0.012


class EpisodeFinished(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class SimConfig:
    horizon: int = 80
    max_gap: float = 0.08  # fingertip separation at aperture 1, meters
    aperture_slew: float = 0.15  # max aperture change per step
    straddle_eps: float = 0.005  # tip-to-surface distance that counts as touching
    detach_margin: float = 0.05  # reopen beyond stall width by this much to release
    trans_clamp: float = 0.05  # per-step translation bound, meters
    rot_clamp: float = 0.2  # per-step rotation bound, radians
    pick_success: float = 0.03  # lift threshold, strict
    open_success_q: float = 0.9
    close_success_q: float = 0.05
    lift_partial: float = 0.005
    closed_eps: float = 0.02
    finger_half: tuple = (0.005, 0.011, 0.03)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class Action:
    """Camera-frame end-effector delta plus absolute gripper command."""

    delta_translation: np.ndarray
    delta_rotation: np.ndarray
    aperture_cmd: float

    def __post_init__(self):
        t = np.asarray(self.delta_translation, dtype=float).reshape(3)
        r = np.asarray(self.delta_rotation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r)) and math.isfinite(self.aperture_cmd)):
            raise ValueError("non-finite action")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "delta_translation", t)
        object.__setattr__(self, "delta_rotation", r)

    @staticmethod
    def zero(aperture_cmd: float = 1.0) -> "Action":
        return Action(np.zeros(3), np.zeros(3), aperture_cmd)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.delta_translation, self.delta_rotation, [self.aperture_cmd]]
        )

    @staticmethod
    def from_vector(v) -> "Action":
        v = np.asarray(v, dtype=float).reshape(7)
        return Action(v[:3], v[3:6], float(v[6]))


@dataclass(frozen=True)
class Observation:
    """What the policy sees, plus privileged fields for oracles and mocks."""

    rgb: np.ndarray | None
    depth: np.ndarray | None  # meters, 0 = no hit
    segmentation: np.ndarray | None  # body ids, 0 = background
    camera_pose: RigidTransform
    aperture_meas: float
    privileged_pose: RigidTransform
    target_body_id: int
    object_body_ids: tuple = ()


@dataclass(frozen=True)
class SimState:
    ee_pose: RigidTransform
    aperture_cmd: float
    aperture_meas: float
    attached_kind: str = ""  # "", "object", "handle"
    attached_index: int = -1
    attach_rel: RigidTransform | None = None
    attach_step: int = -1
    qs: tuple = ()
    object_poses: tuple = ()
    step_count: int = 0
    max_lift: float = 0.0
    initial_target_z: float = 0.0
    contacts: tuple = ()  # ((key, first_step), ...)
    done: bool = False
    success: bool = False

    def contact_dict(self) -> dict:
        return dict(self.contacts)


@dataclass(frozen=True)
class Body:
    """One renderable/collidable primitive instance."""

    name: str
    kind: int
    half: np.ndarray
    pose: RigidTransform
    color: np.ndarray
    body_id: int
    graspable_key: tuple | None = None  # ("object", j) or ("handle", i)
    blocking: bool = False


def object_body_id(index: int) -> int:
    return 40 + index


def handle_body_id(art_index: int) -> int:
    return 16 + 8 * art_index


def _carcass_walls(art, base_id):
    """Hollow carcass: back and side walls, a solid plinth up to the front
    opening, and a solid header above it. The opening matches the moving
    part, so the cavity behind a door or drawer is real interior space."""
    c = art.carcass_center
    w2, d2, h2 = art.carcass_half
    lo, hi = art.opening_z_range()
    top = float(c[2] + h2)
    bottom = float(c[2] - h2)
    t = _WALL_T
    walls = [
        ("back", [c[0], c[1] + d2 - t / 2, c[2]], [w2, t / 2, h2]),
        ("left", [c[0] - w2 + t / 2, c[1], c[2]], [t / 2, d2, h2]),
        ("right", [c[0] + w2 - t / 2, c[1], c[2]], [t / 2, d2, h2]),
        ("plinth", [c[0], c[1], (bottom + lo) / 2], [w2, d2, (lo - bottom) / 2]),
        ("header", [c[0], c[1], (hi + top) / 2], [w2, d2, (top - hi) / 2]),
    ]
    out = []
    for i, (name, center, half) in enumerate(walls):
        out.append(
            Body(
                name=f"carcass-{name}",
                kind=int(Primitive.BOX),
                half=np.asarray(half, dtype=float),
                pose=RigidTransform.from_translation(center),
                color=art.carcass_color,
                body_id=base_id + i,
                blocking=True,
            )
        )
    return out


def cavity_floor_z(art) -> float:
    """Shelf height inside the unit: the top of the plinth."""
    return art.opening_z_range()[0]


def scene_bodies(
    scene: SceneSpec,
    ee_pose: RigidTransform,
    aperture_meas: float,
    qs,
    object_poses,
    cfg: SimConfig,
    include_fingers: bool = True,
) -> list[Body]:
    bodies = [
        Body(
            name="support",
            kind=int(Primitive.BOX),
            half=scene.support_half,
            pose=RigidTransform.from_translation(scene.support_center),
            color=scene.support_color,
            body_id=SUPPORT_BODY_ID,
            blocking=True,
        )
    ]
    for i, art in enumerate(scene.articulations):
        base = 10 + 8 * i
        bodies.extend(_carcass_walls(art, base))
        p = panel_pose(art, qs[i])
        bodies.append(
            Body(
                name=f"panel-{i}",
                kind=int(Primitive.BOX),
                half=art.panel_half,
                pose=p,
                color=art.panel_color,
                body_id=base + 5,
                blocking=True,
            )
        )
        bodies.append(
            Body(
                name=f"handle-{i}",
                kind=int(Primitive.CYLINDER),
                half=np.array([art.handle_radius, art.handle_radius, art.handle_half_height]),
                pose=handle_pose(art, qs[i]),
                color=art.handle_color,
                body_id=handle_body_id(i),
                graspable_key=("handle", i),
            )
        )
    for j, obj in enumerate(scene.objects):
        bodies.append(
            Body(
                name=obj.name,
                kind=int(obj.primitive),
                half=obj.half,
                pose=object_poses[j],
                color=obj.color,
                body_id=object_body_id(j),
                graspable_key=("object", j),
            )
        )
    if include_fingers:
        gap = aperture_meas * cfg.max_gap
        fh = np.asarray(cfg.finger_half, dtype=float)
        for s in (-1.0, 1.0):
            center = TIP_OFFSET + np.array(
                [s * (gap / 2 + fh[0]), 0.0, -fh[2] + 0.005]
            )
            bodies.append(
                Body(
                    name="finger",
                    kind=int(Primitive.BOX),
                    half=fh,
                    pose=ee_pose @ RigidTransform.from_translation(center),
                    color=np.array([0.22, 0.22, 0.24]),
                    body_id=FINGER_BODY_ID,
                )
            )
    return bodies


def mirror_bodies(bodies: list[Body]) -> list[Body]:
    """Conjugate every body pose by the x-mirror; exact sign flips only."""
    return [dataclasses.replace(b, pose=mirror_transform(b.pose)) for b in bodies]


# ---------------------------------------------------------------------------
# geometry queries
# ---------------------------------------------------------------------------

def _sdf_local(kind: int, half: np.ndarray, p: np.ndarray) -> float:
    if kind == int(Primitive.SPHERE):
        return float(np.linalg.norm(p) - half[0])
    if kind == int(Primitive.CYLINDER):
        dr = math.hypot(p[0], p[1]) - half[0]
        dz = abs(p[2]) - half[2]
        outside = math.hypot(max(dr, 0.0), max(dz, 0.0))
        return outside + min(max(dr, dz), 0.0)
    q = np.abs(p) - half
    outside = float(np.linalg.norm(np.maximum(q, 0.0)))
    return outside + min(float(q.max()), 0.0)


def body_sdf(body: Body, p_world: np.ndarray) -> float:
    local = body.pose.rotation_matrix().T @ (p_world - body.pose.trans)
    return _sdf_local(body.kind, body.half, local)


def body_width_along(body: Body, axis_world: np.ndarray) -> float:
    """Support-function width of the body along a unit world axis."""
    r = body.pose.rotation_matrix()
    d = r.T @ axis_world  # axis in the body frame
    if body.kind == int(Primitive.SPHERE):
        return 2.0 * float(body.half[0])
    if body.kind == int(Primitive.CYLINDER):
        radial = math.hypot(d[0], d[1])
        return 2.0 * (body.half[0] * radial + body.half[2] * abs(d[2]))
    return 2.0 * float(np.abs(d) @ body.half)


def tip_points(ee_pose: RigidTransform, aperture_meas: float, cfg: SimConfig):
    """(left, right, mid) fingertip points in world coordinates."""
    gap = aperture_meas * cfg.max_gap
    r = ee_pose.rotation_matrix()
    mid = r @ TIP_OFFSET + ee_pose.trans
    x = r[:, 0]
    return mid - (gap / 2) * x, mid + (gap / 2) * x, mid


def _tips_blocked(bodies, old_pose, new_pose, aperture_meas, cfg, skip_ids=()):
    """Swept fingertip collision against blocking bodies (substepped so a
    0.05 m step cannot tunnel a 0.016 m panel)."""
    old_tips = tip_points(old_pose, aperture_meas, cfg)
    new_tips = tip_points(new_pose, aperture_meas, cfg)
    blockers = [b for b in bodies if b.blocking and b.body_id not in skip_ids]
    if not blockers:
        return False
    for k in range(1, 5):
        f = k / 4.0
        for p0, p1 in zip(old_tips, new_tips):
            p = p0 + f * (p1 - p0)
            for b in blockers:
                if body_sdf(b, p) < -1e-6:
                    return True
    return False


def landing_z(scene: SceneSpec, xy: np.ndarray, z: float) -> float:
    """Resting height for a released object at horizontal position xy and
    current center height z: the highest surface top at or below z, out
    of the support, cabinet tops, and the shelves inside openings."""
    tops = [float(scene.support_center[2] + scene.support_half[2])]
    for art in scene.articulations:
        c = art.carcass_center
        w2, d2, h2 = art.carcass_half
        if abs(xy[0] - c[0]) <= w2 and abs(xy[1] - c[1]) <= d2:
            tops.append(art.opening_z_range()[0])
            tops.append(float(c[2] + h2))
    below = [t for t in tops if t <= z]
    return max(below) if below else min(tops)


def _clamp_norm(v: np.ndarray, bound: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n <= bound or n == 0.0:
        return v
    return v * (bound / n)


# ---------------------------------------------------------------------------
# reset / step
# ---------------------------------------------------------------------------

def reset_state(scene: SceneSpec, cfg: SimConfig) -> SimState:
    initial_z = 0.0
    if scene.task is Task.PICK:
        initial_z = float(scene.target_object().pose.trans[2])
    return SimState(
        ee_pose=scene.camera_home,
        aperture_cmd=1.0,
        aperture_meas=1.0,
        qs=tuple(a.q0 for a in scene.articulations),
        object_poses=tuple(o.pose for o in scene.objects),
        initial_target_z=initial_z,
    )


def _stage_reward_success(scene, cfg, task, qs, object_poses, target_obj, target_art, initial_z):
    if task is Task.PICK:
        lift = float(object_poses[target_obj].trans[2]) - initial_z
        reward = max(0.0, lift)
        return reward, lift > cfg.pick_success
    q = qs[target_art]
    if task is Task.OPEN:
        return q, q >= cfg.open_success_q
    return 1.0 - q, q <= cfg.close_success_q


def sim_step(
    scene: SceneSpec,
    cfg: SimConfig,
    state: SimState,
    action: Action,
    *,
    task: Task | None = None,
    target_obj: int | None = None,
    target_art: int | None = None,
) -> tuple[SimState, float, bool]:
    """Advance one step. Task/target default to the scene's own; the
    overrides let a composite plan reuse one scene across stages."""
    if state.done:
        raise EpisodeFinished(f"episode finished at step {state.step_count}")
    task = Task(task) if task is not None else scene.task
    if target_obj is None:
        target_obj = (
            next((j for j, o in enumerate(scene.objects) if o.is_target), 0)
            if scene.objects
            else 0
        )
    if target_art is None:
        target_art = scene.target_articulation_index() if scene.articulations else 0

    dt = _clamp_norm(np.asarray(action.delta_translation, dtype=float), cfg.trans_clamp)
    dr = _clamp_norm(np.asarray(action.delta_rotation, dtype=float), cfg.rot_clamp)
    cmd = float(min(1.0, max(0.0, action.aperture_cmd)))

    ee = state.ee_pose
    qs = list(state.qs)
    object_poses = list(state.object_poses)
    contacts = state.contact_dict()
    ak, ai = state.attached_kind, state.attached_index
    attach_rel = state.attach_rel
    attach_step = state.attach_step

    bodies = scene_bodies(scene, ee, state.aperture_meas, qs, object_poses, cfg, include_fingers=False)

    # --- motion -------------------------------------------------------------
    if ak == "handle":
        art = scene.articulations[ai]
        q = qs[ai]
        dw = ee.rotation_matrix() @ dt
        v = handle_velocity(art, q)
        vv = float(v @ v)
        dq = float(dw @ v) / vv if vv > 0 else 0.0
        q2 = min(1.0, max(0.0, q + dq))
        if q2 != q:
            g = handle_pose(art, q2) @ handle_pose(art, q).inverse()
            ee = g @ ee
            qs[ai] = q2
    elif np.any(dt) or np.any(dr):
        proposed = ee @ RigidTransform(rotvec_to_quat(dr), dt)
        if not _tips_blocked(bodies, ee, proposed, state.aperture_meas, cfg):
            ee = proposed
            if ak == "object":
                object_poses[ai] = ee @ attach_rel

    # --- aperture -----------------------------------------------------------
    meas = state.aperture_meas
    slew = cfg.aperture_slew
    slewed = meas + min(slew, max(-slew, cmd - meas))
    closing_axis = ee.rotation_matrix()[:, 0]
    mid = transform_point(ee, TIP_OFFSET)

    graspable = [b for b in bodies if b.graspable_key is not None]
    if ak == "":
        floor = 0.0
        floor_body = None
        for b in graspable:
            if body_sdf(b, mid) <= cfg.straddle_eps:
                f = body_width_along(b, closing_axis) / cfg.max_gap
                if f <= meas + 1e-9 and f > floor:
                    floor = f
                    floor_body = b
        if floor_body is not None and slewed < floor:
            meas = floor
            ak, ai = floor_body.graspable_key
            key = f"{ak}:{ai}"
            contacts.setdefault(key, state.step_count)
            if attach_step < 0:
                attach_step = state.step_count
            if ak == "object":
                attach_rel = ee.inverse() @ object_poses[ai]
            else:
                attach_rel = None
        else:
            meas = slewed
    else:
        if ak == "object":
            held = next(b for b in graspable if b.graspable_key == ("object", ai))
            held = dataclasses.replace(held, pose=object_poses[ai])
        else:
            held = next(b for b in graspable if b.graspable_key == ("handle", ai))
            held = dataclasses.replace(held, pose=handle_pose(scene.articulations[ai], qs[ai]))
        floor = body_width_along(held, closing_axis) / cfg.max_gap
        if slewed <= floor:
            meas = floor
        else:
            meas = slewed
            if meas >= floor + cfg.detach_margin:
                if ak == "object":
                    pose = object_poses[ai]
                    current = dataclasses.replace(held, pose=pose)
                    half_h = body_width_along(current, np.array([0.0, 0.0, 1.0])) / 2
                    z = landing_z(scene, pose.trans[:2], float(pose.trans[2])) + half_h
                    object_poses[ai] = RigidTransform(
                        pose.quat, np.array([pose.trans[0], pose.trans[1], z])
                    )
                ak, ai, attach_rel = "", -1, None

    if meas <= 1e-12 and ak == "":
        contacts.setdefault("fingers", state.step_count)

    # --- touch logging --------------------------------------------------------
    left, right, mid = tip_points(ee, meas, cfg)
    for b in graspable:
        near = min(body_sdf(b, left), body_sdf(b, right), body_sdf(b, mid))
        if near <= cfg.straddle_eps:
            k, i = b.graspable_key
            contacts.setdefault(f"{k}:{i}", state.step_count)

    # --- bookkeeping -----------------------------------------------------------
    max_lift = state.max_lift
    if task is Task.PICK and scene.objects:
        lift = float(object_poses[target_obj].trans[2]) - state.initial_target_z
        max_lift = max(max_lift, lift)
    reward, success = _stage_reward_success(
        scene, cfg, task, qs, object_poses, target_obj, target_art, state.initial_target_z
    )
    step_count = state.step_count + 1
    done = bool(success or step_count >= cfg.horizon)

    new_state = SimState(
        ee_pose=ee,
        aperture_cmd=cmd,
        aperture_meas=meas,
        attached_kind=ak,
        attached_index=ai,
        attach_rel=attach_rel,
        attach_step=attach_step,
        qs=tuple(qs),
        object_poses=tuple(object_poses),
        step_count=step_count,
        max_lift=max_lift,
        initial_target_z=state.initial_target_z,
        contacts=tuple(sorted(contacts.items(), key=lambda kv: (kv[1], kv[0]))),
        done=done,
        success=bool(success),
    )
    return new_state, float(reward), done


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_state(
    scene: SceneSpec,
    state: SimState,
    cfg: SimConfig,
    k: CameraIntrinsics = SIM_INTRINSICS,
    settings: RenderSettings | None = None,
    *,
    task: Task | None = None,
    target_obj: int | None = None,
    target_art: int | None = None,
    images: bool = True,
) -> Observation:
    task = Task(task) if task is not None else scene.task
    if target_obj is None:
        target_obj = next((j for j, o in enumerate(scene.objects) if o.is_target), 0)
    if target_art is None:
        target_art = scene.target_articulation_index() if scene.articulations else 0

    rgb = depth = seg = None
    if images:
        bodies = scene_bodies(
            scene, state.ee_pose, state.aperture_meas, state.qs, state.object_poses, cfg
        )
        rgb, depth, seg = render_bodies(
            [(b.kind, b.pose, b.half, b.color, b.body_id) for b in bodies], state.ee_pose, k, settings
        )

    if task is Task.PICK and scene.objects:
        privileged = state.object_poses[target_obj]
        target_id = object_body_id(target_obj)
    else:
        privileged = handle_pose(scene.articulations[target_art], state.qs[target_art])
        target_id = handle_body_id(target_art)
    return Observation(
        rgb=rgb,
        depth=depth,
        segmentation=seg,
        camera_pose=state.ee_pose,
        aperture_meas=state.aperture_meas,
        privileged_pose=privileged,
        target_body_id=target_id,
        object_body_ids=tuple(object_body_id(j) for j in range(len(scene.objects))),
    )


# ---------------------------------------------------------------------------
# environment wrapper
# ---------------------------------------------------------------------------

ENV_NAMES = {
    "EgoGym-Pick-v0": Task.PICK,
    "EgoGym-Open-v0": Task.OPEN,
    "EgoGym-Close-v0": Task.CLOSE,
}


class EgoGymEnv:
    """Owns one scene + state; step/observe in terms of the current stage."""

    def __init__(
        self,
        task: Task,
        seed: int = 0,
        distractor_count: int = 0,
        horizon: int | None = None,
        action_mode: str = "relative",
        embodiment: str = "CAP",
        twin: bool = False,
        scene: SceneSpec | None = None,
        config: SimConfig | None = None,
        images: bool = True,
    ):
        if embodiment != "CAP":
            raise NotImplementedError(f"embodiment {embodiment!r} not supported")
        if action_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown action mode {action_mode!r}")
        self.task = Task(task)
        self.action_mode = action_mode
        self.images = images
        self.config = config or SimConfig()
        if horizon is not None:
            self.config = dataclasses.replace(self.config, horizon=horizon)
        self._twin = twin
        self._distractors = distractor_count
        self.scene = scene if scene is not None else generate_scene(
            self.task, seed, distractor_count, twin=twin
        )
        self.seed = seed
        self.stage_task: Task = self.task
        self.stage_target_obj: int | None = None
        self.stage_target_art: int | None = None
        self.state = reset_state(self.scene, self.config)

    # stage control ---------------------------------------------------------
    def set_stage(self, task: Task, target_obj: int | None = None, target_art: int | None = None):
        self.stage_task = Task(task)
        self.stage_target_obj = target_obj
        self.stage_target_art = target_art
        if self.stage_task is Task.PICK:
            idx = target_obj if target_obj is not None else next(
                (j for j, o in enumerate(self.scene.objects) if o.is_target), 0
            )
            z0 = float(self.state.object_poses[idx].trans[2])
            self.state = dataclasses.replace(
                self.state, initial_target_z=z0, max_lift=0.0, done=False, success=False
            )
        else:
            self.state = dataclasses.replace(self.state, done=False, success=False)

    def home(self):
        """Return the gripper to the scene's start pose, releasing any hold.

        Scene state (object poses, articulation q) is preserved: this is
        the between-attempts reset for composite plans."""
        state = self.state
        if state.attached_kind == "object":
            pose = state.object_poses[state.attached_index]
            bodies = scene_bodies(
                self.scene, state.ee_pose, state.aperture_meas, state.qs,
                state.object_poses, self.config, include_fingers=False,
            )
            held = next(
                b for b in bodies if b.graspable_key == ("object", state.attached_index)
            )
            half_h = body_width_along(held, np.array([0.0, 0.0, 1.0])) / 2
            z = landing_z(self.scene, pose.trans[:2], float(pose.trans[2])) + half_h
            poses = list(state.object_poses)
            poses[state.attached_index] = RigidTransform(
                pose.quat, np.array([pose.trans[0], pose.trans[1], z])
            )
            state = dataclasses.replace(state, object_poses=tuple(poses))
        self.state = dataclasses.replace(
            state,
            ee_pose=self.scene.camera_home,
            aperture_cmd=1.0,
            aperture_meas=1.0,
            attached_kind="",
            attached_index=-1,
            attach_rel=None,
            attach_step=-1,
            step_count=0,
            max_lift=0.0,
            contacts=(),
            done=False,
            success=False,
        )
        self.set_stage(self.stage_task, self.stage_target_obj, self.stage_target_art)

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.seed = seed
            self.scene = generate_scene(
                self.task, seed, self._distractors, twin=self._twin
            )
        self.state = reset_state(self.scene, self.config)
        self.stage_task = self.task
        self.stage_target_obj = None
        self.stage_target_art = None
        return self.observe()

    def observe(self) -> Observation:
        return render_state(
            self.scene, self.state, self.config,
            task=self.stage_task,
            target_obj=self.stage_target_obj,
            target_art=self.stage_target_art,
            images=self.images,
        )

    def step(self, action: Action):
        if self.action_mode == "absolute":
            target = self.scene.camera_home @ RigidTransform(
                rotvec_to_quat(action.delta_rotation), action.delta_translation
            )
            rel = self.state.ee_pose.inverse() @ target
            action = Action(rel.trans, rel.rotvec(), action.aperture_cmd)
        self.state, reward, done = sim_step(
            self.scene, self.config, self.state, action,
            task=self.stage_task,
            target_obj=self.stage_target_obj,
            target_art=self.stage_target_art,
        )
        info = {
            "success": self.state.success,
            "max_lift": self.state.max_lift,
            "qs": self.state.qs,
            "attached": self.state.attached_kind,
            "step": self.state.step_count,
        }
        return self.observe(), reward, done, info


def make(name: str, **kwargs) -> EgoGymEnv:
    """Construct an environment by its registered name."""
    if name not in ENV_NAMES:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(ENV_NAMES)}")
    return EgoGymEnv(ENV_NAMES[name], **kwargs)
