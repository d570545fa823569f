"""Procedural scene generation for the kinematic tabletop simulator.

World frame: z up. Pick scenes put primitives on a table; Open/Close
scenes build a floor-standing cabinet with a revolute door or a
prismatic drawer plus a vertical-bar handle. Scenes are a pure
deterministic function of (task, seed); the distractor count only adds
draws after the target and camera are fixed, so sweeping it keeps the
rest of the scene identical (common random numbers across counts).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..episodes import Task
from ..geometry import RigidTransform, rotvec_to_quat

__all__ = [
    "Primitive",
    "HingeSide",
    "ArticulationKind",
    "ObjectSpec",
    "ArticulationSpec",
    "SceneSpec",
    "generate_scene",
    "generate_compose_scene",
    "look_at",
    "panel_pose",
    "handle_pose",
    "handle_velocity",
    "SceneGenerationError",
]


class SceneGenerationError(RuntimeError):
    pass


class Primitive(enum.IntEnum):
    BOX = 0
    SPHERE = 1
    CYLINDER = 2


class HingeSide(str, enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"


class ArticulationKind(str, enum.Enum):
    REVOLUTE_DOOR = "RevoluteDoor"
    PRISMATIC_DRAWER = "PrismaticDrawer"


def _arr(v, n=3) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(n)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObjectSpec:
    """A free-standing primitive. Half extents: box (hx,hy,hz); sphere r in [0];
    cylinder radius in [0] and half-height in [2], axis along local z."""

    name: str
    primitive: Primitive
    half: np.ndarray
    pose: RigidTransform
    color: np.ndarray
    is_target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "half", _arr(self.half))
        object.__setattr__(self, "color", _arr(self.color))

    def bounding_radius(self) -> float:
        if self.primitive == Primitive.SPHERE:
            return float(self.half[0])
        if self.primitive == Primitive.CYLINDER:
            return math.hypot(self.half[0], self.half[2])
        return float(np.linalg.norm(self.half))


@dataclass(frozen=True)
class ArticulationSpec:
    """A cabinet unit: fixed carcass plus one moving part with a handle.

    q is the open fraction in [0,1]; travel is radians (door) or meters
    (drawer). The handle is a vertical cylinder standing off the moving
    face so a straight-on grasp clears the panel.
    """

    kind: ArticulationKind
    hinge_side: HingeSide
    travel: float
    q0: float
    carcass_center: np.ndarray
    carcass_half: np.ndarray
    panel_half: np.ndarray  # door: (W/2, t/2, H/2); drawer: body half extents
    panel_z: float  # panel/drawer center height
    handle_radius: float
    handle_half_height: float
    handle_standoff: float
    handle_margin: float  # lateral offset of the handle from the panel center
    carcass_color: np.ndarray = field(default_factory=lambda: _arr([0.5, 0.36, 0.24]))
    panel_color: np.ndarray = field(default_factory=lambda: _arr([0.6, 0.45, 0.3]))
    handle_color: np.ndarray = field(default_factory=lambda: _arr([0.75, 0.75, 0.78]))
    is_target: bool = False

    def __post_init__(self):
        for name in ("carcass_center", "carcass_half", "panel_half",
                     "carcass_color", "panel_color", "handle_color"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        if not (0.0 <= self.q0 <= 1.0):
            raise SceneGenerationError(f"q0 = {self.q0} outside [0, 1]")
        if self.travel <= 0:
            raise SceneGenerationError("travel must be positive")

    # The cabinet front face lies at y = carcass_center.y - carcass_half.y
    # and faces -y (toward the camera).
    @property
    def front_y(self) -> float:
        return float(self.carcass_center[1] - self.carcass_half[1])

    @property
    def hinge_sign(self) -> float:
        # Left hinge is the -x edge seen from the camera at -y. Opening
        # swings the free edge toward -y: negative yaw for a left hinge.
        return -1.0 if self.hinge_side is HingeSide.LEFT else 1.0

    def hinge_point(self) -> np.ndarray:
        # hinge on the -x edge for a left hinge; with the yaw sign above,
        # opening swings the free edge outward, toward -y and the camera
        x = self.carcass_center[0] + self.hinge_sign * self.panel_half[0]
        return np.array([x, self.front_y - 0.002 - self.panel_half[1], self.panel_z])

    def opening_z_range(self) -> tuple[float, float]:
        """Vertical extent of the front opening the moving part covers.
        Doors overlap the opening edges slightly; drawers get clearance."""
        if self.kind is ArticulationKind.REVOLUTE_DOOR:
            clear = self.panel_half[2] - 0.004
        else:
            clear = self.panel_half[2] + 0.002
        return float(self.panel_z - clear), float(self.panel_z + clear)


_PANEL_GAP = 0.002  # moving parts sit slightly proud of the carcass face
_DRAWER_INSET = 0.012


def panel_pose(art: ArticulationSpec, q: float) -> RigidTransform:
    """World pose of the moving part at open fraction q."""
    if art.kind is ArticulationKind.PRISMATIC_DRAWER:
        center = np.array(
            [
                art.carcass_center[0],
                art.front_y - _PANEL_GAP - art.panel_half[1] - q * art.travel,
                art.panel_z,
            ]
        )
        return RigidTransform.from_translation(center)

    closed_center = np.array(
        [art.carcass_center[0], art.front_y - _PANEL_GAP - art.panel_half[1], art.panel_z]
    )
    hinge = art.hinge_point()
    theta = art.hinge_sign * q * art.travel
    rot = RigidTransform(rotvec_to_quat(np.array([0.0, 0.0, theta])), np.zeros(3))
    # rotate the closed pose about the vertical hinge line
    swing = (
        RigidTransform.from_translation(hinge)
        @ rot
        @ RigidTransform.from_translation(-hinge)
    )
    return swing @ RigidTransform.from_translation(closed_center)


def handle_local_offset(art: ArticulationSpec) -> np.ndarray:
    """Handle center relative to the moving part, in the part's local frame."""
    if art.kind is ArticulationKind.PRISMATIC_DRAWER:
        lateral = 0.0
    else:
        # mounted near the free edge, opposite the hinge
        lateral = -art.hinge_sign * (art.panel_half[0] - art.handle_margin)
    return np.array(
        [lateral, -(art.panel_half[1] + art.handle_standoff + art.handle_radius), 0.0]
    )


def handle_pose(art: ArticulationSpec, q: float) -> RigidTransform:
    return panel_pose(art, q) @ RigidTransform.from_translation(handle_local_offset(art))


def handle_velocity(art: ArticulationSpec, q: float) -> np.ndarray:
    """d(handle position)/dq in world coordinates, meters per unit q."""
    if art.kind is ArticulationKind.PRISMATIC_DRAWER:
        return np.array([0.0, -art.travel, 0.0])
    h = handle_pose(art, q).trans
    hinge = art.hinge_point()
    r = h - hinge
    # velocity of a point on a body rotating about the vertical hinge axis
    omega = np.array([0.0, 0.0, art.hinge_sign * art.travel])
    return np.cross(omega, r)


@dataclass(frozen=True)
class SceneSpec:
    """Complete deterministic description of one environment instance."""

    task: Task
    seed: int
    distractor_count: int
    support_center: np.ndarray  # table (Pick) or floor (Open/Close)
    support_half: np.ndarray
    support_color: np.ndarray
    objects: tuple[ObjectSpec, ...]
    articulations: tuple[ArticulationSpec, ...]
    camera_home: RigidTransform
    twin: bool = False

    def __post_init__(self):
        for name in ("support_center", "support_half", "support_color"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "articulations", tuple(self.articulations))
        if not (0 <= self.distractor_count <= 5):
            raise SceneGenerationError(
                f"distractor_count {self.distractor_count} outside [0, 5]"
            )
        if self.task is Task.PICK:
            if sum(o.is_target for o in self.objects) != 1:
                raise SceneGenerationError("Pick scene needs exactly one target object")
        else:
            if len(self.articulations) not in (1, 2):
                raise SceneGenerationError("Open/Close scene needs 1 or 2 articulated units")
            if sum(a.is_target for a in self.articulations) != 1:
                raise SceneGenerationError("exactly one articulation must be the target")

    @property
    def support_top(self) -> float:
        return float(self.support_center[2] + self.support_half[2])

    def target_object(self) -> ObjectSpec:
        return next(o for o in self.objects if o.is_target)

    def target_articulation_index(self) -> int:
        return next(i for i, a in enumerate(self.articulations) if a.is_target)


def look_at(eye, target) -> RigidTransform:
    """Camera pose with x right, y down, z forward, world z up."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(f, up)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise SceneGenerationError("camera forward axis is vertical; look-at undefined")
    x = x / n
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, f, eye
    return RigidTransform.from_matrix(m)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

# grasp widths stay well under the 0.08 m max gap so closing from a fully
# open gripper drops the aperture far enough for stall detection to fire
_BOX_HX = (0.010, 0.022)
_BOX_HY = (0.010, 0.030)
_BOX_HZ = (0.015, 0.040)
_SPHERE_R = (0.012, 0.024)
_CYL_R = (0.010, 0.020)
_CYL_HZ = (0.015, 0.040)

PICK_REGION = (0.17, 0.12)  # half extents of the spawn region on the table
EE_JITTER = (0.08, 0.055)  # half extents of the 0.16 x 0.11 m start box

_TASK_CODE = {Task.PICK: 11, Task.OPEN: 22, Task.CLOSE: 33}


def _rng_for(task: Task, seed: int) -> np.random.Generator:
    return np.random.default_rng([_TASK_CODE[Task(task)], int(seed) & (2**63 - 1)])


def _random_color(rng) -> np.ndarray:
    # bright-ish random hue; targets and distractors draw from the same pool
    c = rng.uniform(0.15, 0.95, size=3)
    c[int(rng.integers(3))] = rng.uniform(0.6, 0.95)
    return c


def _sample_object(rng, name, z_top, is_target) -> tuple:
    kind = Primitive(int(rng.integers(3)))
    if kind == Primitive.BOX:
        half = np.array(
            [rng.uniform(*_BOX_HX), rng.uniform(*_BOX_HY), rng.uniform(*_BOX_HZ)]
        )
        height = half[2]
    elif kind == Primitive.SPHERE:
        r = rng.uniform(*_SPHERE_R)
        half = np.array([r, r, r])
        height = r
    else:
        half = np.array([rng.uniform(*_CYL_R), 0.0, rng.uniform(*_CYL_HZ)])
        half[1] = half[0]
        height = half[2]
    yaw = 0.0 if is_target else rng.uniform(-math.pi, math.pi)
    color = _random_color(rng)
    return kind, half, height, yaw, color


def _place_objects(rng, count, region, z_top, prefix, exclude=()):
    """Rejection-sample non-overlapping xy positions inside the region."""
    placed = list(exclude)
    out = []
    for i in range(count):
        kind, half, height, yaw, color = _sample_object(rng, f"{prefix}{i}", z_top, False)
        radius = math.hypot(half[0], half[1])
        for attempt in range(300):
            x = rng.uniform(-region[0], region[0])
            y = rng.uniform(-region[1], region[1])
            ok = all(
                math.hypot(x - px, y - py) > radius + pr + 0.02 for px, py, pr in placed
            )
            if ok:
                break
        else:
            raise SceneGenerationError("could not place distractors without overlap")
        pose = RigidTransform(rotvec_to_quat([0, 0, yaw]), [x, y, z_top + height])
        placed.append((x, y, radius))
        out.append(
            ObjectSpec(
                name=f"{prefix}{i}",
                primitive=kind,
                half=half,
                pose=pose,
                color=color,
                is_target=False,
            )
        )
    return out


def _pick_scene(rng, seed, distractor_count) -> SceneSpec:
    top = rng.uniform(0.36, 0.44)
    support_half = np.array([0.35, 0.30, top / 2])
    support_center = np.array([0.0, 0.0, top / 2])
    support_color = np.array([0.45, 0.41, 0.36]) + rng.uniform(-0.06, 0.06, size=3)

    kind, half, height, _, color = _sample_object(rng, "target", top, True)
    tx = rng.uniform(-PICK_REGION[0], PICK_REGION[0])
    ty = rng.uniform(-PICK_REGION[1], PICK_REGION[1])
    target = ObjectSpec(
        name="target",
        primitive=kind,
        half=half,
        pose=RigidTransform.from_translation([tx, ty, top + height]),
        color=color,
        is_target=True,
    )

    jx = rng.uniform(-EE_JITTER[0], EE_JITTER[0])
    jy = rng.uniform(-EE_JITTER[1], EE_JITTER[1])
    camera = look_at(
        eye=[jx, -0.46 + jy, top + 0.34], target=[0.0, 0.0, top + 0.03]
    )

    target_footprint = (tx, ty, math.hypot(half[0], half[1]))
    distractors = _place_objects(
        rng, distractor_count, PICK_REGION, top, "distractor", exclude=[target_footprint]
    )
    return SceneSpec(
        task=Task.PICK,
        seed=seed,
        distractor_count=distractor_count,
        support_center=support_center,
        support_half=support_half,
        support_color=support_color,
        objects=(target, *distractors),
        articulations=(),
        camera_home=camera,
    )


def _sample_unit(rng, task, center_x, is_target, force_kind=None) -> ArticulationSpec:
    if force_kind is not None:
        kind = ArticulationKind(force_kind)
    else:
        kind = (
            ArticulationKind.REVOLUTE_DOOR
            if rng.uniform() < 0.5
            else ArticulationKind.PRISMATIC_DRAWER
        )
    w2 = rng.uniform(0.12, 0.16)
    d2 = rng.uniform(0.09, 0.12)
    hc = rng.uniform(0.65, 0.85)  # carcass full height
    carcass_center = np.array([center_x, 0.0, hc / 2])
    carcass_half = np.array([w2, d2, hc / 2])
    panel_z = hc - rng.uniform(0.22, 0.28)
    if kind is ArticulationKind.REVOLUTE_DOOR:
        panel_half = np.array([w2 - 0.01, 0.008, rng.uniform(0.14, 0.18)])
        travel = rng.uniform(1.1, 1.5)
    else:
        panel_half = np.array([w2 - _DRAWER_INSET, d2 - 0.01, rng.uniform(0.07, 0.10)])
        travel = rng.uniform(0.14, 0.20)
    hinge = HingeSide.LEFT if rng.uniform() < 0.5 else HingeSide.RIGHT
    if task is Task.OPEN:
        q0 = rng.uniform(0.0, 0.04)
    else:
        q0 = rng.uniform(0.75, 0.95)
    wood = np.array([0.52, 0.37, 0.24]) + rng.uniform(-0.08, 0.08, size=3)
    return ArticulationSpec(
        kind=kind,
        hinge_side=hinge,
        travel=travel,
        q0=q0,
        carcass_center=carcass_center,
        carcass_half=carcass_half,
        panel_half=panel_half,
        panel_z=panel_z,
        handle_radius=rng.uniform(0.010, 0.014),
        handle_half_height=rng.uniform(0.035, 0.05),
        handle_standoff=rng.uniform(0.030, 0.040),
        handle_margin=rng.uniform(0.03, 0.05),
        carcass_color=wood,
        panel_color=np.clip(wood + rng.uniform(0.02, 0.1, size=3), 0, 1),
        handle_color=np.array([0.75, 0.75, 0.78]) + rng.uniform(-0.05, 0.05, size=3),
        is_target=is_target,
    )


def _cabinet_scene(rng, task, seed, distractor_count, twin) -> SceneSpec:
    support_half = np.array([0.9, 0.9, 0.05])
    support_center = np.array([0.0, 0.0, -0.05])
    support_color = np.array([0.35, 0.35, 0.38]) + rng.uniform(-0.05, 0.05, size=3)

    if twin:
        # two units stamped from one sample: visually identical, target
        # distinguishable only through the prompt/anchor. Drawers only:
        # their straight pull keeps the scripted demonstrator reliable on
        # both the left and the right unit.
        proto = _sample_unit(
            rng, task, 0.0, False, force_kind=ArticulationKind.PRISMATIC_DRAWER
        )
        target_left = bool(rng.integers(2))
        sep = proto.carcass_half[0] + 0.06
        units = []
        for i, cx in enumerate((-sep, sep)):
            units.append(
                dataclasses_replace_art(proto, center_x=cx, is_target=(i == 0) == target_left)
            )
        articulations = tuple(units)
    else:
        articulations = (_sample_unit(rng, task, 0.0, True),)

    hz = articulations[0].panel_z
    front = articulations[0].front_y
    jx = rng.uniform(-EE_JITTER[0], EE_JITTER[0])
    jy = rng.uniform(-EE_JITTER[1], EE_JITTER[1])
    camera = look_at(eye=[jx, front - 0.5 + jy, hz + 0.16], target=[0.0, front, hz])

    # distractors live on the cabinet tops, clear of the moving parts
    distractors = []
    if distractor_count:
        art = articulations[0]
        region = (art.carcass_half[0] - 0.05, art.carcass_half[1] - 0.05)
        tops = _place_objects(
            rng, distractor_count, region, 2 * art.carcass_half[2], "distractor"
        )
        shifted = []
        for o in tops:
            pose = RigidTransform(
                o.pose.quat, o.pose.trans + np.array([art.carcass_center[0], 0.0, 0.0])
            )
            shifted.append(
                ObjectSpec(o.name, o.primitive, o.half, pose, o.color, False)
            )
        distractors = shifted

    return SceneSpec(
        task=task,
        seed=seed,
        distractor_count=distractor_count,
        support_center=support_center,
        support_half=support_half,
        support_color=support_color,
        objects=tuple(distractors),
        articulations=articulations,
        camera_home=camera,
        twin=twin,
    )


def dataclasses_replace_art(a: ArticulationSpec, center_x: float, is_target: bool) -> ArticulationSpec:
    center = np.array([center_x, a.carcass_center[1], a.carcass_center[2]])
    return ArticulationSpec(
        kind=a.kind,
        hinge_side=a.hinge_side,
        travel=a.travel,
        q0=a.q0,
        carcass_center=center,
        carcass_half=a.carcass_half,
        panel_half=a.panel_half,
        panel_z=a.panel_z,
        handle_radius=a.handle_radius,
        handle_half_height=a.handle_half_height,
        handle_standoff=a.handle_standoff,
        handle_margin=a.handle_margin,
        carcass_color=a.carcass_color,
        panel_color=a.panel_color,
        handle_color=a.handle_color,
        is_target=is_target,
    )


def generate_scene(
    task: Task, seed: int, distractor_count: int = 0, *, twin: bool = False
) -> SceneSpec:
    """Deterministic scene for (task, seed); the distractor count only
    appends draws, so the target, cabinet, and camera are shared across
    counts for a fixed seed."""
    task = Task(task)
    if not (0 <= distractor_count <= 5):
        raise SceneGenerationError(f"distractor_count {distractor_count} outside [0, 5]")
    rng = _rng_for(task, seed)
    if task is Task.PICK:
        if twin:
            raise SceneGenerationError("twin scenes are articulated-only")
        return _pick_scene(rng, seed, distractor_count)
    return _cabinet_scene(rng, task, seed, distractor_count, twin)


def generate_compose_scene(seed: int) -> SceneSpec:
    """Cabinet with a wide-swinging door and one graspable object shelved
    inside the cavity. Multi-stage plans run Open, then Pick on the
    object, then Close, against this single persistent scene."""
    rng = np.random.default_rng([44, int(seed) & (2**63 - 1)])
    unit = _sample_unit(rng, Task.OPEN, 0.0, True, force_kind=ArticulationKind.REVOLUTE_DOOR)
    unit = ArticulationSpec(
        kind=unit.kind,
        hinge_side=unit.hinge_side,
        # swings well past vertical so the fully open door clears the
        # middle of the opening for the in-cavity grasp
        travel=rng.uniform(1.45, 1.5),
        q0=0.0,
        carcass_center=unit.carcass_center,
        carcass_half=unit.carcass_half,
        panel_half=unit.panel_half,
        panel_z=unit.panel_z,
        handle_radius=unit.handle_radius,
        handle_half_height=unit.handle_half_height,
        handle_standoff=unit.handle_standoff,
        handle_margin=unit.handle_margin,
        carcass_color=unit.carcass_color,
        panel_color=unit.panel_color,
        handle_color=unit.handle_color,
        is_target=True,
    )
    lo, _ = unit.opening_z_range()
    half = np.array([rng.uniform(0.012, 0.020), rng.uniform(0.012, 0.020), rng.uniform(0.020, 0.030)])
    # shelved away from the hinge so the fully open door clears the grasp
    x = unit.carcass_center[0] - unit.hinge_sign * 0.035 + rng.uniform(-0.01, 0.01)
    shelf_object = ObjectSpec(
        name="shelved",
        primitive=Primitive.BOX,
        half=half,
        pose=RigidTransform.from_translation(
            [x, unit.carcass_center[1] - rng.uniform(0.0, 0.03), lo + half[2]]
        ),
        color=_random_color(rng),
        is_target=True,
    )

    hz = unit.panel_z
    front = unit.front_y
    # start on the side away from the hinge so the opened door never sits
    # between the gripper and the shelf
    jx = -unit.hinge_sign * rng.uniform(0.02, 0.07)
    jy = rng.uniform(-EE_JITTER[1], EE_JITTER[1])
    camera = look_at(eye=[jx, front - 0.5 + jy, hz + 0.16], target=[0.0, front, hz])

    return SceneSpec(
        task=Task.OPEN,
        seed=seed,
        distractor_count=0,
        support_center=np.array([0.0, 0.0, -0.05]),
        support_half=np.array([0.9, 0.9, 0.05]),
        support_color=np.array([0.35, 0.35, 0.38]),
        objects=(shelf_object,),
        articulations=(unit,),
        camera_home=camera,
    )
