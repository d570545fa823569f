"""Scripted expert with privileged scene access.

Phases are derived from state each step, no internal memory: approach
the grasp point with the gripper open, close until the stall attaches,
then lift (objects) or ride the joint (handles). Handle grasps route
through a pre-grasp waypoint on the moving part's outward normal so the
final approach is straight-on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..episodes import Task
from ..geometry import RigidTransform
from .core import TIP_OFFSET, Action, SimConfig, SimState
from .scene import ArticulationKind, SceneSpec, handle_pose, handle_velocity

__all__ = ["OraclePolicy", "oracle_action"]

_APPROACH_STEP = 0.045
_PULL_STEP = 0.04
_REACH_TOL = 0.008
_LATERAL_TOL = 0.012
_PREGRASP_STANDOFF = 0.07


def _step_toward(ee: RigidTransform, tip: np.ndarray, goal: np.ndarray, cmd: float) -> Action:
    d = goal - tip
    dist = float(np.linalg.norm(d))
    if dist > _APPROACH_STEP:
        d = d * (_APPROACH_STEP / dist)
    return Action(ee.rotation_matrix().T @ d, np.zeros(3), cmd)


def oracle_action(
    scene: SceneSpec,
    cfg: SimConfig,
    state: SimState,
    task: Task | None = None,
    target_obj: int | None = None,
    target_art: int | None = None,
) -> Action:
    task = Task(task) if task is not None else scene.task
    ee = state.ee_pose
    tip = ee.rotation_matrix() @ TIP_OFFSET + ee.trans

    if task is Task.PICK:
        if target_obj is None:
            target_obj = next(j for j, o in enumerate(scene.objects) if o.is_target)
        if state.attached_kind == "object" and state.attached_index == target_obj:
            lift = np.array([0.0, 0.0, _PULL_STEP])
            return Action(ee.rotation_matrix().T @ lift, np.zeros(3), 0.0)
        goal = np.asarray(state.object_poses[target_obj].trans)
        # an object shelved inside a unit is approached straight through
        # the opening: first a waypoint out front, then directly in
        for art in scene.articulations:
            c = art.carcass_center
            inside = (
                abs(goal[0] - c[0]) <= art.carcass_half[0]
                and abs(goal[1] - c[1]) <= art.carcass_half[1]
                and goal[2] <= c[2] + art.carcass_half[2]
            )
            if not inside:
                continue
            off = math.hypot(tip[0] - goal[0], tip[2] - goal[2])
            if tip[1] < art.front_y - 0.055 and off > 0.012:
                w = np.array([goal[0], art.front_y - 0.06, goal[2]])
                return _step_toward(ee, tip, w, 1.0)
            break
        if float(np.linalg.norm(goal - tip)) > _REACH_TOL:
            return _step_toward(ee, tip, goal, 1.0)
        return Action(np.zeros(3), np.zeros(3), 0.0)

    if target_art is None:
        target_art = scene.target_articulation_index()
    art = scene.articulations[target_art]
    q = state.qs[target_art]

    if state.attached_kind == "handle" and state.attached_index == target_art:
        v = handle_velocity(art, q)
        v = v / np.linalg.norm(v)
        direction = v if task is Task.OPEN else -v
        return Action(ee.rotation_matrix().T @ (direction * _PULL_STEP), np.zeros(3), 0.0)

    pose = handle_pose(art, q)
    h = pose.trans
    # outward normal of the moving face, pointing away from the cabinet
    n = pose.rotation_matrix() @ np.array([0.0, -1.0, 0.0])
    pre = h + _PREGRASP_STANDOFF * n
    rel = tip - h
    s = float(rel @ n)
    lateral = rel - s * n
    lat_norm = float(np.linalg.norm(lateral))
    in_corridor = (
        -0.02 < s <= _PREGRASP_STANDOFF + 0.02 and lat_norm <= _LATERAL_TOL
    )

    if art.kind is ArticulationKind.REVOLUTE_DOOR:
        protrusion = math.sin(min(q * art.travel, math.pi / 2)) * 2 * art.panel_half[0]
    else:
        protrusion = q * art.travel
    if protrusion > 0.08 and not in_corridor:
        # the moving part juts out between the start pose and the handle;
        # go over the top: climb, cruise above the pre-grasp point, descend
        safe_z = art.panel_z + art.panel_half[2] + 0.06
        xy_off = float(np.hypot(tip[0] - pre[0], tip[1] - pre[1]))
        if xy_off > 0.015:
            if tip[2] < safe_z - 0.01:
                return _step_toward(ee, tip, np.array([tip[0], tip[1], safe_z]), 1.0)
            return _step_toward(ee, tip, np.array([pre[0], pre[1], safe_z]), 1.0)

    if lat_norm > _LATERAL_TOL:
        return _step_toward(ee, tip, pre, 1.0)
    if float(np.linalg.norm(rel)) > _REACH_TOL:
        return _step_toward(ee, tip, h, 1.0)
    return Action(np.zeros(3), np.zeros(3), 0.0)


@dataclass(frozen=True)
class OraclePolicy:
    """Privileged expert; drives an environment rather than an observation."""

    wants_env = True

    def act(self, env) -> Action:
        return oracle_action(
            env.scene,
            env.config,
            env.state,
            env.stage_task,
            env.stage_target_obj,
            env.stage_target_art,
        )
