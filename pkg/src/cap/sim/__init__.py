"""Procedurally generated tabletop/cabinet scenes with a kinematic
gripper-camera rig and a ray-cast renderer."""

from .core import (
    ENV_NAMES,
    SIM_INTRINSICS,
    Action,
    EgoGymEnv,
    EpisodeFinished,
    Observation,
    SimConfig,
    SimState,
    make,
)
from .failure import EpisodeTrace, FailureMode, FailureThresholds, WrongTask, classify_failure
from .scene import ArticulationKind, Primitive, SceneSpec, generate_scene

__all__ = [
    "ENV_NAMES",
    "SIM_INTRINSICS",
    "Action",
    "ArticulationKind",
    "EgoGymEnv",
    "EpisodeFinished",
    "EpisodeTrace",
    "FailureMode",
    "FailureThresholds",
    "Observation",
    "Primitive",
    "SceneSpec",
    "SimConfig",
    "SimState",
    "WrongTask",
    "classify_failure",
    "generate_scene",
    "make",
]
