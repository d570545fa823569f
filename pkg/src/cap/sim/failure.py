"""Outcome classification for finished rollouts.

Pick rollouts are sorted into an ordered taxonomy; the first matching
rule wins, so each trace lands in exactly one bucket. Open/Close
rollouts only distinguish success, touched-but-unmoved, and never
touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from ..episodes import Task

__all__ = ["FailureMode", "FailureThresholds", "EpisodeTrace", "WrongTask", "classify_failure"]


class WrongTask(ValueError):
    """Trace task does not match what the classifier was asked for."""


class FailureMode(str, Enum):
    SUCCESS = "Success"
    DID_NOT_LIFT_ENOUGH = "DidNotLiftEnough"
    TOUCHED_NOT_GRASPED = "TouchedNotGrasped"
    PICKED_WRONG_OBJECT = "PickedWrongObject"
    EMPTY_GRASP = "EmptyGrasp"
    DID_NOT_GRASP = "DidNotGrasp"


@dataclass(frozen=True)
class FailureThresholds:
    lift_success: float = 0.03
    lift_partial: float = 0.005
    closed_eps: float = 0.02


@dataclass(frozen=True)
class EpisodeTrace:
    """The rollout facts classification needs, nothing else."""

    task: Task
    target_contact: bool
    distractor_contact: bool
    finger_self_contact: bool
    max_lift: float
    final_aperture_meas: float

    @staticmethod
    def from_state(scene, state) -> "EpisodeTrace":
        contacts = state.contact_dict()
        target_idx = next((j for j, o in enumerate(scene.objects) if o.is_target), -1)
        target_contact = f"object:{target_idx}" in contacts
        distractor_contact = any(
            k.startswith("object:") and k != f"object:{target_idx}" for k in contacts
        )
        return EpisodeTrace(
            task=scene.task,
            target_contact=target_contact,
            distractor_contact=distractor_contact,
            finger_self_contact="fingers" in contacts,
            max_lift=float(state.max_lift),
            final_aperture_meas=float(state.aperture_meas),
        )


def classify_failure(trace: EpisodeTrace, thresholds: FailureThresholds | None = None) -> FailureMode:
    """First matching rule in the fixed order decides the outcome."""
    if trace.task is not Task.PICK:
        raise WrongTask(f"classification covers Pick rollouts, got {trace.task.value}")
    t = thresholds or FailureThresholds()
    if trace.max_lift > t.lift_success:
        return FailureMode.SUCCESS
    if trace.target_contact and trace.max_lift >= t.lift_partial:
        return FailureMode.DID_NOT_LIFT_ENOUGH
    if trace.target_contact:
        return FailureMode.TOUCHED_NOT_GRASPED
    if trace.distractor_contact:
        return FailureMode.PICKED_WRONG_OBJECT
    if trace.finger_self_contact or trace.final_aperture_meas <= t.closed_eps:
        return FailureMode.EMPTY_GRASP
    return FailureMode.DID_NOT_GRASP
