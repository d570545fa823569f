"""Hindsight contact labeling.

After a demonstration is recorded, the frame where the gripper stopped
closing is taken as the moment of contact. The 3D point centered
between the fingertips at that frame becomes the contact anchor: it is
propagated backward through the camera poses for earlier frames and
frozen (repeated verbatim) from contact onward.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .episodes import Episode, Task
from .geometry import ContactAnchor, propagate_anchor

__all__ = [
    "ContactDetectionConfig",
    "GripperGeometry",
    "NoContactFound",
    "detect_contact",
    "label_anchors",
]


class NoContactFound(ValueError):
    """No frame satisfies the closing-then-stall criterion; discard the episode."""


@dataclass(frozen=True)
class ContactDetectionConfig:
    """Windowed aperture-stall rule parameters.

    A frame counts as the contact frame when the gripper has closed by at
    least ``min_close`` since the start and the aperture stops decreasing
    (drops less than ``stall_eps``) over the next ``stall_window`` frames.
    """

    stall_eps: float = 0.01
    stall_window: int = 5
    min_close: float = 0.2

    def __post_init__(self):
        if not self.stall_eps > 0:
            raise ValueError(f"stall_eps must be > 0, got {self.stall_eps}")
        if self.stall_window < 1:
            raise ValueError(f"stall_window must be >= 1, got {self.stall_window}")
        if not (0 < self.min_close <= 1):
            raise ValueError(f"min_close must be in (0, 1], got {self.min_close}")


@dataclass(frozen=True)
class GripperGeometry:
    """Fixed camera-frame position of the point centered between the fingertips."""

    tip_offset: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tip_offset, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"tip_offset must be finite, got {t}")
        t.setflags(write=False)
        object.__setattr__(self, "tip_offset", t)


def detect_contact(apertures, cfg: ContactDetectionConfig = ContactDetectionConfig()) -> int:
    """Smallest index where the gripper has closed by min_close and then stalls.

    The stall check clamps its lookahead at the final frame, so a close
    that holds through the end of the episode is detected.
    """
    a = np.asarray(apertures, dtype=float)
    if a.size == 0:
        raise ValueError("empty aperture sequence")
    end = a.size - 1
    for t in range(a.size):
        if a[0] - a[t] < cfg.min_close:
            continue
        future = a[[min(t + k, end) for k in range(1, cfg.stall_window + 1)]]
        if np.all(a[t] - future < cfg.stall_eps):
            return t
    raise NoContactFound(
        f"no aperture stall after closing by {cfg.min_close} in {a.size} frames"
    )


def label_anchors(
    e: Episode,
    cfg: ContactDetectionConfig = ContactDetectionConfig(),
    gripper: GripperGeometry = GripperGeometry((0.0, 0.0, 0.0)),
) -> Episode:
    """Attach a contact anchor to every frame and record the contact index.

    The anchor at contact is the fingertip midpoint ``gripper.tip_offset``,
    a camera-frame constant. Earlier frames get the same world point
    re-expressed through their camera poses; later frames repeat it with
    ``frozen=True``. Close-task episodes trust the contact index recorded
    at collection time (the gripper starts closed, so the stall rule has
    nothing to detect) and fail without one.
    """
    if e.task is Task.CLOSE:
        if e.contact_frame is None:
            raise NoContactFound("Close episode has no recorded contact_frame")
        c = e.contact_frame
    else:
        c = detect_contact(e.apertures_meas(), cfg)

    p_c = ContactAnchor(gripper.tip_offset, frozen=False)
    a_c = e.frames[c].pose
    frozen = ContactAnchor(gripper.tip_offset, frozen=True)

    frames = []
    for t, f in enumerate(e.frames):
        if t < c:
            anchor = propagate_anchor(f.pose, a_c, p_c)
        else:
            anchor = frozen
        frames.append(dataclasses.replace(f, anchor=anchor))
    return dataclasses.replace(e, frames=tuple(frames), contact_frame=c)
