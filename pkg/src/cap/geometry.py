"""SE(3) poses, pinhole camera math, and contact-anchor frame propagation.

Conventions used throughout the project:

* Camera frame: x right, y down, z forward. Depth is camera-frame z
  (not ray length).
* Rotations are unit quaternions in (w, x, y, z) order, renormalized
  after every composition. Rotation deltas are exchanged as axis-angle
  3-vectors (radians).
* All math is float64; the anchor-propagation tolerances (1e-9 m) are
  only meaningful in double precision.
* The mirror plane is x = 0, applied by conjugation M @ T @ M so that a
  mirrored scene renders as the exact horizontal flip of the original.

All types are immutable values and all operations are pure functions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "NonPositiveDepth",
    "OutOfBounds",
    "BehindCamera",
    "AnchorFrame",
    "RigidTransform",
    "CameraIntrinsics",
    "ContactAnchor",
    "compose",
    "transform_point",
    "deproject",
    "project",
    "propagate_anchor",
    "mirror_transform",
    "mirror_point",
    "quat_to_matrix",
    "matrix_to_quat",
    "rotvec_to_quat",
    "quat_to_rotvec",
]


class GeometryError(ValueError):
    """Base class for geometry-domain errors."""


class NonPositiveDepth(GeometryError):
    """Deprojection asked for at a pixel with depth <= 0 (sky / missing depth)."""


class OutOfBounds(GeometryError):
    """Pixel coordinate outside the image."""


class BehindCamera(GeometryError):
    """Projection of a point with z <= 0."""


class AnchorFrame(str, enum.Enum):
    CAMERA = "camera"
    WORLD = "world"


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise GeometryError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a proper rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return _quat_normalize(q)


def rotvec_to_quat(r: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector -> unit quaternion (w, x, y, z)."""
    r = np.asarray(r, dtype=float)
    angle = math.sqrt(float(r @ r))
    if angle < 1e-12:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * r[0], 0.5 * r[1], 0.5 * r[2]])
        return _quat_normalize(q)
    axis = r / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> axis-angle 3-vector with angle in [0, pi]."""
    w, x, y, z = q
    if w < 0:  # canonical hemisphere
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    if s < 1e-12:
        return np.array([2.0 * x, 2.0 * y, 2.0 * z])
    angle = 2.0 * math.atan2(s, w)
    return np.array([x, y, z]) * (angle / s)


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

def _frozen_array(values, shape) -> np.ndarray:
    a = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite values: {a}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) pose: unit quaternion (w, x, y, z) plus translation in meters."""

    quat: np.ndarray = field(default_factory=lambda: _frozen_array([1, 0, 0, 0], (4,)))
    trans: np.ndarray = field(default_factory=lambda: _frozen_array([0, 0, 0], (3,)))

    def __post_init__(self):
        q = _frozen_array(self.quat, (4,))
        n = math.sqrt(float(q @ q))
        if abs(n - 1.0) > 1e-6:
            raise GeometryError(f"quaternion norm {n} too far from 1")
        if abs(n - 1.0) > 1e-12:
            q = q / n
            q.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", _frozen_array(self.trans, (3,)))

    # constructors ---------------------------------------------------------
    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0, 0, 0]), np.asarray(t, dtype=float))

    @staticmethod
    def from_rotvec(r, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(rotvec_to_quat(np.asarray(r, dtype=float)), np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(matrix_to_quat(m[:3, :3]), m[:3, 3])

    # views ------------------------------------------------------------------
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m

    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.quat)

    # algebra ----------------------------------------------------------------
    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        qc = np.array([self.quat[0], -self.quat[1], -self.quat[2], -self.quat[3]])
        r_inv = quat_to_matrix(qc)
        return RigidTransform(qc, -(r_inv @ self.trans))

    def transform_point(self, p) -> np.ndarray:
        return transform_point(self, p)

    def rotation_angle_to(self, other: "RigidTransform") -> float:
        """Geodesic angle in radians between the two rotations."""
        dot = abs(float(self.quat @ other.quat))
        return 2.0 * math.acos(min(1.0, dot))

    def allclose(self, other: "RigidTransform", atol: float = 1e-12) -> bool:
        dq = min(
            float(np.abs(self.quat - other.quat).max()),
            float(np.abs(self.quat + other.quat).max()),
        )
        return dq <= atol and float(np.abs(self.trans - other.trans).max()) <= atol


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (u, v) with u right, v down."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class ContactAnchor:
    """The 3D interaction point that conditions the policy.

    ``frozen`` marks an anchor pinned after gripper closure; a frozen
    anchor is repeated verbatim instead of being propagated.
    """

    point: np.ndarray
    frame: AnchorFrame = AnchorFrame.CAMERA
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "point", _frozen_array(self.point, (3,)))
        if not isinstance(self.frame, AnchorFrame):
            object.__setattr__(self, "frame", AnchorFrame(self.frame))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b, so that (a ∘ b)(p) == a(b(p)). Quaternion renormalized."""
    q = _quat_normalize(_quat_mul(a.quat, b.quat))
    t = quat_to_matrix(a.quat) @ b.trans + a.trans
    return RigidTransform(q, t)


def transform_point(t: RigidTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return t.rotation_matrix() @ p + t.trans


def deproject(k: CameraIntrinsics, u: float, v: float, d: float) -> ContactAnchor:
    """Pixel (u, v) plus z-depth d (meters) -> camera-frame anchor.

    Raises NonPositiveDepth for d <= 0 (a click on sky or a missing-depth
    pixel) and OutOfBounds for pixels outside the image.
    """
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {k.width}x{k.height}")
    if d <= 0:
        raise NonPositiveDepth(f"depth {d} <= 0")
    p = np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return ContactAnchor(p, AnchorFrame.CAMERA)


def project(k: CameraIntrinsics, p) -> tuple[float, float]:
    """Camera-frame point -> fractional pixel (u, v). Raises BehindCamera for z <= 0."""
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise BehindCamera(f"z = {p[2]} <= 0")
    return (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)


def propagate_anchor(
    a_t: RigidTransform, a_ref: RigidTransform, anchor: ContactAnchor
) -> ContactAnchor:
    """Re-express a camera-frame anchor recorded at pose ``a_ref`` in the camera at ``a_t``.

    The returned anchor marks the same world point: a_t ∘ p_t == a_ref ∘ p_ref.
    Frozen anchors are returned unchanged.
    """
    if anchor.frame is not AnchorFrame.CAMERA:
        raise GeometryError("propagate_anchor expects a camera-frame anchor")
    if anchor.frozen:
        return anchor
    rel = compose(a_t.inverse(), a_ref)
    return ContactAnchor(transform_point(rel, anchor.point), AnchorFrame.CAMERA)


def mirror_point(p) -> np.ndarray:
    """Reflect a point across the x = 0 plane."""
    p = np.asarray(p, dtype=float)
    return np.array([-p[0], p[1], p[2]])


def mirror_transform(t: RigidTransform) -> RigidTransform:
    """Conjugate a pose by the x-negating reflection M: returns M ∘ T ∘ M.

    The conjugation keeps the rotation proper (det +1); applied to every
    pose of a scene it yields the horizontally mirrored scene. It is an
    involution.
    """
    w, x, y, z = t.quat
    return RigidTransform(np.array([w, x, -y, -z]), mirror_point(t.trans))
