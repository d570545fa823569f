"""On-disk episode format and trajectory preprocessing.

An episode directory holds::

    manifest.json        # id, task, seed, intrinsics, contact frame, metadata
    frames.jsonl         # one JSON record per frame, floats as %.17g text
    rgb/%06d.png         # 8-bit RGB, 224x224
    depth/%06d.png       # 16-bit grayscale, integer millimeters, 0 = no depth

Floats are serialized as decimal text with 17 significant digits so that
read(write(e)) reproduces every pose and aperture bit-exactly. Depth is
stored (and kept in memory) as uint16 millimeters; the 0 sentinel marks
pixels with no depth and maps onto NonPositiveDepth at deprojection time.

Preprocessing ops: aperture from finger centroids, static-frame
filtering, and horizontal mirroring.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    CameraIntrinsics,
    ContactAnchor,
    RigidTransform,
    mirror_point,
    mirror_transform,
)

__all__ = [
    "SCHEMA_VERSION",
    "IMAGE_SIZE",
    "Task",
    "Frame",
    "Episode",
    "CentroidTrack",
    "EpisodeStoreError",
    "MissingManifest",
    "SchemaVersionMismatch",
    "CorruptFrameLine",
    "ImageReadFailure",
    "DegenerateCalibration",
    "write_episode",
    "read_episode",
    "aperture_from_centroids",
    "filter_static",
    "mirror_episode",
    "rgb_ref_for",
    "depth_ref_for",
]

SCHEMA_VERSION = 1
IMAGE_SIZE = 224

TRANS_THRESH = 0.003  # meters
ROT_THRESH = 0.1  # radians
APER_THRESH = 0.05  # aperture units


class EpisodeStoreError(Exception):
    """Base class for episode storage errors."""


class MissingManifest(EpisodeStoreError):
    pass


class SchemaVersionMismatch(EpisodeStoreError):
    pass


class CorruptFrameLine(EpisodeStoreError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"frames.jsonl line {line_number}: {reason}")
        self.line_number = line_number


class ImageReadFailure(EpisodeStoreError):
    pass


class DegenerateCalibration(EpisodeStoreError):
    pass


class Task(str, enum.Enum):
    PICK = "Pick"
    OPEN = "Open"
    CLOSE = "Close"


def rgb_ref_for(index: int) -> str:
    return f"rgb/{index:06d}.png"


def depth_ref_for(index: int) -> str:
    return f"depth/{index:06d}.png"


def _check_rgb(a: np.ndarray) -> np.ndarray:
    if a.shape != (IMAGE_SIZE, IMAGE_SIZE, 3) or a.dtype != np.uint8:
        raise EpisodeStoreError(f"rgb must be uint8 {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {a.dtype} {a.shape}")
    return a


def _check_depth(a: np.ndarray) -> np.ndarray:
    if a.shape != (IMAGE_SIZE, IMAGE_SIZE) or a.dtype != np.uint16:
        raise EpisodeStoreError(f"depth must be uint16 {IMAGE_SIZE}x{IMAGE_SIZE}, got {a.dtype} {a.shape}")
    return a


@dataclass(frozen=True)
class Frame:
    """One timestep: camera pose in world, gripper apertures, image refs.

    ``rgb`` / ``depth`` optionally hold the pixel data in memory (freshly
    collected or mirrored episodes); persisted episodes carry only the
    relative refs and load pixels on demand.
    """

    index: int
    pose: RigidTransform
    aperture_cmd: float
    aperture_meas: float
    rgb_ref: str = ""
    depth_ref: str = ""
    anchor: ContactAnchor | None = None
    rgb: np.ndarray | None = dataclasses.field(default=None, repr=False, compare=False)
    depth: np.ndarray | None = dataclasses.field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("aperture_cmd", "aperture_meas"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise EpisodeStoreError(f"{name} = {v} outside [0, 1]")
        if self.rgb is not None:
            _check_rgb(self.rgb)
        if self.depth is not None:
            _check_depth(self.depth)


@dataclass(frozen=True)
class Episode:
    """An ordered trajectory of frames plus identity and calibration."""

    id: str
    task: Task
    seed: int
    frames: tuple[Frame, ...]
    intrinsics: CameraIntrinsics
    contact_frame: int | None = None
    metadata: dict[str, str] = field(default_factory=dict)
    root: Path | None = dataclasses.field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "task", Task(self.task))
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise EpisodeStoreError(f"frame indices not strictly increasing: {idx}")
        if self.contact_frame is not None and not (0 <= self.contact_frame < len(self.frames)):
            raise EpisodeStoreError(
                f"contact_frame {self.contact_frame} outside [0, {len(self.frames)})"
            )
        with_anchor = sum(1 for f in self.frames if f.anchor is not None)
        if with_anchor not in (0, len(self.frames)):
            raise EpisodeStoreError("anchors must be set on all frames or none")
        object.__setattr__(
            self, "metadata", {str(k): str(v) for k, v in dict(self.metadata).items()}
        )

    def __len__(self) -> int:
        return len(self.frames)

    # image access ----------------------------------------------------------
    def _load_png(self, ref: str) -> np.ndarray:
        if not ref:
            raise ImageReadFailure("frame has no image reference")
        if self.root is None:
            raise ImageReadFailure(f"episode has no root directory to resolve {ref!r}")
        path = Path(self.root) / ref
        try:
            with Image.open(path) as im:
                return np.asarray(im)
        except (OSError, ValueError) as err:
            raise ImageReadFailure(f"cannot read {path}: {err}") from err

    def rgb(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if f.rgb is not None:
            return f.rgb
        return _check_rgb(self._load_png(f.rgb_ref))

    def depth_mm(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if f.depth is not None:
            return f.depth
        return _check_depth(self._load_png(f.depth_ref).astype(np.uint16))

    def depth_m(self, i: int) -> np.ndarray:
        """Depth in meters, float64; 0 where the sensor has no return."""
        return self.depth_mm(i).astype(np.float64) / 1000.0

    def apertures_meas(self) -> np.ndarray:
        return np.array([f.aperture_meas for f in self.frames])

    def apertures_cmd(self) -> np.ndarray:
        return np.array([f.aperture_cmd for f in self.frames])


@dataclass(frozen=True)
class CentroidTrack:
    """Per-frame left/right finger centroids in pixels plus the open/closed calibration."""

    left: np.ndarray  # (T, 2)
    right: np.ndarray  # (T, 2)
    d_open: float
    d_closed: float

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float).reshape(-1, 2)
        right = np.asarray(self.right, dtype=float).reshape(-1, 2)
        if left.shape != right.shape:
            raise EpisodeStoreError("left/right centroid tracks differ in length")
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        if not (self.d_closed >= 0.0 and math.isfinite(self.d_open)):
            raise DegenerateCalibration(f"d_closed = {self.d_closed} must be >= 0")
        if self.d_open <= self.d_closed:
            raise DegenerateCalibration(
                f"d_open = {self.d_open} must exceed d_closed = {self.d_closed}"
            )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _dumps(obj) -> str:
    """JSON text with every float rendered as %.17g (lossless decimal)."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise EpisodeStoreError(f"non-finite float in record: {obj}")
        return format(obj, ".17g")
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _dumps([float(v) for v in obj.tolist()])
    raise TypeError(f"cannot serialize {type(obj)}")


def _frame_record(f: Frame) -> dict:
    rec = {
        "index": f.index,
        "quat": f.pose.quat,
        "trans": f.pose.trans,
        "aperture_cmd": float(f.aperture_cmd),
        "aperture_meas": float(f.aperture_meas),
        "rgb_ref": f.rgb_ref,
        "depth_ref": f.depth_ref,
        "anchor": None,
    }
    if f.anchor is not None:
        rec["anchor"] = {
            "point": f.anchor.point,
            "frame": f.anchor.frame.value,
            "frozen": bool(f.anchor.frozen),
        }
    return rec


def _frame_from_record(rec: dict, root: Path) -> Frame:
    anchor = None
    if rec.get("anchor") is not None:
        a = rec["anchor"]
        anchor = ContactAnchor(
            np.array([float(v) for v in a["point"]]),
            a.get("frame", "camera"),
            bool(a.get("frozen", False)),
        )
    return Frame(
        index=int(rec["index"]),
        pose=RigidTransform(
            np.array([float(v) for v in rec["quat"]]),
            np.array([float(v) for v in rec["trans"]]),
        ),
        aperture_cmd=float(rec["aperture_cmd"]),
        aperture_meas=float(rec["aperture_meas"]),
        rgb_ref=str(rec["rgb_ref"]),
        depth_ref=str(rec["depth_ref"]),
        anchor=anchor,
    )


def write_episode(e: Episode, out_dir: Path | str) -> Path:
    """Persist an episode; returns the manifest path.

    Frames holding in-memory pixels get them encoded to PNG under the
    frame's ref (or the canonical ``rgb/%06d.png`` layout when the ref is
    empty); frames holding only refs have their images copied from the
    episode's root directory.
    """
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)

    frames = []
    for i, f in enumerate(e.frames):
        rgb_ref = f.rgb_ref or rgb_ref_for(f.index)
        depth_ref = f.depth_ref or depth_ref_for(f.index)
        rgb = f.rgb if f.rgb is not None else e.rgb(i)
        depth = f.depth if f.depth is not None else e.depth_mm(i)
        Image.fromarray(_check_rgb(rgb)).save(out / rgb_ref)
        Image.fromarray(_check_depth(depth)).save(out / depth_ref)
        frames.append(dataclasses.replace(f, rgb_ref=rgb_ref, depth_ref=depth_ref))

    with open(out / "frames.jsonl", "w") as fh:
        for f in frames:
            fh.write(_dumps(_frame_record(f)) + "\n")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "id": e.id,
        "task": e.task.value,
        "seed": int(e.seed),
        "num_frames": len(e.frames),
        "contact_frame": e.contact_frame,
        "intrinsics": {
            "fx": float(e.intrinsics.fx),
            "fy": float(e.intrinsics.fy),
            "cx": float(e.intrinsics.cx),
            "cy": float(e.intrinsics.cy),
            "width": e.intrinsics.width,
            "height": e.intrinsics.height,
        },
        "metadata": e.metadata,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(_dumps(manifest) + "\n")
    return manifest_path


def read_episode(ep_dir: Path | str, images: bool = False) -> Episode:
    """Load an episode directory. With ``images=True`` pixel data is loaded eagerly."""
    root = Path(ep_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingManifest(f"no manifest.json under {root}")
    m = json.loads(manifest_path.read_text())
    version = m.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema_version {version}, expected {SCHEMA_VERSION}")

    frames: list[Frame] = []
    with open(root / "frames.jsonl") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames.append(_frame_from_record(rec, root))
            except (ValueError, KeyError, TypeError, EpisodeStoreError) as err:
                raise CorruptFrameLine(lineno, str(err)) from err

    if len(frames) != int(m["num_frames"]):
        raise EpisodeStoreError(
            f"manifest says {m['num_frames']} frames, frames.jsonl has {len(frames)}"
        )

    k = m["intrinsics"]
    episode = Episode(
        id=str(m["id"]),
        task=Task(m["task"]),
        seed=int(m["seed"]),
        frames=tuple(frames),
        intrinsics=CameraIntrinsics(
            fx=float(k["fx"]),
            fy=float(k["fy"]),
            cx=float(k["cx"]),
            cy=float(k["cy"]),
            width=int(k["width"]),
            height=int(k["height"]),
        ),
        contact_frame=None if m.get("contact_frame") is None else int(m["contact_frame"]),
        metadata={str(a): str(b) for a, b in m.get("metadata", {}).items()},
        root=root,
    )
    if images:
        loaded = tuple(
            dataclasses.replace(f, rgb=episode.rgb(i), depth=episode.depth_mm(i))
            for i, f in enumerate(episode.frames)
        )
        episode = dataclasses.replace(episode, frames=loaded)
    return episode


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def aperture_from_centroids(track: CentroidTrack) -> np.ndarray:
    """Linear map of finger-centroid distance to [0, 1] aperture, clamped."""
    dist = np.linalg.norm(track.left - track.right, axis=1)
    a = (dist - track.d_closed) / (track.d_open - track.d_closed)
    return np.clip(a, 0.0, 1.0)


def filter_static(
    e: Episode,
    trans_thresh: float = TRANS_THRESH,
    rot_thresh: float = ROT_THRESH,
    aper_thresh: float = APER_THRESH,
) -> Episode:
    """Drop frames that barely move relative to the last kept frame.

    Frame 0 is always kept. A later frame survives when its displacement
    from the last kept frame exceeds any threshold: straight-line
    translation, geodesic rotation angle, or absolute commanded-aperture
    change. Comparing against the last *kept* frame (rather than summing
    per-frame increments) makes the filter exactly idempotent. The
    contact frame is remapped to the nearest kept frame at or before it.
    """
    if len(e.frames) == 0:
        raise EpisodeStoreError("cannot filter an empty episode")
    kept = [0]
    for t in range(1, len(e.frames)):
        ref, cur = e.frames[kept[-1]], e.frames[t]
        d_trans = float(np.linalg.norm(cur.pose.trans - ref.pose.trans))
        d_rot = ref.pose.rotation_angle_to(cur.pose)
        d_aper = abs(cur.aperture_cmd - ref.aperture_cmd)
        if d_trans > trans_thresh or d_rot > rot_thresh or d_aper > aper_thresh:
            kept.append(t)

    contact = e.contact_frame
    if contact is not None:
        contact = max(i for i, t in enumerate(kept) if t <= e.contact_frame)
    return dataclasses.replace(
        e, frames=tuple(e.frames[t] for t in kept), contact_frame=contact
    )


def mirror_episode(e: Episode) -> Episode:
    """Horizontally mirrored copy: flipped images, conjugated poses, reflected anchors.

    The principal point is reflected too (cx -> width-1-cx) so projections
    stay consistent with the flipped pixels for off-center cameras; with
    the standard centered calibration it is unchanged. Involution up to
    image re-encoding and 1e-12 pose tolerance.
    """
    frames = []
    for i, f in enumerate(e.frames):
        rgb = np.ascontiguousarray(e.rgb(i)[:, ::-1])
        depth = np.ascontiguousarray(e.depth_mm(i)[:, ::-1])
        anchor = f.anchor
        if anchor is not None:
            anchor = ContactAnchor(mirror_point(anchor.point), anchor.frame, anchor.frozen)
        frames.append(
            dataclasses.replace(
                f, pose=mirror_transform(f.pose), anchor=anchor, rgb=rgb, depth=depth
            )
        )
    k = e.intrinsics
    mirrored_k = CameraIntrinsics(
        fx=k.fx, fy=k.fy, cx=(k.width - 1) - k.cx, cy=k.cy, width=k.width, height=k.height
    )
    meta = dict(e.metadata)
    meta["mirrored"] = "false" if meta.get("mirrored") == "true" else "true"
    return dataclasses.replace(
        e, frames=tuple(frames), intrinsics=mirrored_k, metadata=meta, root=None
    )
