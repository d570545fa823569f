"""Residual vector quantizer for 7-D gripper actions.

Actions (translation delta, rotation vector, gripper command) are
normalized per dimension, then coded by a short cascade of k-means
codebooks: each stage quantizes the residual the previous stages left.
Encoding is a nearest-centroid lookup per stage, ties resolved to the
lowest index; decoding sums the chosen centroids and de-normalizes.

Fitting is deterministic for a fixed seed: k-means++ seeding, Lloyd
iteration capped at 100 rounds or a 1e-8 total centroid shift, empty
clusters reseeded to the point farthest from its assigned centroid.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .episodes import Episode

__all__ = [
    "ActionCodec",
    "CodecError",
    "InsufficientData",
    "IndexOutOfRange",
    "DegenerateDimension",
    "fit_codec",
    "episode_actions",
    "STAGE_SIZES",
]

ACTION_DIM = 7
_MAX_ITERS = 100
_SHIFT_TOL = 1e-8

# stage layout per task family: free-space pick vs articulated
STAGE_SIZES = {"pick": (16, 16), "articulated": (32, 32)}


class CodecError(ValueError):
    pass


class InsufficientData(CodecError):
    """Fewer samples than the largest requested codebook."""


class IndexOutOfRange(CodecError, IndexError):
    """Decode called with a code outside its stage's codebook."""


class DegenerateDimension(UserWarning):
    """A dimension with no variance; its scale is clamped to 1."""


def episode_actions(episode: Episode) -> np.ndarray:
    """(T-1, 7) executed actions: consecutive-pose deltas expressed in the
    earlier frame, plus that frame's gripper command."""
    frames = episode.frames
    out = np.zeros((len(frames) - 1, ACTION_DIM))
    for t in range(len(frames) - 1):
        rel = frames[t].pose.inverse() @ frames[t + 1].pose
        out[t, :3] = rel.trans
        out[t, 3:6] = rel.rotvec()
        out[t, 6] = frames[t].aperture_cmd
    return out


@dataclass(frozen=True)
class ActionCodec:
    mean: np.ndarray  # (7,)
    scale: np.ndarray  # (7,)
    stages: tuple  # of (k_s, 7) arrays in normalized space

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(ACTION_DIM)
        scale = np.asarray(self.scale, dtype=float).reshape(ACTION_DIM)
        if np.any(scale <= 0):
            raise CodecError("scales must be positive")
        stages = tuple(np.asarray(s, dtype=float).reshape(-1, ACTION_DIM) for s in self.stages)
        if not stages:
            raise CodecError("need at least one stage")
        mean.setflags(write=False)
        scale.setflags(write=False)
        for s in stages:
            s.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "stages", stages)

    @property
    def stage_sizes(self) -> tuple:
        return tuple(len(s) for s in self.stages)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(actions) - self.mean) / self.scale

    def _greedy_norm(self, z: np.ndarray) -> np.ndarray:
        codes = np.zeros((len(z), len(self.stages)), dtype=np.int32)
        residual = z
        for s, centroids in enumerate(self.stages):
            d = np.linalg.norm(residual[:, None, :] - centroids[None, :, :], axis=2)
            idx = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
            codes[:, s] = idx
            residual = residual - centroids[idx]
        return codes

    def _decode_norm(self, codes: np.ndarray) -> np.ndarray:
        total = np.zeros((len(codes), ACTION_DIM))
        for s, centroids in enumerate(self.stages):
            total += centroids[np.asarray(codes)[:, s]]
        return total

    def _stabilize(self, start: tuple) -> tuple:
        # follow codes -> greedy(reconstruction) until it cycles; the
        # lexicographically smallest member of the cycle is a fixed point
        # of this same procedure, which is what makes encode idempotent
        seen = {}
        c = start
        while c not in seen:
            seen[c] = len(seen)
            z = self._decode_norm(np.array([c], dtype=np.int32))
            c = tuple(self._greedy_norm(z)[0])
        first = seen[c]
        cycle = [k for k, v in seen.items() if v >= first]
        return min(cycle)

    def encode(self, actions: np.ndarray) -> np.ndarray:
        """(N, n_stages) int32 codes: nearest centroid per residual stage,
        stabilized so that re-encoding a reconstruction returns the same
        codes exactly."""
        z = self.normalize(np.asarray(actions, dtype=float))
        codes = self._greedy_norm(z)
        again = self._greedy_norm(self._decode_norm(codes))
        for i in np.flatnonzero(np.any(again != codes, axis=1)):
            codes[i] = self._stabilize(tuple(int(v) for v in again[i]))
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(np.asarray(codes, dtype=int))
        if codes.shape[1] != len(self.stages):
            raise CodecError(
                f"codes have {codes.shape[1]} stages, codec has {len(self.stages)}"
            )
        total = np.zeros((len(codes), ACTION_DIM))
        for s, centroids in enumerate(self.stages):
            if np.any(codes[:, s] < 0) or np.any(codes[:, s] >= len(centroids)):
                raise IndexOutOfRange(f"stage {s} code out of range")
            total += centroids[codes[:, s]]
        return total * self.scale + self.mean

    def reconstruction_mse(self, actions: np.ndarray, n_stages: int | None = None) -> float:
        """Mean squared error in normalized space over the given actions,
        using the first n_stages codebooks."""
        use = len(self.stages) if n_stages is None else n_stages
        residual = self.normalize(np.asarray(actions, dtype=float))
        for centroids in self.stages[:use]:
            d = np.linalg.norm(residual[:, None, :] - centroids[None, :, :], axis=2)
            residual = residual - centroids[np.argmin(d, axis=1)]
        return float(np.mean(np.sum(residual**2, axis=1)))

    # ------------------------------------------------------------------
    def to_json(self) -> str:
        def f(x):
            return [float(f"{v:.17g}") for v in np.asarray(x).ravel()]

        payload = {
            "action_dim": ACTION_DIM,
            "mean": f(self.mean),
            "scale": f(self.scale),
            "stages": [
                {"size": len(s), "centroids": f(s)} for s in self.stages
            ],
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "ActionCodec":
        payload = json.loads(text)
        if payload.get("action_dim") != ACTION_DIM:
            raise CodecError("unexpected action dimension")
        stages = tuple(
            np.array(s["centroids"], dtype=float).reshape(s["size"], ACTION_DIM)
            for s in payload["stages"]
        )
        return ActionCodec(
            mean=np.array(payload["mean"], dtype=float),
            scale=np.array(payload["scale"], dtype=float),
            stages=stages,
        )

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "ActionCodec":
        with open(path) as fh:
            return ActionCodec.from_json(fh.read())


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Standard seeding: first centroid uniform, then distance-weighted."""
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            centroids[i:] = centroids[0]
            return centroids
        probs = d2 / total
        centroids[i] = x[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = len(centroids)
    centroids = centroids.copy()
    for _ in range(_MAX_ITERS):
        d = np.linalg.norm(x[:, None, :] - centroids[None, :, :], axis=2)
        assign = np.argmin(d, axis=1)
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster on the worst-served point
                worst = int(np.argmax(d[np.arange(len(x)), assign]))
                new[j] = x[worst]
        shift = float(np.linalg.norm(new - centroids))
        centroids = new
        if shift < _SHIFT_TOL:
            break
    return centroids


def fit_codec(actions: np.ndarray, stage_sizes, seed: int = 0) -> ActionCodec:
    """Fit the normalizer and the residual codebook cascade."""
    x = np.asarray(actions, dtype=float)
    if x.ndim != 2 or x.shape[1] != ACTION_DIM:
        raise CodecError(f"expected (N, {ACTION_DIM}) actions, got {x.shape}")
    stage_sizes = tuple(int(k) for k in stage_sizes)
    if not stage_sizes or any(k < 2 for k in stage_sizes):
        raise CodecError("stage sizes must be at least 2")
    if len(x) < max(stage_sizes):
        raise InsufficientData(
            f"{len(x)} samples cannot support a {max(stage_sizes)}-entry codebook"
        )

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    flat = scale <= 1e-12
    if np.any(flat):
        warnings.warn(
            f"dimensions {np.flatnonzero(flat).tolist()} have no variance; scale clamped to 1",
            DegenerateDimension,
        )
        scale = np.where(flat, 1.0, scale)

    rng = np.random.default_rng(seed)
    residual = (x - mean) / scale
    stages = []
    for k in stage_sizes:
        centroids = _lloyd(residual, _kmeans_pp_init(residual, k, rng))
        stages.append(centroids)
        d = np.linalg.norm(residual[:, None, :] - centroids[None, :, :], axis=2)
        residual = residual - centroids[np.argmin(d, axis=1)]
    return ActionCodec(mean=mean, scale=scale, stages=tuple(stages))
