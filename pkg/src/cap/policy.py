"""Contact-conditioned visuomotor policy.

Observations become small fixed tokens: a 12x12 block-mean of the RGB
frame plus the contact anchor in the current camera frame, scaled by
1/2 m. A context window of k=3 tokens feeds a one-hidden-layer head
that classifies residual action codes (one softmax per codec stage)
and regresses a continuous offset. Gradients are written out by hand
and verified against central finite differences before every training
run; everything is plain float64 numpy, bit-reproducible for a fixed
seed on one worker.

Inference tracks the anchor with the gripper's own pose updates
(p_t = A_t^-1 A_0 p_0) and freezes it once the measured aperture has
closed and stalled, matching how training anchors were labeled.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codec import ActionCodec, episode_actions
from .geometry import AnchorFrame, ContactAnchor, RigidTransform, propagate_anchor
from .sim.core import Action, Observation

__all__ = [
    "POOL_BLOCKS",
    "TOKEN_DIM",
    "CONTEXT",
    "ANCHOR_SCALE",
    "WrongFrame",
    "NoAnchor",
    "EmptyDataset",
    "GradientCheckFailed",
    "FeatureToken",
    "PolicyConfig",
    "PolicyModel",
    "TrainReport",
    "featurize",
    "build_dataset",
    "train",
    "gradient_check",
    "PolicyRunner",
]

POOL_BLOCKS = 12
_CROP = 216  # center crop, symmetric so a horizontal flip maps blocks to blocks
_BLOCK = _CROP // POOL_BLOCKS
Z_V_DIM = POOL_BLOCKS * POOL_BLOCKS * 3
Z_C_DIM = 3
TOKEN_DIM = Z_V_DIM + Z_C_DIM
CONTEXT = 3
ANCHOR_SCALE = 0.5  # anchor meters -> feature units


class WrongFrame(ValueError):
    """Anchor supplied in the wrong coordinate frame."""


class NoAnchor(RuntimeError):
    """Inference started without a contact prompt."""


class EmptyDataset(ValueError):
    """No trainable samples."""


class GradientCheckFailed(RuntimeError):
    """Analytic gradients disagree with finite differences."""


@dataclass(frozen=True)
class FeatureToken:
    """One observation token: pooled pixels plus the scaled anchor."""

    z_v: np.ndarray  # (432,) in [0, 1]
    z_c: np.ndarray  # (3,)

    @property
    def s_t(self) -> np.ndarray:
        return np.concatenate([self.z_v, self.z_c])


def featurize(obs, anchor: ContactAnchor, *, rgb_only: bool = False) -> FeatureToken:
    """Pool the RGB frame and scale the camera-frame anchor.

    ``obs`` is an Observation or a raw (224, 224, 3) uint8 array. The
    anchor must already be in the camera frame; a world-frame anchor is
    a caller bug, not something to silently convert.
    """
    rgb = obs.rgb if isinstance(obs, Observation) else obs
    rgb = np.asarray(rgb)
    if rgb.shape != (224, 224, 3):
        raise ValueError(f"expected a (224, 224, 3) image, got {rgb.shape}")
    if anchor.frame is not AnchorFrame.CAMERA:
        raise WrongFrame(f"anchor frame {anchor.frame.value!r}, need camera frame")
    point = np.asarray(anchor.point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise ValueError("non-finite anchor")

    lo = (224 - _CROP) // 2
    crop = rgb[lo:lo + _CROP, lo:lo + _CROP].astype(np.float64)
    pooled = crop.reshape(POOL_BLOCKS, _BLOCK, POOL_BLOCKS, _BLOCK, 3).mean(axis=(1, 3))
    z_v = (pooled / 255.0).reshape(-1)
    z_c = np.zeros(3) if rgb_only else point * ANCHOR_SCALE
    return FeatureToken(z_v=z_v, z_c=z_c)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class PolicyConfig:
    hidden: int = 128
    context: int = CONTEXT
    learning_rate: float = 0.05
    lr_decay: float = 1.0  # per-step multiplier; <1 anneals the L1 oscillation away
    decay_start: int = 0  # steps at constant learning_rate before lr_decay applies
    momentum: float = 0.0
    steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    rgb_only: bool = False
    grad_check_coords: int = 100
    grad_check_step: float = 1e-5
    grad_check_tol: float = 1e-4
    eval_every: int = 0  # 0 disables the hook
    offset_weight: float = 1.0


@dataclass
class TrainReport:
    param_count: int
    grad_check_max_rel_err: float
    losses: list = field(default_factory=list)
    final_token_accuracy: float = 0.0
    hook_records: list = field(default_factory=list)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class PolicyModel:
    """Token embedding, context head, per-stage code logits, offset head."""

    def __init__(self, codec: ActionCodec, cfg: PolicyConfig):
        self.codec = codec
        self.context = cfg.context
        self.hidden = cfg.hidden
        self.rgb_only = cfg.rgb_only
        self.offset_weight = cfg.offset_weight
        self.codebook_hash = hashlib.sha256(codec.to_json().encode()).hexdigest()[:16]
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden
        sizes = codec.stage_sizes
        self.params = {
            "w_embed": rng.normal(0, 1, (TOKEN_DIM, h)) / np.sqrt(TOKEN_DIM),
            "b_embed": np.zeros(h),
            "w_hidden": rng.normal(0, 1, (cfg.context * h, h)) / np.sqrt(cfg.context * h),
            "b_hidden": np.zeros(h),
            "w_offset": rng.normal(0, 1, (h, 7)) / np.sqrt(h),
            "b_offset": np.zeros(7),
        }
        for s, k in enumerate(sizes):
            self.params[f"w_logits{s}"] = rng.normal(0, 1, (h, k)) / np.sqrt(h)
            self.params[f"b_logits{s}"] = np.zeros(k)
        # Input whitening, fit on the training set. Composes with w_embed into
        # a plain linear map of the token, but conditions the gradients.
        self.input_mean = np.zeros(TOKEN_DIM)
        self.input_proj = np.eye(TOKEN_DIM)

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_input_whitening(self, tokens: np.ndarray) -> None:
        """Fit a ZCA transform on (N, k, TOKEN_DIM) training tokens."""
        flat = tokens.reshape(-1, TOKEN_DIM)
        mu = flat.mean(axis=0)
        centered = flat - mu
        cov = centered.T @ centered / len(flat)
        lam, vec = np.linalg.eigh(cov)
        # Relative floor caps the gain on near-constant directions so unseen
        # inputs are not amplified into noise.
        floor = max(float(lam.max()) * 1e-4, 1e-12)
        scale = 1.0 / np.sqrt(np.maximum(lam, floor))
        self.input_mean = mu
        self.input_proj = (vec * scale) @ vec.T

    def _forward(self, tokens: np.ndarray):
        """tokens (B, k, TOKEN_DIM) -> (per-stage logits, offsets, cache)."""
        p = self.params
        b = len(tokens)
        tokens = (tokens - self.input_mean) @ self.input_proj
        e = tokens @ p["w_embed"] + p["b_embed"]
        x = e.reshape(b, self.context * self.hidden)
        pre = x @ p["w_hidden"] + p["b_hidden"]
        h = np.tanh(pre)
        logits = [h @ p[f"w_logits{s}"] + p[f"b_logits{s}"]
                  for s in range(len(self.codec.stages))]
        offset = h @ p["w_offset"] + p["b_offset"]
        return logits, offset, (tokens, x, h)

    def loss(self, tokens, codes, offsets) -> float:
        logits, off, _ = self._forward(tokens)
        b = len(tokens)
        total = 0.0
        for s, lg in enumerate(logits):
            z = lg - lg.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total += -float(logp[np.arange(b), codes[:, s]].mean())
        total += self.offset_weight * float(np.abs(off - offsets).sum(axis=1).mean())
        return total

    def loss_and_grads(self, tokens, codes, offsets):
        """Returns (loss, grads keyed like params, token accuracy)."""
        p = self.params
        logits, off, (tok, x, h) = self._forward(tokens)
        b = len(tokens)

        loss = 0.0
        correct = 0
        dh = np.zeros_like(h)
        grads = {}
        for s, lg in enumerate(logits):
            probs = _softmax(lg)
            z = lg - lg.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss += -float(logp[np.arange(b), codes[:, s]].mean())
            correct += int((lg.argmax(axis=1) == codes[:, s]).sum())
            dlg = probs
            dlg[np.arange(b), codes[:, s]] -= 1.0
            dlg /= b
            grads[f"w_logits{s}"] = h.T @ dlg
            grads[f"b_logits{s}"] = dlg.sum(axis=0)
            dh += dlg @ p[f"w_logits{s}"].T

        resid = off - offsets
        loss += self.offset_weight * float(np.abs(resid).sum(axis=1).mean())
        doff = self.offset_weight * np.sign(resid) / b
        grads["w_offset"] = h.T @ doff
        grads["b_offset"] = doff.sum(axis=0)
        dh += doff @ p["w_offset"].T

        dpre = dh * (1.0 - h**2)
        grads["w_hidden"] = x.T @ dpre
        grads["b_hidden"] = dpre.sum(axis=0)
        dx = dpre @ p["w_hidden"].T
        de = dx.reshape(b, self.context, self.hidden)
        grads["w_embed"] = tok.reshape(-1, TOKEN_DIM).T @ de.reshape(-1, self.hidden)
        grads["b_embed"] = de.sum(axis=(0, 1))

        accuracy = correct / (b * len(logits))
        return loss, grads, accuracy

    def predict(self, tokens: np.ndarray):
        """(B, k, TOKEN_DIM) -> (codes (B, S), actions (B, 7))."""
        logits, offset, _ = self._forward(tokens)
        codes = np.stack([lg.argmax(axis=1) for lg in logits], axis=1).astype(np.int32)
        return codes, self.codec.decode(codes) + offset

    # -- serialization -------------------------------------------------------
    def to_json(self) -> str:
        def f(a):
            return [float(f"{v:.17g}") for v in np.asarray(a).ravel()]

        payload = {
            "token_dim": TOKEN_DIM,
            "context": self.context,
            "hidden": self.hidden,
            "rgb_only": self.rgb_only,
            "offset_weight": self.offset_weight,
            "codebook_hash": self.codebook_hash,
            "codec": json.loads(self.codec.to_json()),
            "input_mean": f(self.input_mean),
            "input_proj": f(self.input_proj),
            "params": {
                k: {"shape": list(v.shape), "values": f(v)}
                for k, v in sorted(self.params.items())
            },
        }
        return json.dumps(payload)

    @staticmethod
    def from_json(text: str) -> "PolicyModel":
        payload = json.loads(text)
        codec = ActionCodec.from_json(json.dumps(payload["codec"]))
        cfg = PolicyConfig(
            hidden=payload["hidden"],
            context=payload["context"],
            rgb_only=payload["rgb_only"],
            offset_weight=payload.get("offset_weight", 1.0),
        )
        model = PolicyModel(codec, cfg)
        if payload["codebook_hash"] != model.codebook_hash:
            raise ValueError("codebook hash mismatch")
        model.input_mean = np.array(payload["input_mean"], dtype=float)
        model.input_proj = np.array(payload["input_proj"], dtype=float).reshape(
            TOKEN_DIM, TOKEN_DIM
        )
        for k, spec in payload["params"].items():
            model.params[k] = np.array(spec["values"], dtype=float).reshape(spec["shape"])
        return model

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "PolicyModel":
        with open(path) as fh:
            return PolicyModel.from_json(fh.read())


# ---------------------------------------------------------------------------
# dataset / training
# ---------------------------------------------------------------------------

def _context_window(feats: list, t: int, k: int) -> np.ndarray:
    """Tokens for steps t-k+1 .. t, repeating the first frame before t=0."""
    return np.stack([feats[max(0, i)] for i in range(t - k + 1, t + 1)])


def build_dataset(episodes, *, rgb_only: bool = False, context: int = CONTEXT):
    """Labeled episodes -> (tokens (N, k, D), actions (N, 7)).

    Accepts any iterable; each episode's pixels are featurized and
    released before the next one is touched, so a generator keeps peak
    memory at one episode.
    """
    token_chunks = []
    action_chunks = []
    for ep in episodes:
        feats = []
        for frame in ep.frames:
            if frame.anchor is None:
                raise NoAnchor(f"episode {ep.id} frame {frame.index} lacks an anchor label")
            if frame.rgb is None:
                raise EmptyDataset(f"episode {ep.id} carries no pixel data")
            feats.append(featurize(frame.rgb, frame.anchor, rgb_only=rgb_only).s_t)
        acts = episode_actions(ep)
        token_chunks.append(
            np.stack([_context_window(feats, t, context) for t in range(len(acts))])
        )
        action_chunks.append(acts)
    if not token_chunks:
        raise EmptyDataset("no episodes")
    return np.concatenate(token_chunks), np.concatenate(action_chunks)


def gradient_check(model: PolicyModel, tokens, codes, offsets, *,
                   n_coords: int = 100, step: float = 1e-5, tol: float = 1e-4,
                   seed: int = 0) -> float:
    """Compare analytic gradients with central differences on randomly
    chosen parameter coordinates; returns the worst relative error."""
    _, grads, _ = model.loss_and_grads(tokens, codes, offsets)
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        arr = model.params[name]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        up = model.loss(tokens, codes, offsets)
        arr[idx] = orig - step
        down = model.loss(tokens, codes, offsets)
        arr[idx] = orig
        fd = (up - down) / (2 * step)
        g = grads[name][idx]
        rel = abs(g - fd) / max(1e-8, abs(g) + abs(fd))
        worst = max(worst, rel)
    if worst > tol:
        raise GradientCheckFailed(f"max relative error {worst:.3e} > {tol}")
    return worst


def train(episodes, codec: ActionCodec, cfg: PolicyConfig | None = None,
          eval_hook=None) -> tuple[PolicyModel, TrainReport]:
    """Behavior-clone the demonstrated actions.

    Targets are the codec's codes for each action plus the continuous
    remainder; the loss is summed cross-entropy over stages plus a
    weighted L1 on the offset. Analytic gradients are checked against
    finite differences before the first step. ``eval_hook(model, step)``
    runs every ``cfg.eval_every`` steps; its failures are logged and
    skipped, never fatal.
    """
    cfg = cfg or PolicyConfig()
    tokens, actions = build_dataset(episodes, rgb_only=cfg.rgb_only, context=cfg.context)
    if len(tokens) == 0:
        raise EmptyDataset("zero training samples")
    codes = codec.encode(actions)
    offsets = actions - codec.decode(codes)

    model = PolicyModel(codec, cfg)
    model.set_input_whitening(tokens)
    rng = np.random.default_rng([17, cfg.seed])

    probe = slice(0, min(16, len(tokens)))
    worst = gradient_check(
        model, tokens[probe], codes[probe], offsets[probe],
        n_coords=cfg.grad_check_coords, step=cfg.grad_check_step,
        tol=cfg.grad_check_tol, seed=cfg.seed,
    )
    report = TrainReport(param_count=model.param_count, grad_check_max_rel_err=worst)

    n = len(tokens)
    batch = min(cfg.batch_size, n)
    lr = cfg.learning_rate
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    for step in range(cfg.steps):
        pick = rng.choice(n, size=batch, replace=False)
        loss, grads, _ = model.loss_and_grads(tokens[pick], codes[pick], offsets[pick])
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] - lr * g
            model.params[k] += velocity[k]
        if step >= cfg.decay_start:
            lr *= cfg.lr_decay
        report.losses.append(loss)
        if eval_hook is not None and cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            try:
                result = eval_hook(model, step + 1)
                report.hook_records.append({"step": step + 1, "loss": loss, "result": result})
            except Exception as exc:  # noqa: BLE001 - the hook is advisory
                warnings.warn(f"eval hook failed at step {step + 1}: {exc}", stacklevel=2)

    _, _, accuracy = model.loss_and_grads(tokens, codes, offsets)
    report.final_token_accuracy = accuracy
    for p in model.params.values():
        p.setflags(write=False)
    model.input_mean.setflags(write=False)
    model.input_proj.setflags(write=False)
    return model, report


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class PolicyRunner:
    """Steps a trained model through an episode, tracking the anchor.

    The anchor starts as the prompt (camera frame at the first
    observation), is re-expressed each step through the gripper's exact
    pose, and is frozen verbatim once the measured aperture has closed
    by ``min_close`` and stalled within ``stall_eps``.
    """

    wants_env = False

    def __init__(self, model: PolicyModel, anchor: ContactAnchor | None, *,
                 min_close: float = 0.2, stall_eps: float = 0.01):
        if anchor is not None and anchor.frame is not AnchorFrame.CAMERA:
            raise WrongFrame("prompt anchor must be in the camera frame")
        self.model = model
        self._prompt = anchor
        self._min_close = min_close
        self._stall_eps = stall_eps
        self._ref_pose: RigidTransform | None = None
        self._start_meas: float | None = None
        self._prev_meas: float | None = None
        self._frozen_point: np.ndarray | None = None
        self._history: list[np.ndarray] = []

    @property
    def frozen(self) -> bool:
        return self._frozen_point is not None

    def current_anchor(self, obs: Observation) -> ContactAnchor:
        """Anchor in the observation's camera frame, honoring the freeze."""
        if self._prompt is None:
            raise NoAnchor("no contact prompt was given")
        if self._frozen_point is not None:
            return ContactAnchor(self._frozen_point, AnchorFrame.CAMERA, frozen=True)
        if self._ref_pose is None:
            return ContactAnchor(self._prompt.point, AnchorFrame.CAMERA)
        return propagate_anchor(obs.camera_pose, self._ref_pose, self._prompt)

    def act(self, obs: Observation) -> Action:
        anchor = self.current_anchor(obs)
        if self._ref_pose is None:
            self._ref_pose = obs.camera_pose
            self._start_meas = obs.aperture_meas
        if (
            self._frozen_point is None
            and self._prev_meas is not None
            and self._start_meas - obs.aperture_meas >= self._min_close
            and abs(obs.aperture_meas - self._prev_meas) < self._stall_eps
        ):
            self._frozen_point = np.asarray(anchor.point, dtype=float).copy()
            anchor = ContactAnchor(self._frozen_point, AnchorFrame.CAMERA, frozen=True)
        self._prev_meas = obs.aperture_meas

        token = featurize(obs.rgb, anchor, rgb_only=self.model.rgb_only).s_t
        self._history.append(token)
        if len(self._history) > self.model.context:
            self._history.pop(0)
        window = [self._history[0]] * (self.model.context - len(self._history))
        window.extend(self._history)
        _, actions = self.model.predict(np.stack(window)[None])
        v = actions[0]
        return Action(v[:3], v[3:6], float(min(1.0, max(0.0, v[6]))))
