"""Batch evaluation: seeded sweeps, intervals, and failure histograms.

Episodes are independent and individually seeded, so reports are exact
functions of the config. The success rate carries a Wilson 95% interval
(well-behaved at extreme rates and small n, which is where means plus
or minus normal errors fall apart). Episodes that crash the harness are
counted in their own category rather than dropped; a prompt that fails
is an outcome of the system under test, not of the harness, and the
episode is classified from wherever the gripper was left standing.

Report JSON is canonical: keys sorted, timing fields excluded, schema
versioned. Two runs with the same config produce byte-identical text.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .control import (
    AttemptRecord,
    ClickPrompt,
    GroundTruthVerifier,
    MockPointing,
    NoisyVerifier,
    OraclePrompt,
    PointingModelClient,
    PromptError,
    PromptFollower,
    RemoteVerifier,
    make_prompt,
)
from .episodes import Task
from .geometry import GeometryError
from .policy import PolicyModel, PolicyRunner
from .sim import EgoGymEnv
from .sim.failure import (
    EpisodeTrace,
    FailureMode,
    FailureThresholds,
    classify_failure,
)

__all__ = [
    "REPORT_VERSION",
    "BadEvalConfig",
    "ModelLoadFailure",
    "EvalConfig",
    "EpisodeResult",
    "CountStats",
    "EvalReport",
    "SweepCurve",
    "SweepReport",
    "wilson_interval",
    "spearman_rho",
    "bootstrap_monotone",
    "run_eval",
    "distractor_sweep",
    "make_training_hook",
    "hook_records_csv",
]

REPORT_VERSION = 1

_TASKS = {"pick": Task.PICK, "open": Task.OPEN, "close": Task.CLOSE}

# histogram keys are fixed per task so report schemas are stable
_PICK_KEYS = tuple(m.value for m in FailureMode) + ("HarnessError",)
_STAGE_KEYS = ("Success", "DidNotSucceed", "HarnessError")


class BadEvalConfig(ValueError):
    """The evaluation request is malformed."""


class ModelLoadFailure(RuntimeError):
    """The configured policy model could not be loaded."""


# ---------------------------------------------------------------------------
# statistics


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054
                    ) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion (95% by default)."""
    if n < 1:
        raise ValueError("need at least one trial")
    if not 0 <= successes <= n:
        raise ValueError("successes must be within [0, n]")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    lo = max(0.0, center - half)
    hi = min(1.0, center + half)
    # at certainty the exact bound is the endpoint; don't let rounding
    # report an interval that excludes the observed rate
    if successes == 0:
        lo = 0.0
    if successes == n:
        hi = 1.0
    return (lo, hi)


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks, ties shared."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Rank correlation; 0.0 when either side is constant."""
    rx, ry = _ranks(np.asarray(x, dtype=float)), _ranks(np.asarray(y, dtype=float))
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def bootstrap_monotone(counts, outcomes, *, n_boot: int = 1000,
                       seed: int = 0) -> tuple[float, float]:
    """Is success non-increasing in distractor count?

    ``outcomes`` is the (episodes, counts) success matrix with one row
    per episode seed; the sweep runs the same seeds at every count, so
    rows are matched and the bootstrap resamples whole rows. Returns
    (observed Spearman rho, 95th percentile of the bootstrap rho
    distribution); an upper percentile <= 0 means the curve is monotone
    non-increasing with 95% confidence. Rank correlation is scale-free,
    so raw rates and normalized curves test identically. The pairing
    matters: it keeps a flat tail tied instead of letting independent
    noise shuffle its ranks.
    """
    counts = np.asarray(counts, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    if outcomes.ndim != 2 or outcomes.shape[1] != len(counts):
        raise ValueError("outcomes must be (episodes, len(counts))")
    rho = spearman_rho(counts, outcomes.mean(axis=0))
    rng = np.random.default_rng([101, seed])
    n = len(outcomes)
    rhos = np.empty(n_boot)
    for b in range(n_boot):
        rows = rng.integers(n, size=n)
        rhos[b] = spearman_rho(counts, outcomes[rows].mean(axis=0))
    return rho, float(np.quantile(rhos, 0.95))


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class EvalConfig:
    """What to evaluate and under which protocol.

    ``policy`` and ``prompt``/``verifier`` are plain-data specs so the
    whole config round-trips through JSON; live objects can instead be
    passed directly to ``run_eval``.
    """

    task: str = "pick"
    episodes: int = 100
    seeds: tuple[int, ...] | None = None  # defaults to range(episodes)
    distractor_counts: tuple[int, ...] = (0,)
    horizon: int = 80
    success_threshold: float = 0.03
    policy: str = "follower"  # "follower" | "oracle" | path to model JSON
    prompt: Mapping = field(default_factory=lambda: {"kind": "oracle"})
    verifier: Mapping = field(default_factory=lambda: {"kind": "ground_truth"})
    workers: int = 1
    images: bool | None = None  # None: render only when something needs pixels

    def __post_init__(self):
        if self.task not in _TASKS:
            raise BadEvalConfig(f"unknown task {self.task!r}")
        if self.episodes < 1:
            raise BadEvalConfig("episodes must be at least 1")
        if self.horizon <= 0:
            raise BadEvalConfig("horizon must be positive")
        if self.workers < 1:
            raise BadEvalConfig("workers must be at least 1")
        if not self.distractor_counts:
            raise BadEvalConfig("need at least one distractor count")
        object.__setattr__(self, "distractor_counts",
                           tuple(int(c) for c in self.distractor_counts))
        if any(c < 0 for c in self.distractor_counts):
            raise BadEvalConfig("distractor counts must be non-negative")
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
            if len(self.seeds) != self.episodes:
                raise BadEvalConfig("seeds must match the episode count")
        object.__setattr__(self, "prompt", dict(self.prompt))
        object.__setattr__(self, "verifier", dict(self.verifier))

    @property
    def episode_seeds(self) -> tuple[int, ...]:
        return self.seeds if self.seeds is not None else tuple(range(self.episodes))

    @staticmethod
    def from_json(text: str) -> "EvalConfig":
        doc = json.loads(text)
        if "seeds" in doc and doc["seeds"] is not None:
            doc["seeds"] = tuple(doc["seeds"])
        if "distractor_counts" in doc:
            doc["distractor_counts"] = tuple(doc["distractor_counts"])
        try:
            return EvalConfig(**doc)
        except TypeError as e:
            raise BadEvalConfig(str(e)) from e

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "episodes": self.episodes,
            "seeds": list(self.seeds) if self.seeds is not None else None,
            "distractor_counts": list(self.distractor_counts),
            "horizon": self.horizon,
            "success_threshold": self.success_threshold,
            "policy": self.policy,
            "prompt": self.prompt,
            "verifier": self.verifier,
            "workers": self.workers,
            "images": self.images,
        }
        return json.dumps(payload, sort_keys=True)


def build_prompt_source(spec: Mapping, episode_seed: int = 0):
    """Instantiate a prompt source from its spec.

    Stateful mocks are seeded by (spec seed, episode seed) so every
    episode draws its own stream and worker scheduling cannot reorder
    anything.
    """
    kind = spec.get("kind", "oracle")
    if kind == "oracle":
        return OraclePrompt()
    if kind == "mock":
        base = int(spec.get("seed", 0))
        return MockPointing(sigma=float(spec.get("sigma", 0.0)),
                            alpha=float(spec.get("alpha", 0.0)),
                            seed=(base, episode_seed))
    if kind == "click":
        return ClickPrompt(float(spec["u"]), float(spec["v"]))
    if kind == "remote":
        return PointingModelClient(spec["endpoint"],
                                   timeout=float(spec.get("timeout", 5.0)))
    raise BadEvalConfig(f"unknown prompt source {kind!r}")


def build_verifier(spec: Mapping):
    kind = spec.get("kind", "ground_truth")
    if kind == "ground_truth":
        return GroundTruthVerifier()
    if kind == "noisy":
        return NoisyVerifier(false_positive=float(spec.get("false_positive", 0.0)),
                             false_negative=float(spec.get("false_negative", 0.0)),
                             seed=int(spec.get("seed", 0)))
    if kind == "remote":
        return RemoteVerifier(spec["endpoint"], task=spec.get("task", "pick"),
                              timeout=float(spec.get("timeout", 5.0)))
    raise BadEvalConfig(f"unknown verifier {kind!r}")


def load_policy(spec: str):
    """Resolve a policy spec into an agent or an anchor -> agent factory."""
    if spec == "oracle":
        from .sim.oracle import OraclePolicy

        return OraclePolicy()
    if spec == "follower":
        return lambda anchor: PromptFollower(anchor)
    try:
        model = PolicyModel.from_json(Path(spec).read_text())
    except (OSError, ValueError, KeyError) as e:
        raise ModelLoadFailure(f"cannot load policy model from {spec!r}: {e}") from e
    return lambda anchor: PolicyRunner(model, anchor)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EpisodeResult:
    seed: int
    distractor_count: int
    success: bool
    verified: bool
    mode: str
    steps: int
    peak_reward: float
    error: str | None = None


@dataclass(frozen=True)
class CountStats:
    distractor_count: int
    episodes: int
    successes: int
    rate: float
    interval: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "distractor_count": self.distractor_count,
            "episodes": self.episodes,
            "successes": self.successes,
            "rate": self.rate,
            "interval": list(self.interval),
        }


@dataclass(frozen=True)
class EvalReport:
    task: str
    episodes: int
    successes: int
    success_rate: float
    interval: tuple[float, float]
    verified_successes: int
    histogram: Mapping[str, int]
    by_count: tuple[CountStats, ...]
    harness_errors: int
    results: tuple[EpisodeResult, ...]
    wall_clock: float
    fps: float

    def to_json(self) -> str:
        """Canonical report text: sorted keys, no timing, versioned."""
        payload = {
            "version": REPORT_VERSION,
            "task": self.task,
            "episodes": self.episodes,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "interval": list(self.interval),
            "verified_successes": self.verified_successes,
            "histogram": dict(self.histogram),
            "by_count": [c.to_dict() for c in self.by_count],
            "harness_errors": self.harness_errors,
        }
        return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# the harness


def _run_one(task: Task, seed: int, count: int, cfg: EvalConfig,
             policy, source, verifier) -> EpisodeResult:
    agent = None
    try:
        prompt_needs_pixels = not isinstance(source, OraclePrompt)
        render = cfg.images if cfg.images is not None else prompt_needs_pixels
        env = EgoGymEnv(task, seed=seed, distractor_count=count,
                        horizon=cfg.horizon, images=render)
        obs = env.observe()
    except Exception as e:  # noqa: BLE001 - harness fault, never dropped
        return EpisodeResult(seed, count, False, False, "HarnessError", 0, 0.0,
                             error=f"{type(e).__name__}: {e}")
    steps = 0
    peak = 0.0
    try:
        anchor = make_prompt(source, obs)
        agent = policy if hasattr(policy, "act") else policy(anchor)
        wants_env = bool(getattr(agent, "wants_env", False))
        if cfg.images is None:
            env.images = bool(getattr(agent, "wants_pixels", True)) and not wants_env
            if env.images != render:
                obs = env.observe()
        done = env.state.done
        while not done:
            action = agent.act(env) if wants_env else agent.act(obs)
            obs, reward, done, info = env.step(action)
            peak = max(peak, float(reward))
            steps += 1
        prompt_error = None
    except (PromptError, GeometryError) as e:
        # a bad prompt is the system failing, not the harness; score the
        # episode from wherever it stopped
        prompt_error = f"{type(e).__name__}: {e}"
    except Exception as e:  # noqa: BLE001
        return EpisodeResult(seed, count, False, False, "HarnessError", steps,
                             peak, error=f"{type(e).__name__}: {e}")
    if task is Task.PICK:
        trace = EpisodeTrace.from_state(env.scene, env.state)
        thresholds = FailureThresholds(lift_success=cfg.success_threshold)
        success = trace.max_lift > cfg.success_threshold
        mode = classify_failure(trace, thresholds).value
    else:
        success = bool(env.state.success)
        mode = "Success" if success else "DidNotSucceed"
    record = AttemptRecord(attempt=0, seed=seed, success=success, verified=False,
                           max_lift=float(env.state.max_lift), steps=steps,
                           failure=None if success else mode)
    verified = bool(verifier.verify(record))
    return EpisodeResult(seed, count, success, verified, mode, steps, peak,
                         error=prompt_error)


def run_eval(cfg: EvalConfig, *, policy=None, source=None, verifier=None
             ) -> EvalReport:
    """Run the configured evaluation and reduce it to one report.

    ``policy``, ``source``, and ``verifier`` default to what the config
    specifies; passing live objects overrides them (sharing one stateful
    source across workers is then the caller's business). Episodes fan
    out over a thread pool and are reduced in (count, seed) order, so
    the report does not depend on scheduling.
    """
    task = _TASKS[cfg.task]
    the_policy = policy if policy is not None else load_policy(cfg.policy)
    the_verifier = verifier if verifier is not None else build_verifier(cfg.verifier)

    jobs = [(count, seed) for count in cfg.distractor_counts
            for seed in cfg.episode_seeds]

    def one(job):
        count, seed = job
        src = source if source is not None else build_prompt_source(cfg.prompt, seed)
        return _run_one(task, seed, count, cfg, the_policy, src, the_verifier)

    start = time.perf_counter()
    if cfg.workers == 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, jobs))
    wall = time.perf_counter() - start

    results.sort(key=lambda r: (r.distractor_count, r.seed))
    keys = _PICK_KEYS if task is Task.PICK else _STAGE_KEYS
    histogram = {k: 0 for k in keys}
    for r in results:
        histogram[r.mode] += 1
    successes = sum(r.success for r in results)
    harness = histogram["HarnessError"]
    by_count = []
    for count in sorted(set(cfg.distractor_counts)):
        sub = [r for r in results if r.distractor_count == count]
        wins = sum(r.success for r in sub)
        by_count.append(CountStats(count, len(sub), wins, wins / len(sub),
                                   wilson_interval(wins, len(sub))))
    total = len(results)
    total_steps = sum(r.steps for r in results)
    return EvalReport(
        task=cfg.task,
        episodes=total,
        successes=successes,
        success_rate=successes / total,
        interval=wilson_interval(successes, total),
        verified_successes=sum(r.verified for r in results),
        histogram=histogram,
        by_count=tuple(by_count),
        harness_errors=harness,
        results=tuple(results),
        wall_clock=wall,
        fps=total_steps / wall if wall > 0 else 0.0,
    )


# ---------------------------------------------------------------------------
# distractor sweep


@dataclass(frozen=True)
class SweepCurve:
    source: str
    counts: tuple[int, ...]
    rates: tuple[float, ...]
    normalized: tuple[float | None, ...]
    reports: tuple[EvalReport, ...]

    def outcomes(self) -> np.ndarray:
        """(episodes, counts) success matrix, rows aligned by seed."""
        cols = []
        for rep in self.reports:
            by_seed = sorted(rep.results, key=lambda r: r.seed)
            cols.append([r.success for r in by_seed])
        return np.asarray(cols, dtype=bool).T

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "counts": list(self.counts),
            "rates": list(self.rates),
            "normalized": list(self.normalized),
            "reports": [json.loads(r.to_json()) for r in self.reports],
        }


@dataclass(frozen=True)
class SweepReport:
    curves: tuple[SweepCurve, ...]

    def curve(self, source: str) -> SweepCurve:
        for c in self.curves:
            if c.source == source:
                return c
        raise KeyError(source)

    def to_json(self) -> str:
        return json.dumps({"version": REPORT_VERSION,
                           "curves": [c.to_dict() for c in self.curves]},
                          sort_keys=True)


def distractor_sweep(cfg: EvalConfig,
                     sources: Mapping[str, Mapping] | None = None) -> SweepReport:
    """Success vs. distractor count, one curve per prompt source.

    Each curve is normalized to its own zero-distractor rate (zero by
    convention stays ``None`` if that baseline is itself zero). The same
    episode seeds are reused at every count, so curve differences are
    prompt effects, not draw effects.
    """
    if cfg.task != "pick":
        raise BadEvalConfig("the distractor sweep is defined for the pick task")
    if sources is None:
        sources = {"oracle": {"kind": "oracle"}}
    if 0 not in cfg.distractor_counts:
        raise BadEvalConfig("the sweep needs the zero-distractor baseline")
    counts = tuple(sorted(set(cfg.distractor_counts)))
    curves = []
    for name, spec in sources.items():
        reports = []
        for count in counts:
            sub = replace(cfg, distractor_counts=(count,), prompt=dict(spec))
            reports.append(run_eval(sub))
        rates = tuple(r.success_rate for r in reports)
        base = rates[counts.index(0)]
        normalized = tuple((r / base) if base > 0 else None for r in rates)
        curves.append(SweepCurve(name, counts, rates, normalized, tuple(reports)))
    return SweepReport(tuple(curves))


# ---------------------------------------------------------------------------
# training-time evaluation


def make_training_hook(eval_cfg: EvalConfig | None = None,
                       *, episodes: int = 50) -> Callable:
    """Build an ``eval_hook(model, step)`` for the training loop.

    Runs a small fixed-seed evaluation of the in-progress model and
    returns its summary; the training loop appends these to the report.
    Loss alone does not say whether the policy moves the right way, so
    this is the signal worth plotting next to it.
    """
    cfg = eval_cfg or EvalConfig(task="pick", episodes=episodes,
                                 prompt={"kind": "oracle"})

    def hook(model: PolicyModel, step: int) -> dict:
        report = run_eval(cfg, policy=lambda anchor: PolicyRunner(model, anchor))
        return {"success_rate": report.success_rate,
                "episodes": report.episodes,
                "interval": list(report.interval)}

    return hook


def hook_records_csv(hook_records) -> str:
    """Render training hook records as step,loss,success_rate CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss", "success_rate"])
    for rec in hook_records:
        writer.writerow([rec["step"], f"{rec['loss']:.6f}",
                         f"{rec['result']['success_rate']:.4f}"])
    return buf.getvalue()
