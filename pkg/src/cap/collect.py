"""Rollout recording: drive a policy in the simulator and save episodes.

A recorded episode holds one frame per simulator state, including the
terminal one. Frame t carries the gripper command issued at step t (the
final frame repeats the last command), so consecutive poses plus the
stored command reconstruct the executed action. The step at which the
gripper first stalled onto a body is recorded; its following frame is
the episode's contact frame.
"""

from __future__ import annotations

import numpy as np

from .episodes import Episode, Frame, Task, depth_ref_for, rgb_ref_for
from .sim.core import EgoGymEnv, SIM_INTRINSICS
from .sim.failure import EpisodeTrace, FailureMode, classify_failure

__all__ = ["record_rollout", "collect_demos"]


def _depth_to_mm(depth_m: np.ndarray) -> np.ndarray:
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535)
    return mm.astype(np.uint16)


def record_rollout(
    env: EgoGymEnv,
    policy,
    *,
    episode_id: str,
    max_steps: int | None = None,
    extra_metadata: dict | None = None,
) -> tuple[Episode, dict]:
    """Run the policy until done and return the recorded episode plus a
    summary. Frames hold in-memory images when the environment renders."""
    wants_env = getattr(policy, "wants_env", False)
    limit = max_steps if max_steps is not None else env.config.horizon

    frames = []
    cmds = []

    def snap(index: int, cmd: float | None):
        state = env.state
        rgb = depth = None
        if env.images:
            obs = env.observe()
            rgb = obs.rgb
            depth = _depth_to_mm(obs.depth)
        frames.append(
            dict(
                index=index,
                pose=state.ee_pose,
                aperture_meas=state.aperture_meas,
                rgb=rgb,
                depth=depth,
            )
        )
        cmds.append(cmd)

    total_reward = 0.0
    done = env.state.done
    t = 0
    while not done and t < limit:
        obs_or_env = env if wants_env else env.observe()
        action = policy.act(obs_or_env)
        snap(t, float(action.aperture_cmd))
        _, reward, done, _ = env.step(action)
        total_reward += reward
        t += 1
    snap(t, cmds[-1] if cmds else 1.0)

    attach = env.state.attach_step
    contact_frame = attach + 1 if 0 <= attach < len(frames) - 1 else None

    metadata = {
        "task": env.stage_task.value,
        "seed": str(env.seed),
        "success": "true" if env.state.success else "false",
        "mirrored": "false",
    }
    if extra_metadata:
        metadata.update({str(k): str(v) for k, v in extra_metadata.items()})

    built = tuple(
        Frame(
            index=f["index"],
            pose=f["pose"],
            aperture_cmd=cmds[i],
            aperture_meas=f["aperture_meas"],
            rgb_ref=rgb_ref_for(f["index"]),
            depth_ref=depth_ref_for(f["index"]),
            anchor=None,
            rgb=f["rgb"],
            depth=f["depth"],
        )
        for i, f in enumerate(frames)
    )
    episode = Episode(
        id=episode_id,
        task=env.stage_task,
        seed=env.seed,
        frames=built,
        intrinsics=SIM_INTRINSICS,
        contact_frame=contact_frame,
        metadata=metadata,
    )
    info = {
        "success": env.state.success,
        "steps": t,
        "total_reward": total_reward,
        "attach_step": attach,
    }
    if env.stage_task is Task.PICK:
        info["failure"] = classify_failure(EpisodeTrace.from_state(env.scene, env.state))
    return episode, info


def collect_demos(
    task: Task,
    seeds,
    policy,
    *,
    images: bool = True,
    distractor_count: int = 0,
    twin: bool = False,
    keep_failures: bool = False,
) -> tuple[list[Episode], dict]:
    """Scripted-expert sweep over seeds; failed rollouts are dropped
    unless asked for. Returns (episodes, counts)."""
    episodes = []
    counts = {"attempted": 0, "kept": 0, "failed": 0}
    for seed in seeds:
        counts["attempted"] += 1
        env = EgoGymEnv(
            task,
            seed=int(seed),
            distractor_count=distractor_count,
            twin=twin,
            images=images,
        )
        episode, info = record_rollout(
            env, policy, episode_id=f"{task.value.lower()}-{int(seed):06d}"
        )
        if info["success"] or keep_failures:
            episodes.append(episode)
            counts["kept"] += 1
        if not info["success"]:
            counts["failed"] += 1
    return episodes, counts
