"""Command-line surface: collect -> filter -> label -> train -> eval -> serve.

Each subcommand is a thin shell over one library entry point; all real
behavior (and all the testing) lives in the modules. Episode stores are
plain directories of `manifest.json` + PNGs, so every stage can be run,
inspected, and re-run independently.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from .codec import ActionCodec, episode_actions, fit_codec
from .collect import collect_demos
from .control import (
    GroundTruthVerifier,
    MockPointing,
    NoisyVerifier,
    OraclePrompt,
    PromptFollower,
    StageAborted,
    ToolPlan,
    compose_tools,
    oracle_toolkit,
    run_with_retries,
)
from .episodes import Task, read_episode, write_episode, filter_static, mirror_episode
from .evaluation import EvalConfig, distractor_sweep, run_eval
from .labeling import ContactDetectionConfig, GripperGeometry, label_anchors
from .policy import PolicyConfig, PolicyModel, train
from .sim import EgoGymEnv
from .sim.core import TIP_OFFSET
from .sim.oracle import OraclePolicy
from .sim.scene import generate_compose_scene

_TASKS = {"pick": Task.PICK, "open": Task.OPEN, "close": Task.CLOSE}


def _episode_dirs(root: Path) -> list[Path]:
    if (root / "manifest.json").exists():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise click.ClickException(f"no episode stores under {root}")
    return dirs


def _rewrite_in_place(episode, ep_dir: Path) -> None:
    """Persist a transformed episode over its own directory atomically
    enough: write a sibling, then swap."""
    tmp = Path(tempfile.mkdtemp(prefix=ep_dir.name + ".", dir=ep_dir.parent))
    try:
        write_episode(episode, tmp)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    shutil.rmtree(ep_dir)
    tmp.rename(ep_dir)


@click.group()
def main():
    """Contact-anchored manipulation toolkit."""


@main.command()
@click.option("--task", type=click.Choice(sorted(_TASKS)), required=True)
@click.option("--episodes", type=int, required=True, help="Number of seeds to attempt.")
@click.option("--seed", type=int, default=0, show_default=True, help="First seed.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--distractors", type=int, default=0, show_default=True)
@click.option("--keep-failures", is_flag=True, help="Also store failed rollouts.")
def collect(task, episodes, seed, out, distractors, keep_failures):
    """Record scripted-expert demonstrations into episode stores."""
    demos, counts = collect_demos(
        _TASKS[task], range(seed, seed + episodes), OraclePolicy(),
        distractor_count=distractors, keep_failures=keep_failures)
    out.mkdir(parents=True, exist_ok=True)
    for episode in demos:
        write_episode(episode, out / episode.id)
    click.echo(f"attempted {counts['attempted']}, kept {counts['kept']}, "
               f"failed {counts['failed']} -> {out}")


@main.command("filter")
@click.argument("store", type=click.Path(exists=True, path_type=Path))
@click.option("--trans-cm", type=float, default=0.3, show_default=True)
@click.option("--rot-rad", type=float, default=0.1, show_default=True)
@click.option("--aper", type=float, default=0.05, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Write here instead of rewriting in place.")
def filter_cmd(store, trans_cm, rot_rad, aper, out):
    """Drop near-static frames from episode stores."""
    dirs = _episode_dirs(store)
    for ep_dir in dirs:
        episode = read_episode(ep_dir, images=True)
        before = len(episode)
        filtered = filter_static(episode, trans_thresh=trans_cm / 100.0,
                                 rot_thresh=rot_rad, aper_thresh=aper)
        if out is None:
            _rewrite_in_place(filtered, ep_dir)
            dest = ep_dir
        else:
            dest = out if dirs == [store] else out / ep_dir.name
            write_episode(filtered, dest)
        click.echo(f"{ep_dir.name}: {before} -> {len(filtered)} frames ({dest})")


@main.command()
@click.argument("store", type=click.Path(exists=True, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), required=True)
def mirror(store, out):
    """Write horizontally mirrored copies of episode stores."""
    dirs = _episode_dirs(store)
    for ep_dir in dirs:
        episode = read_episode(ep_dir, images=True)
        mirrored = mirror_episode(episode)
        dest = out if dirs == [store] else out / mirrored.id
        write_episode(mirrored, dest)
        click.echo(f"{ep_dir.name} -> {dest}")


@main.command()
@click.argument("store", type=click.Path(exists=True, path_type=Path))
@click.option("--stall-eps", type=float, default=0.01, show_default=True)
@click.option("--stall-window", type=int, default=5, show_default=True)
@click.option("--min-close", type=float, default=0.2, show_default=True)
@click.option("--tip-offset", default=",".join(f"{x:g}" for x in TIP_OFFSET),
              show_default=True, help="Fingertip midpoint in the camera frame, x,y,z.")
def label(store, stall_eps, stall_window, min_close, tip_offset):
    """Attach hindsight contact anchors to every frame, in place."""
    cfg = ContactDetectionConfig(stall_eps=stall_eps, stall_window=stall_window,
                                 min_close=min_close)
    offset = tuple(float(x) for x in tip_offset.split(","))
    if len(offset) != 3:
        raise click.ClickException("--tip-offset needs three comma-separated numbers")
    for ep_dir in _episode_dirs(store):
        episode = read_episode(ep_dir, images=True)
        labeled = label_anchors(episode, cfg, gripper=GripperGeometry(offset))
        labeled = dataclasses.replace(labeled, metadata={
            **labeled.metadata,
            "label_stall_eps": str(stall_eps),
            "label_stall_window": str(stall_window),
            "label_min_close": str(min_close),
            "label_tip_offset": tip_offset,
        })
        _rewrite_in_place(labeled, ep_dir)
        click.echo(f"{ep_dir.name}: contact at frame {labeled.contact_frame}")


def _load_episodes(data: Path, images: bool):
    return [read_episode(d, images=images) for d in _episode_dirs(data)]


@main.command("train-tokenizer")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--stages", default="16,16", show_default=True,
              help="Comma-separated codebook sizes, coarse to fine.")
@click.option("--seed", type=int, default=0, show_default=True)
def train_tokenizer(data, out, stages, seed):
    """Fit the residual action codec on an episode store."""
    episodes = _load_episodes(data, images=False)
    actions = np.concatenate([episode_actions(e) for e in episodes])
    sizes = [int(s) for s in stages.split(",")]
    codec = fit_codec(actions, sizes, seed=seed)
    out.write_text(codec.to_json())
    click.echo(f"fit on {len(actions)} actions from {len(episodes)} episodes -> {out}")


@main.command("train-policy")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True,
              help="Labeled episode store (run `cap label` first).")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--codec", "codec_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Tokenizer JSON; fit ad hoc from --data when omitted.")
@click.option("--rgb-only", is_flag=True, help="Zero the anchor feature (ablation).")
@click.option("--steps", type=int, default=3000, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--learning-rate", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_policy(data, out, codec_path, rgb_only, steps, batch_size,
                 learning_rate, seed):
    """Train the contact-conditioned policy and write its JSON snapshot."""
    episodes = _load_episodes(data, images=True)
    if codec_path is not None:
        codec = ActionCodec.from_json(codec_path.read_text())
    else:
        codec = fit_codec(np.concatenate([episode_actions(e) for e in episodes]),
                          [16, 16], seed=seed)
    cfg = PolicyConfig(steps=steps, batch_size=batch_size,
                       learning_rate=learning_rate, seed=seed, rgb_only=rgb_only)
    model, report = train(episodes, codec, cfg)
    out.write_text(model.to_json())
    click.echo(f"{report.param_count} parameters, grad check "
               f"{report.grad_check_max_rel_err:.2e}, final token accuracy "
               f"{report.final_token_accuracy:.3f} -> {out}")


@main.command("eval")
@click.option("--config", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def eval_cmd(config, out):
    """Run a batch evaluation from a JSON config."""
    cfg = EvalConfig.from_json(Path(config).read_text())
    report = run_eval(cfg)
    out.write_text(report.to_json())
    lo, hi = report.interval
    click.echo(f"{report.task}: {report.successes}/{report.episodes} "
               f"({report.success_rate:.3f}, 95% [{lo:.3f}, {hi:.3f}]), "
               f"{report.fps:.0f} steps/s -> {out}")
    for mode, count in sorted(report.histogram.items()):
        if count:
            click.echo(f"  {mode}: {count}")


@main.command("sweep-distractors")
@click.option("--config", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--source", "sources", multiple=True,
              help="NAME=JSON prompt spec; repeatable. Default: one oracle curve.")
def sweep_distractors(config, out, sources):
    """Success-vs-clutter curves over shared episode seeds."""
    cfg = EvalConfig.from_json(Path(config).read_text())
    specs = None
    if sources:
        specs = {}
        for item in sources:
            name, _, payload = item.partition("=")
            if not payload:
                raise click.ClickException(f"--source needs NAME=JSON, got {item!r}")
            specs[name] = json.loads(payload)
    sweep = distractor_sweep(cfg, sources=specs)
    out.write_text(sweep.to_json())
    for curve in sweep.curves:
        rates = ", ".join(f"{r:.3f}" for r in curve.rates)
        click.echo(f"{curve.source}: [{rates}] over counts {list(curve.counts)}")
    click.echo(f"-> {out}")


@main.command()
@click.argument("report_path", type=click.Path(exists=True, path_type=Path))
@click.option("--plot", type=click.Path(path_type=Path), default=None,
              help="Write a static SVG/PNG chart.")
def report(report_path, plot):
    """Summarize an eval or sweep report; optionally plot it."""
    doc = json.loads(Path(report_path).read_text())
    is_sweep = "curves" in doc
    if is_sweep:
        for curve in doc["curves"]:
            rates = ", ".join(f"{r:.3f}" for r in curve["rates"])
            click.echo(f"{curve['source']}: [{rates}] over counts {curve['counts']}")
    else:
        lo, hi = doc["interval"]
        click.echo(f"{doc['task']}: {doc['successes']}/{doc['episodes']} "
                   f"({doc['success_rate']:.3f}, 95% [{lo:.3f}, {hi:.3f}])")
        for mode, count in sorted(doc["histogram"].items()):
            if count:
                click.echo(f"  {mode}: {count}")
    if plot is None:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if is_sweep:
        for curve in doc["curves"]:
            ax.plot(curve["counts"], curve["rates"], marker="o", label=curve["source"])
        ax.set_xlabel("distractor count")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
    else:
        modes = [m for m, c in sorted(doc["histogram"].items()) if c]
        counts = [doc["histogram"][m] for m in modes]
        ax.bar(range(len(modes)), counts)
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=30, ha="right")
        ax.set_ylabel("episodes")
        ax.set_title(f"{doc['task']}: {doc['success_rate']:.3f} success")
    fig.tight_layout()
    fig.savefig(plot)
    plt.close(fig)
    click.echo(f"plot -> {plot}")


@main.command()
@click.option("--task", type=click.Choice(sorted(_TASKS)), default="pick",
              show_default=True)
@click.option("--prompt", type=click.Choice(["oracle", "mock"]), default="mock",
              show_default=True)
@click.option("--alpha", type=float, default=0.15, show_default=True,
              help="Mock confusion rate.")
@click.option("--sigma", type=float, default=0.0, show_default=True,
              help="Mock pixel noise.")
@click.option("--fp", type=float, default=0.0, show_default=True,
              help="Verifier false-positive rate.")
@click.option("--fn", type=float, default=0.0, show_default=True,
              help="Verifier false-negative rate.")
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--retries", type=int, default=10, show_default=True)
@click.option("--distractors", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def retry(task, prompt, alpha, sigma, fp, fn, trials, retries, distractors, seed):
    """Verify-and-retry loop statistics over fresh-scene trials."""
    verifier = (NoisyVerifier(fp, fn, seed=seed) if fp or fn
                else GroundTruthVerifier())
    verified = true = attempts = 0
    for trial in range(trials):
        trial_seed = seed + trial
        env = EgoGymEnv(_TASKS[task], seed=trial_seed,
                        distractor_count=distractors, images=True)
        source = (OraclePrompt() if prompt == "oracle"
                  else MockPointing(sigma=sigma, alpha=alpha,
                                    seed=(seed, trial_seed)))
        outcome = run_with_retries(env, lambda anchor: PromptFollower(anchor),
                                   source, verifier, max_retries=retries)
        verified += outcome.verified_success
        true += outcome.true_success
        attempts += outcome.attempts_used
    click.echo(f"{trials} trials, up to {retries} retries: "
               f"verified {verified / trials:.3f}, true {true / trials:.3f}, "
               f"mean attempts {attempts / trials:.2f}")


@main.command()
@click.argument("plan_path", type=click.Path(exists=True, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True,
              help="Compose-scene seed (cabinet with a shelved object).")
def compose(plan_path, seed):
    """Run a tool-call plan on one persistent scene."""
    plan = ToolPlan.from_json(Path(plan_path).read_text())
    env = EgoGymEnv(Task.OPEN, scene=generate_compose_scene(seed), images=True)
    try:
        outcome = compose_tools(plan, env, oracle_toolkit())
    except StageAborted as err:
        for stage in err.report.stages:
            click.echo(f"  {stage.index}: {stage.tool} {stage.status} "
                       f"({stage.attempts} attempts)")
        raise click.ClickException(str(err)) from err
    for stage in outcome.stages:
        click.echo(f"  {stage.index}: {stage.tool} {stage.status} "
                   f"({stage.attempts} attempts)")
    click.echo("plan completed" if outcome.success else "plan failed")


@main.command()
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path), default=None,
              help="Trained policy JSON; defaults to the prompt-following baseline.")
@click.option("--policy", type=click.Choice(["follower", "oracle"]),
              default="follower", show_default=True,
              help="Built-in policy when no --model is given.")
def serve(port, host, model_path, policy):
    """Serve interactive sessions over HTTP."""
    import uvicorn

    from .service import create_app

    spec = str(model_path) if model_path is not None else policy
    uvicorn.run(create_app(policy=spec), host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
