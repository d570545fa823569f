"""CLI: the pipeline stages chained through their command-line surface."""

import json
import socket
import subprocess
import sys
import time

import pytest
from click.testing import CliRunner

from cap.cli import main
from cap.codec import ActionCodec
from cap.episodes import read_episode


@pytest.fixture(scope="module")
def demo_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    result = runner.invoke(main, ["collect", "--task", "pick", "--episodes", "2",
                                  "--seed", "0", "--out", str(root / "demos")])
    assert result.exit_code == 0, result.output
    return runner, root


def test_pipeline_runs_end_to_end(demo_store):
    runner, root = demo_store
    demos = root / "demos"
    stores = sorted(p for p in demos.iterdir() if p.is_dir())
    assert len(stores) == 2
    assert (stores[0] / "manifest.json").exists()
    assert list((stores[0] / "rgb").glob("*.png"))

    result = runner.invoke(main, ["label", str(demos)])
    assert result.exit_code == 0, result.output
    labeled = read_episode(stores[0])
    assert labeled.contact_frame is not None
    assert labeled.frames[0].anchor is not None
    assert labeled.metadata["label_min_close"] == "0.2"

    result = runner.invoke(main, ["filter", str(demos)])
    assert result.exit_code == 0, result.output
    filtered = read_episode(stores[0])
    assert len(filtered) <= len(labeled)
    again = runner.invoke(main, ["filter", str(demos)])
    assert again.exit_code == 0
    for line in again.output.strip().splitlines():
        before, _, after = line.split(":")[1].partition("->")
        assert int(before.split()[0]) == int(after.split()[0])  # idempotent

    result = runner.invoke(main, ["mirror", str(demos),
                                  "--out", str(root / "mirrored")])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in (root / "mirrored").iterdir()) \
        == [s.name for s in stores]

    result = runner.invoke(main, ["train-tokenizer", "--data", str(demos),
                                  "--out", str(root / "codec.json"),
                                  "--stages", "8,8"])
    assert result.exit_code == 0, result.output
    codec = ActionCodec.from_json((root / "codec.json").read_text())
    assert [stage.shape[0] for stage in codec.stages] == [8, 8]

    result = runner.invoke(main, ["train-policy", "--data", str(demos),
                                  "--codec", str(root / "codec.json"),
                                  "--out", str(root / "model.json"),
                                  "--steps", "60", "--batch-size", "8"])
    assert result.exit_code == 0, result.output
    assert "parameters" in result.output

    config = root / "eval.json"
    config.write_text(json.dumps({"task": "pick", "episodes": 4,
                                  "policy": str(root / "model.json")}))
    result = runner.invoke(main, ["eval", "--config", str(config),
                                  "--out", str(root / "report.json")])
    assert result.exit_code == 0, result.output
    report = json.loads((root / "report.json").read_text())
    assert report["version"] == 1
    assert sum(report["histogram"].values()) == 4

    result = runner.invoke(main, ["report", str(root / "report.json"),
                                  "--plot", str(root / "report.svg")])
    assert result.exit_code == 0, result.output
    assert (root / "report.svg").read_bytes().startswith(b"<?xml")


def test_retry_command_reports_rates():
    runner = CliRunner()
    result = runner.invoke(main, ["retry", "--task", "pick", "--prompt", "oracle",
                                  "--trials", "3", "--retries", "2",
                                  "--distractors", "0"])
    assert result.exit_code == 0, result.output
    assert "verified 1.000" in result.output
    assert "mean attempts 1.00" in result.output


def test_compose_command_runs_a_plan(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"stages": [{"tool": "open"}, {"tool": "pick"},
                                           {"tool": "close"}]}))
    runner = CliRunner()
    result = runner.invoke(main, ["compose", str(plan), "--seed", "2"])
    assert result.exit_code == 0, result.output
    assert "plan completed" in result.output
    assert result.output.count("completed") == 4  # three stages plus the banner


def test_compose_rejects_unknown_tools(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"stages": [{"tool": "teleport"}]}))
    result = CliRunner().invoke(main, ["compose", str(plan)])
    assert result.exit_code != 0


def test_sweep_command_writes_versioned_curves(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"task": "pick", "episodes": 4,
                                  "policy": "follower",
                                  "distractor_counts": [0, 1], "workers": 2}))
    runner = CliRunner()
    result = runner.invoke(main, ["sweep-distractors", "--config", str(config),
                                  "--out", str(tmp_path / "sweep.json"),
                                  "--source", 'oracle={"kind":"oracle"}'])
    assert result.exit_code == 0, result.output
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert doc["version"] == 1
    assert doc["curves"][0]["counts"] == [0, 1]


def test_serve_boots_and_answers(tmp_path):
    import requests

    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    proc = subprocess.Popen(
        [sys.executable, "-m", "cap.cli", "serve", "--port", str(port)],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        deadline = time.monotonic() + 30.0
        reply = None
        while time.monotonic() < deadline:
            try:
                reply = requests.post(f"http://127.0.0.1:{port}/sessions",
                                      json={"task": "pick", "seed": 1},
                                      timeout=2.0)
                break
            except requests.ConnectionError:
                time.sleep(0.1)
        assert reply is not None and reply.status_code == 201
        assert reply.json()["state"] == "AwaitingPrompt"
    finally:
        proc.terminate()
        proc.wait(timeout=10)
