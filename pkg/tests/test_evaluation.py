"""Evaluation harness: statistics, reports, sweeps, and the training hook."""

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cap.codec import DegenerateDimension, episode_actions, fit_codec
from cap.collect import record_rollout
from cap.control import PromptError
from cap.evaluation import (
    BadEvalConfig,
    EvalConfig,
    ModelLoadFailure,
    bootstrap_monotone,
    distractor_sweep,
    hook_records_csv,
    make_training_hook,
    run_eval,
    spearman_rho,
    wilson_interval,
)
from cap.geometry import ContactAnchor
from cap.labeling import GripperGeometry, label_anchors
from cap.policy import PolicyConfig, PolicyModel, PolicyRunner, train
from cap.sim import Action, make
from cap.sim.core import TIP_OFFSET
from cap.sim.oracle import OraclePolicy


class IdleAgent:
    wants_env = False
    wants_pixels = False

    def act(self, obs):
        return Action(np.zeros(3), np.zeros(3), 1.0)


# ---------------------------------------------------------------------------
# statistics


def test_wilson_matches_the_reference_implementation():
    from statsmodels.stats.proportion import proportion_confint

    for k, n in [(0, 1), (1, 1), (83, 100), (5, 7), (499, 500), (250, 500)]:
        lo, hi = wilson_interval(k, n)
        ref_lo, ref_hi = proportion_confint(k, n, alpha=0.05, method="wilson")
        assert abs(lo - float(ref_lo)) < 1e-12
        assert abs(hi - float(ref_hi)) < 1e-12
    assert np.allclose(wilson_interval(83, 100),
                       (0.7445199523239887, 0.8910643388594006), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(min_value=1, max_value=2000), frac=st.floats(0, 1))
def test_wilson_interval_stays_inside_the_unit_square(n, frac):
    k = int(round(frac * n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo < hi <= 1.0


def test_wilson_is_nondegenerate_at_certainty():
    for n in (1, 10, 500):
        lo, hi = wilson_interval(0, n)
        assert lo == 0.0 and hi > 0.0
        lo, hi = wilson_interval(n, n)
        assert hi == 1.0 and lo < 1.0


def test_spearman_matches_the_reference_implementation():
    from scipy.stats import spearmanr

    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.integers(0, 5, size=12).astype(float)  # plenty of ties
        y = rng.normal(size=12)
        ours = spearman_rho(x, y)
        ref = spearmanr(x, y).statistic
        assert abs(ours - float(ref)) < 1e-12


def test_spearman_is_zero_for_constant_input():
    assert spearman_rho([1, 2, 3], [5.0, 5.0, 5.0]) == 0.0


def test_paired_bootstrap_certifies_a_known_decreasing_curve():
    rng = np.random.default_rng(0)
    counts = np.arange(6)
    # matched rows: each trial fails at every count once its threshold is hit
    thresholds = rng.uniform(0, 8, size=400)
    outcomes = thresholds[:, None] > counts[None, :]
    rho, upper = bootstrap_monotone(counts, outcomes, seed=2)
    assert rho < 0 and upper < 0

    rising = ~outcomes
    rho_up, upper_up = bootstrap_monotone(counts, rising, seed=2)
    assert rho_up > 0 and upper_up > 0


# ---------------------------------------------------------------------------
# config


def test_config_rejects_bad_values():
    with pytest.raises(BadEvalConfig):
        EvalConfig(episodes=0)
    with pytest.raises(BadEvalConfig):
        EvalConfig(horizon=0)
    with pytest.raises(BadEvalConfig):
        EvalConfig(workers=0)
    with pytest.raises(BadEvalConfig):
        EvalConfig(task="juggle")
    with pytest.raises(BadEvalConfig):
        EvalConfig(distractor_counts=())
    with pytest.raises(BadEvalConfig):
        EvalConfig(episodes=3, seeds=(1, 2))


def test_config_round_trips_through_json():
    cfg = EvalConfig(task="pick", episodes=7, seeds=(3, 1, 4, 1, 5, 9, 2),
                     distractor_counts=(0, 2), horizon=50,
                     prompt={"kind": "mock", "alpha": 0.2}, workers=2)
    assert EvalConfig.from_json(cfg.to_json()) == cfg


def test_config_rejects_unknown_fields():
    with pytest.raises(BadEvalConfig):
        EvalConfig.from_json(json.dumps({"task": "pick", "epizodes": 5}))


# ---------------------------------------------------------------------------
# run_eval


def test_follower_with_oracle_prompts_scores_high():
    cfg = EvalConfig(task="pick", episodes=25, policy="follower")
    report = run_eval(cfg)
    assert report.success_rate >= 0.95
    assert report.verified_successes == report.successes
    assert sum(report.histogram.values()) == report.episodes == 25
    lo, hi = report.interval
    assert 0.0 <= lo <= report.success_rate <= hi <= 1.0


def test_report_json_is_byte_identical_across_runs():
    cfg = EvalConfig(task="pick", episodes=15, policy="follower",
                     prompt={"kind": "mock", "alpha": 0.4, "sigma": 1.0})
    assert run_eval(cfg).to_json() == run_eval(cfg).to_json()


def test_always_failing_policy_lands_in_failure_categories():
    cfg = EvalConfig(task="pick", episodes=20, horizon=25)
    report = run_eval(cfg, policy=IdleAgent())
    assert report.successes == 0 and report.success_rate == 0.0
    assert report.histogram["Success"] == 0
    assert report.histogram["HarnessError"] == 0
    assert sum(report.histogram.values()) == 20
    assert report.interval[0] == 0.0


def test_success_count_equals_the_threshold_rule():
    cfg = EvalConfig(task="pick", episodes=30, distractor_counts=(3,),
                     policy="follower", prompt={"kind": "mock", "alpha": 0.5})
    report = run_eval(cfg)
    by_rule = sum(r.peak_reward > cfg.success_threshold for r in report.results)
    assert report.successes == by_rule
    assert 0 < report.successes < 30  # the mix actually exercises both sides
    assert report.histogram["Success"] == report.successes


def test_crashing_policy_is_a_harness_error_not_a_silent_drop():
    class Broken:
        wants_env = False

        def act(self, obs):
            raise RuntimeError("segfault cosplay")

    cfg = EvalConfig(task="pick", episodes=8)
    report = run_eval(cfg, policy=Broken())
    assert report.harness_errors == 8
    assert report.histogram["HarnessError"] == 8
    assert sum(report.histogram.values()) == 8
    assert all(r.error and "segfault" in r.error for r in report.results)


def test_prompt_failures_score_the_episode_not_the_harness():
    class NoAnswer:
        def point(self, obs, query, k):
            raise PromptError("model had nothing to say")

    cfg = EvalConfig(task="pick", episodes=6, horizon=20)
    report = run_eval(cfg, source=NoAnswer())
    assert report.harness_errors == 0
    assert report.successes == 0
    assert report.histogram["DidNotGrasp"] == 6
    assert all(r.error for r in report.results)


def test_worker_pool_reduces_in_seed_order():
    base = dict(task="pick", episodes=16, policy="follower",
                prompt={"kind": "mock", "alpha": 0.3, "sigma": 0.5})
    serial = run_eval(EvalConfig(**base, workers=1))
    pooled = run_eval(EvalConfig(**base, workers=4))
    assert serial.to_json() == pooled.to_json()


def test_missing_model_raises_model_load_failure(tmp_path):
    cfg = EvalConfig(task="pick", episodes=1, policy=str(tmp_path / "nope.json"))
    with pytest.raises(ModelLoadFailure):
        run_eval(cfg)


def test_open_task_uses_stage_outcome_categories():
    cfg = EvalConfig(task="open", episodes=8, policy="oracle")
    report = run_eval(cfg)
    assert set(report.histogram) == {"Success", "DidNotSucceed", "HarnessError"}
    assert report.success_rate >= 0.9


# ---------------------------------------------------------------------------
# distractor sweep


def test_sweep_requires_pick_and_a_zero_baseline():
    with pytest.raises(BadEvalConfig):
        distractor_sweep(EvalConfig(task="open", episodes=2))
    with pytest.raises(BadEvalConfig):
        distractor_sweep(EvalConfig(task="pick", episodes=2,
                                    distractor_counts=(1, 2)))


def test_sweep_normalizes_each_curve_to_its_own_baseline():
    cfg = EvalConfig(task="pick", episodes=12, distractor_counts=(0, 2),
                     policy="follower", workers=2)
    sweep = distractor_sweep(cfg, sources={
        "oracle": {"kind": "oracle"},
        "mock": {"kind": "mock", "alpha": 0.5},
    })
    for curve in sweep.curves:
        assert curve.normalized[0] == 1.0
        if curve.rates[0] > 0:
            assert curve.normalized[1] == curve.rates[1] / curve.rates[0]
    assert json.loads(sweep.to_json())["version"] == 1


def test_oracle_prompts_stay_flat_while_confused_prompts_degrade():
    cfg = EvalConfig(task="pick", episodes=25, distractor_counts=(0, 1, 3, 5),
                     policy="follower", workers=4)
    sweep = distractor_sweep(cfg, sources={
        "oracle": {"kind": "oracle"},
        "mock": {"kind": "mock", "alpha": 0.15},
    })
    oracle, mock = sweep.curve("oracle"), sweep.curve("mock")
    assert max(oracle.rates) - min(oracle.rates) <= 0.05
    assert all(m <= o for m, o in zip(mock.rates[1:], oracle.rates[1:]))
    rho, upper = bootstrap_monotone(mock.counts, mock.outcomes(), seed=3)
    assert upper <= 0.0


# ---------------------------------------------------------------------------
# training hook


@pytest.fixture(scope="module")
def tiny_training_setup():
    out = []
    for seed in (0, 1):
        env = make("EgoGym-Pick-v0", seed=seed)
        env.reset()
        ep, _ = record_rollout(env, OraclePolicy(), episode_id=f"demo{seed}")
        out.append(label_anchors(ep, gripper=GripperGeometry(tuple(TIP_OFFSET))))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDimension)
        codec = fit_codec(np.concatenate([episode_actions(e) for e in out]),
                          [4, 4], seed=0)
    return out, codec


def test_untrained_model_scores_near_the_floor(tiny_training_setup):
    _, codec = tiny_training_setup
    model = PolicyModel(codec, PolicyConfig(seed=0))
    cfg = EvalConfig(task="pick", episodes=12)
    report = run_eval(cfg, policy=lambda a: PolicyRunner(model, a))
    assert report.success_rate < 0.05


def test_training_hook_appends_records_and_renders_csv(tiny_training_setup):
    episodes, codec = tiny_training_setup
    hook = make_training_hook(EvalConfig(task="pick", episodes=3))
    cfg = PolicyConfig(steps=40, batch_size=8, eval_every=20, seed=0)
    _, report = train(episodes, codec, cfg, eval_hook=hook)
    assert [r["step"] for r in report.hook_records] == [20, 40]
    for rec in report.hook_records:
        assert 0.0 <= rec["result"]["success_rate"] <= 1.0
    text = hook_records_csv(report.hook_records)
    lines = text.strip().splitlines()
    assert lines[0] == "step,loss,success_rate"
    assert len(lines) == 3


def test_disabled_hook_leaves_no_records(tiny_training_setup):
    episodes, codec = tiny_training_setup
    cfg = PolicyConfig(steps=20, batch_size=8, eval_every=0, seed=0)
    _, report = train(episodes, codec, cfg, eval_hook=make_training_hook())
    assert report.hook_records == []


def test_hook_is_deterministic_for_a_fixed_snapshot(tiny_training_setup):
    _, codec = tiny_training_setup
    model = PolicyModel(codec, PolicyConfig(seed=3))
    hook = make_training_hook(EvalConfig(task="pick", episodes=4))
    first = hook(model, 10)
    second = hook(model, 10)
    assert first == second
