"""Residual action quantizer tests: exact recovery on separable data,
the named error contract, idempotent encoding, and serialization."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cap.codec import (
    ACTION_DIM,
    STAGE_SIZES,
    ActionCodec,
    CodecError,
    DegenerateDimension,
    IndexOutOfRange,
    InsufficientData,
    episode_actions,
    fit_codec,
)
from cap.collect import collect_demos
from cap.episodes import Task
from cap.sim.oracle import OraclePolicy
from tests.test_episodes import make_episode, make_frame


def two_cluster_actions(n_per=10):
    """Two distinct 7-D points, repeated; variance in every dimension."""
    a = np.zeros(ACTION_DIM)
    b = np.arange(1.0, ACTION_DIM + 1)
    return np.concatenate([np.tile(a, (n_per, 1)), np.tile(b, (n_per, 1))])


def unit_codec(stages=None):
    """Identity normalizer, hand-placed centroids along dimension 0."""
    if stages is None:
        stages = (np.vstack([-np.eye(1, ACTION_DIM)[0], np.eye(1, ACTION_DIM)[0]]),)
    return ActionCodec(mean=np.zeros(ACTION_DIM), scale=np.ones(ACTION_DIM), stages=stages)


@pytest.fixture(scope="module")
def demo_actions():
    episodes, _ = collect_demos(Task.PICK, range(12), OraclePolicy(), images=False)
    return np.concatenate([episode_actions(ep) for ep in episodes])


# --- fitting -------------------------------------------------------------------

def test_separable_clusters_recovered_exactly():
    actions = two_cluster_actions()
    codec = fit_codec(actions, [2], seed=3)
    recon = codec.decode(codec.encode(actions))
    assert np.allclose(recon, actions, atol=1e-12)
    # the two centroids land exactly on the two distinct points
    decoded = {tuple(np.round(codec.decode([[j]])[0], 9)) for j in range(2)}
    expected = {tuple(np.zeros(ACTION_DIM)), tuple(np.arange(1.0, 8.0))}
    assert decoded == expected


def test_second_stage_of_perfectly_coded_data_is_null():
    actions = two_cluster_actions()
    codec = fit_codec(actions, [2, 2], seed=0)
    # the first stage leaves zero residual, so stage two collapses to zero
    assert np.allclose(codec.stages[1], 0.0, atol=1e-12)


def test_identical_actions_warn_and_reconstruct_exactly():
    actions = np.tile(np.array([0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 1.0]), (20, 1))
    with pytest.warns(DegenerateDimension):
        codec = fit_codec(actions, [2, 2], seed=0)
    assert np.array_equal(codec.scale, np.ones(ACTION_DIM))
    assert np.allclose(codec.decode(codec.encode(actions)), actions, atol=1e-12)


def test_flat_dimension_scale_clamped():
    rng = np.random.default_rng(0)
    actions = rng.normal(size=(50, ACTION_DIM))
    actions[:, 4] = 0.25  # one constant dimension among varying ones
    with pytest.warns(DegenerateDimension, match=r"\[4\]"):
        codec = fit_codec(actions, [4], seed=0)
    assert codec.scale[4] == 1.0
    assert codec.mean[4] == pytest.approx(0.25)


def test_fit_deterministic_bitwise():
    rng = np.random.default_rng(5)
    actions = rng.normal(size=(120, ACTION_DIM))
    a = fit_codec(actions, [8, 8], seed=11)
    b = fit_codec(actions, [8, 8], seed=11)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.scale, b.scale)
    for sa, sb in zip(a.stages, b.stages):
        assert np.array_equal(sa, sb)


def test_scale_shift_equivariance():
    rng = np.random.default_rng(9)
    actions = rng.normal(size=(100, ACTION_DIM))
    moved = actions * 3.0 + 0.7
    a = fit_codec(actions, [8, 8], seed=2)
    b = fit_codec(moved, [8, 8], seed=2)
    # normalization absorbs the affine map: same codes, same codebooks
    assert np.array_equal(a.encode(actions), b.encode(moved))
    for sa, sb in zip(a.stages, b.stages):
        assert np.allclose(sa, sb, atol=1e-9)
    assert np.allclose(b.decode(b.encode(moved)), a.decode(a.encode(actions)) * 3.0 + 0.7,
                       atol=1e-9)


def test_insufficient_data():
    rng = np.random.default_rng(0)
    with pytest.raises(InsufficientData):
        fit_codec(rng.normal(size=(5, ACTION_DIM)), [8, 8])
    assert issubclass(InsufficientData, CodecError)
    assert issubclass(CodecError, ValueError)


def test_fit_validation_errors():
    rng = np.random.default_rng(0)
    good = rng.normal(size=(50, ACTION_DIM))
    with pytest.raises(CodecError):
        fit_codec(good, [])
    with pytest.raises(CodecError):
        fit_codec(good, [1, 8])
    with pytest.raises(CodecError):
        fit_codec(rng.normal(size=(50, 6)), [8])


def test_codec_constructor_validation():
    with pytest.raises(CodecError):
        ActionCodec(mean=np.zeros(ACTION_DIM), scale=np.zeros(ACTION_DIM),
                    stages=(np.zeros((2, ACTION_DIM)),))
    with pytest.raises(CodecError):
        ActionCodec(mean=np.zeros(ACTION_DIM), scale=np.ones(ACTION_DIM), stages=())


def test_stage_size_table():
    assert STAGE_SIZES == {"pick": (16, 16), "articulated": (32, 32)}


# --- coding --------------------------------------------------------------------

def test_nearest_centroid_assignment():
    codec = unit_codec()
    x = np.zeros((1, ACTION_DIM))
    x[0, 0] = 0.9
    assert codec.encode(x)[0, 0] == 1
    x[0, 0] = -0.4
    assert codec.encode(x)[0, 0] == 0


def test_tie_breaks_to_lowest_index():
    codec = unit_codec()
    x = np.zeros((1, ACTION_DIM))  # equidistant from both centroids
    assert codec.encode(x)[0, 0] == 0


def test_decode_errors():
    codec = unit_codec()
    with pytest.raises(CodecError):
        codec.decode(np.array([[0, 0]]))  # stage count mismatch
    with pytest.raises(IndexOutOfRange):
        codec.decode(np.array([[2]]))
    with pytest.raises(IndexOutOfRange):
        codec.decode(np.array([[-1]]))
    assert issubclass(IndexOutOfRange, IndexError)


def test_reconstruction_mse_monotone_synthetic():
    rng = np.random.default_rng(3)
    actions = rng.normal(size=(400, ACTION_DIM))
    codec = fit_codec(actions, [8, 8, 8], seed=0)
    mses = [codec.reconstruction_mse(actions, n) for n in (1, 2, 3)]
    assert mses[0] >= mses[1] >= mses[2]
    assert mses[2] < mses[0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_encode_idempotent_property(seed):
    rng = np.random.default_rng(seed)
    train = rng.normal(size=(60, ACTION_DIM))
    codec = fit_codec(train, [4, 4], seed=0)
    probe = rng.normal(size=(80, ACTION_DIM)) * 2.0
    codes = codec.encode(probe)
    again = codec.encode(codec.decode(codes))
    assert np.array_equal(codes, again)


def test_encode_idempotent_on_adversarial_boundary_points():
    # points exactly between centroids are where greedy re-encoding drifts
    codec = unit_codec(stages=(
        np.vstack([-np.eye(1, ACTION_DIM)[0], np.eye(1, ACTION_DIM)[0]]),
        np.vstack([-0.5 * np.eye(1, ACTION_DIM)[0], 0.5 * np.eye(1, ACTION_DIM)[0]]),
    ))
    xs = np.zeros((5, ACTION_DIM))
    xs[:, 0] = [-1.5, -0.75, 0.0, 0.75, 1.5]
    codes = codec.encode(xs)
    assert np.array_equal(codec.encode(codec.decode(codes)), codes)


# --- serialization --------------------------------------------------------------

def test_json_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    actions = rng.normal(size=(200, ACTION_DIM))
    codec = fit_codec(actions, [16, 16], seed=0)
    clone = ActionCodec.from_json(codec.to_json())
    assert np.array_equal(clone.mean, codec.mean)
    assert np.array_equal(clone.scale, codec.scale)
    for sa, sb in zip(clone.stages, codec.stages):
        assert np.array_equal(sa, sb)
    assert np.array_equal(clone.encode(actions), codec.encode(actions))

    path = tmp_path / "codec.json"
    codec.save(path)
    loaded = ActionCodec.load(path)
    assert loaded.to_json() == codec.to_json()


def test_from_json_rejects_wrong_dimension():
    with pytest.raises(CodecError):
        ActionCodec.from_json('{"action_dim": 6, "mean": [], "scale": [], "stages": []}')


# --- action extraction -----------------------------------------------------------

def test_episode_actions_hand_example():
    f0 = make_frame(0, trans=(0.0, 0.0, 0.0), aper=1.0)
    f1 = make_frame(1, trans=(0.01, 0.0, 0.0), aper=0.3)
    f2 = make_frame(2, trans=(0.01, 0.0, 0.0), rotvec=(0.0, 0.0, 0.1), aper=0.3)
    ep = make_episode([f0, f1, f2])
    acts = episode_actions(ep)
    assert acts.shape == (2, ACTION_DIM)
    assert np.allclose(acts[0], [0.01, 0, 0, 0, 0, 0, 1.0], atol=1e-12)
    # second delta is pure rotation about z, carrying frame 1's command
    assert np.allclose(acts[1, :3], 0.0, atol=1e-12)
    assert np.allclose(acts[1, 3:6], [0, 0, 0.1], atol=1e-12)
    assert acts[1, 6] == 0.3


def test_episode_actions_roundtrip_poses():
    rng = np.random.default_rng(2)
    frames = [make_frame(i, trans=rng.normal(size=3) * 0.02,
                         rotvec=rng.normal(size=3) * 0.05, aper=1.0)
              for i in range(6)]
    ep = make_episode(frames)
    acts = episode_actions(ep)
    pose = frames[0].pose
    for t in range(5):
        from cap.geometry import RigidTransform, rotvec_to_quat
        pose = pose @ RigidTransform(rotvec_to_quat(acts[t, 3:6]), acts[t, :3])
        assert np.allclose(pose.trans, frames[t + 1].pose.trans, atol=1e-12)


# --- behavior on recorded demonstrations -----------------------------------------

def test_demo_actions_quantization_quality(demo_actions):
    with warnings.catch_warnings():
        # the scripted expert never rotates, so rotation dims are flat
        warnings.simplefilter("ignore", DegenerateDimension)
        codec = fit_codec(demo_actions, STAGE_SIZES["pick"], seed=0)
    mse1 = codec.reconstruction_mse(demo_actions, 1)
    mse2 = codec.reconstruction_mse(demo_actions, 2)
    assert mse2 <= mse1

    recon = codec.decode(codec.encode(demo_actions))
    err = recon - demo_actions
    std = demo_actions.std(axis=0)
    for d in range(ACTION_DIM):
        if std[d] > 1e-12:
            rms = float(np.sqrt(np.mean(err[:, d] ** 2)))
            assert rms < 0.5 * std[d], f"dim {d}: rms {rms} vs std {std[d]}"
        else:
            assert np.max(np.abs(err[:, d])) < 1e-9

    codes = codec.encode(demo_actions)
    assert np.array_equal(codec.encode(codec.decode(codes)), codes)
