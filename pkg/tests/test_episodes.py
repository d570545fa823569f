"""Episode store and preprocessing tests.

The static-filter oracle here is an independent forward scan written
against the rule text, not the implementation.
"""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cap.episodes import (
    CentroidTrack,
    CorruptFrameLine,
    DegenerateCalibration,
    Episode,
    EpisodeStoreError,
    Frame,
    MissingManifest,
    SchemaVersionMismatch,
    Task,
    aperture_from_centroids,
    depth_ref_for,
    filter_static,
    mirror_episode,
    read_episode,
    rgb_ref_for,
    write_episode,
)
from cap.geometry import CameraIntrinsics, ContactAnchor, RigidTransform, project

K = CameraIntrinsics(fx=200.0, fy=200.0, cx=111.5, cy=111.5, width=224, height=224)


def make_frame(i, trans=(0, 0, 0), rotvec=(0, 0, 0), aper=1.0, rng=None, anchor=None):
    rng = rng or np.random.default_rng(i)
    rgb = rng.integers(0, 255, size=(224, 224, 3), dtype=np.uint8)
    depth = rng.integers(0, 4000, size=(224, 224), dtype=np.uint16)
    depth[0, 0] = 0  # keep a no-depth sentinel pixel in play
    return Frame(
        index=i,
        pose=RigidTransform.from_rotvec(rotvec, trans),
        aperture_cmd=aper,
        aperture_meas=aper,
        rgb_ref=rgb_ref_for(i),
        depth_ref=depth_ref_for(i),
        anchor=anchor,
        rgb=rgb,
        depth=depth,
    )


def make_episode(frames, task=Task.PICK, contact=None, meta=None):
    return Episode(
        id="ep-test",
        task=task,
        seed=7,
        frames=tuple(frames),
        intrinsics=K,
        contact_frame=contact,
        metadata=meta or {},
    )


# --- type invariants ---------------------------------------------------------

def test_aperture_range_enforced():
    with pytest.raises(EpisodeStoreError):
        make_frame(0, aper=1.5)


def test_indices_strictly_increasing():
    with pytest.raises(EpisodeStoreError):
        make_episode([make_frame(0), make_frame(0)])


def test_contact_frame_in_range():
    with pytest.raises(EpisodeStoreError):
        make_episode([make_frame(0)], contact=1)


def test_all_or_no_anchors():
    a = ContactAnchor([0, 0, 1.0])
    with pytest.raises(EpisodeStoreError):
        make_episode([make_frame(0, anchor=a), make_frame(1)])


# --- round trip --------------------------------------------------------------

def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    frames = [
        make_frame(
            i,
            trans=rng.normal(size=3),
            rotvec=rng.normal(scale=0.4, size=3),
            aper=float(rng.uniform()),
            rng=rng,
            anchor=ContactAnchor(rng.normal(size=3), frozen=bool(i == 2)),
        )
        for i in range(3)
    ]
    e = make_episode(frames, contact=1, meta={"scene": "synthetic", "mirrored": "false"})
    write_episode(e, tmp_path)
    back = read_episode(tmp_path, images=True)

    assert back.id == e.id and back.task is e.task and back.seed == e.seed
    assert back.contact_frame == e.contact_frame
    assert back.metadata == e.metadata
    assert back.intrinsics == e.intrinsics
    assert len(back) == len(e)
    for f0, f1 in zip(e.frames, back.frames):
        assert f1.index == f0.index
        assert np.array_equal(f1.pose.quat, f0.pose.quat)  # bit-exact
        assert np.array_equal(f1.pose.trans, f0.pose.trans)
        assert f1.aperture_cmd == f0.aperture_cmd
        assert f1.aperture_meas == f0.aperture_meas
        assert f1.rgb_ref == f0.rgb_ref and f1.depth_ref == f0.depth_ref
        assert np.array_equal(f1.anchor.point, f0.anchor.point)
        assert f1.anchor.frozen == f0.anchor.frozen
        assert np.array_equal(f1.rgb, f0.rgb)
        assert np.array_equal(f1.depth, f0.depth)


def test_seventeen_digit_floats_survive(tmp_path):
    # an adversarial value with no short decimal form
    ugly = float.fromhex("0x1.921fb54442d18p+1")
    f = make_frame(0, trans=(ugly, -ugly, ugly / 3))
    e = make_episode([f])
    write_episode(e, tmp_path)
    back = read_episode(tmp_path)
    assert back.frames[0].pose.trans[0] == ugly


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        read_episode(tmp_path / "nope")


def test_schema_version_mismatch(tmp_path):
    e = make_episode([make_frame(0)])
    write_episode(e, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaVersionMismatch):
        read_episode(tmp_path)


def test_truncated_last_line(tmp_path):
    e = make_episode([make_frame(0), make_frame(1), make_frame(2)])
    write_episode(e, tmp_path)
    path = tmp_path / "frames.jsonl"
    lines = path.read_text().splitlines()
    lines[-1] = lines[-1][: len(lines[-1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptFrameLine) as exc:
        read_episode(tmp_path)
    assert exc.value.line_number == 3


def test_depth_sentinel_round_trip(tmp_path):
    e = make_episode([make_frame(0)])
    write_episode(e, tmp_path)
    back = read_episode(tmp_path)
    assert back.depth_mm(0)[0, 0] == 0
    assert back.depth_m(0)[0, 0] == 0.0


# --- aperture mapping --------------------------------------------------------

def track(distances, d_open=100.0, d_closed=20.0):
    t = len(distances)
    left = np.zeros((t, 2))
    right = np.stack([np.asarray(distances, dtype=float), np.zeros(t)], axis=1)
    return CentroidTrack(left=left, right=right, d_open=d_open, d_closed=d_closed)


def test_aperture_examples():
    a = aperture_from_centroids(track([20.0, 60.0, 120.0]))
    np.testing.assert_allclose(a, [0.0, 0.5, 1.0])


def test_aperture_degenerate_calibration():
    with pytest.raises(DegenerateCalibration):
        track([30.0], d_open=20.0, d_closed=20.0)
    with pytest.raises(DegenerateCalibration):
        track([30.0], d_open=10.0, d_closed=20.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 300.0), min_size=2, max_size=30))
def test_aperture_monotone_in_distance(distances):
    distances = sorted(distances)
    a = aperture_from_centroids(track(distances))
    assert np.all(np.diff(a) >= 0)


# --- static filter -----------------------------------------------------------

def test_filter_translation_example():
    frames = [make_frame(i, trans=(0.002 * i, 0, 0)) for i in range(10)]
    out = filter_static(make_episode(frames))
    assert [f.index for f in out.frames] == [0, 2, 4, 6, 8]


def test_filter_fully_static():
    frames = [make_frame(i) for i in range(8)]
    out = filter_static(make_episode(frames))
    assert [f.index for f in out.frames] == [0]


def test_filter_aperture_example():
    frames = [make_frame(i, aper=min(1.0, 0.06 * i)) for i in range(10)]
    out = filter_static(make_episode(frames))
    assert [f.index for f in out.frames] == list(range(10))


def test_filter_rotation_channel():
    frames = [make_frame(i, rotvec=(0, 0, 0.06 * i)) for i in range(6)]
    out = filter_static(make_episode(frames))
    # 0.06 rad per frame: geodesic from last kept crosses 0.1 every 2 frames
    assert [f.index for f in out.frames] == [0, 2, 4]


def random_episode(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 25))
    pos = np.zeros(3)
    ang = 0.0
    aper = 1.0
    frames = []
    for i in range(n):
        frames.append(
            make_frame(i, trans=pos.copy(), rotvec=(0, 0, ang), aper=float(np.clip(aper, 0, 1)))
        )
        pos += rng.normal(scale=0.002, size=3)
        ang += float(rng.normal(scale=0.04))
        aper += float(rng.normal(scale=0.02))
    contact = int(rng.integers(0, n)) if rng.uniform() < 0.5 else None
    return make_episode(frames, contact=contact)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_filter_idempotent(seed):
    e = random_episode(seed)
    once = filter_static(e)
    twice = filter_static(once)
    assert [f.index for f in twice.frames] == [f.index for f in once.frames]
    assert twice.contact_frame == once.contact_frame


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_filter_contact_frame_proximity(seed):
    e = random_episode(seed)
    if e.contact_frame is None:
        return
    out = filter_static(e)
    orig = e.frames[e.contact_frame]
    kept = out.frames[out.contact_frame]
    assert kept.index <= orig.index
    assert np.linalg.norm(kept.pose.trans - orig.pose.trans) <= 0.003 + 1e-12
    assert kept.pose.rotation_angle_to(orig.pose) <= 0.1 + 1e-12


def test_filter_remaps_contact_to_kept_frame():
    frames = [make_frame(i, trans=(0.002 * i, 0, 0)) for i in range(10)]
    out = filter_static(make_episode(frames, contact=5))
    # kept original indices {0,2,4,6,8}; nearest kept at-or-before 5 is 4, position 2
    assert out.contact_frame == 2
    assert out.frames[out.contact_frame].index == 4


# --- mirroring ---------------------------------------------------------------

def test_mirror_translation_and_anchor():
    a = ContactAnchor([0.2, 0.1, 1.0])
    e = make_episode([make_frame(0, trans=(1, 2, 3), anchor=a)])
    m = mirror_episode(e)
    np.testing.assert_allclose(m.frames[0].pose.trans, [-1, 2, 3], atol=0)
    np.testing.assert_allclose(m.frames[0].anchor.point, [-0.2, 0.1, 1.0], atol=0)
    assert m.metadata["mirrored"] == "true"


def test_mirror_flips_images():
    e = make_episode([make_frame(0)])
    m = mirror_episode(e)
    assert np.array_equal(m.frames[0].rgb, e.frames[0].rgb[:, ::-1])
    assert np.array_equal(m.frames[0].depth, e.frames[0].depth[:, ::-1])


def test_mirror_involution():
    rng = np.random.default_rng(11)
    frames = [
        make_frame(i, trans=rng.normal(size=3), rotvec=rng.normal(scale=0.3, size=3))
        for i in range(4)
    ]
    e = make_episode(frames, meta={"mirrored": "false"})
    back = mirror_episode(mirror_episode(e))
    assert back.metadata["mirrored"] == "false"
    assert back.intrinsics == e.intrinsics
    for f0, f1 in zip(e.frames, back.frames):
        assert f1.pose.allclose(f0.pose, atol=1e-12)
        assert np.array_equal(f1.rgb, f0.rgb)
        assert np.array_equal(f1.depth, f0.depth)


def test_mirror_projection_identity():
    # a camera-frame anchor at pixel u lands at width-1-u after mirroring
    anchor = ContactAnchor([0.15, -0.05, 0.8])
    e = make_episode([make_frame(0, anchor=anchor)])
    u, v = project(K, anchor.point)
    m = mirror_episode(e)
    mu, mv = project(m.intrinsics, m.frames[0].anchor.point)
    assert abs(mu - (224 - 1 - u)) < 1e-6
    assert abs(mv - v) < 1e-6


def test_mirror_round_trip_via_disk(tmp_path):
    e = make_episode([make_frame(0, trans=(0.5, 0.2, 0.1))])
    write_episode(e, tmp_path / "orig")
    loaded = read_episode(tmp_path / "orig")
    m = mirror_episode(loaded)  # images pulled from disk on demand
    write_episode(m, tmp_path / "mirrored")
    back = read_episode(tmp_path / "mirrored", images=True)
    assert np.array_equal(back.frames[0].rgb, e.frames[0].rgb[:, ::-1])
    assert back.frames[0].pose.trans[0] == -0.5
