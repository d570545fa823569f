"""Contact labeling tests: stall detection oracle scans and anchor invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cap.episodes import Task, filter_static
from cap.geometry import RigidTransform, mirror_point, transform_point
from cap.labeling import (
    ContactDetectionConfig,
    GripperGeometry,
    NoContactFound,
    detect_contact,
    label_anchors,
)
from cap.episodes import mirror_episode
from tests.test_episodes import make_episode, make_frame

TIP = GripperGeometry((0.0, 0.0, 0.15))


# --- detection ---------------------------------------------------------------

def test_detect_hand_scan_examples():
    assert detect_contact([1.0, 0.8, 0.6, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]) == 3
    assert detect_contact([1.0, 0.7, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4]) == 2


def test_detect_never_closes():
    with pytest.raises(NoContactFound):
        detect_contact([1.0] * 12)


def test_detect_close_but_no_stall():
    # keeps decreasing to the end fast enough that no stall window passes
    with pytest.raises(NoContactFound):
        detect_contact([1.0, 0.9, 0.85, 0.83, 0.82, 0.81], ContactDetectionConfig())


def test_detect_stall_at_final_frames():
    # lookahead clamps at the end: a close that holds to the last frame counts
    assert detect_contact([1.0, 0.7, 0.4, 0.4]) == 2


def test_detect_requires_min_close_first():
    # stalls immediately but never closed enough
    with pytest.raises(NoContactFound):
        detect_contact([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9])


def test_detect_config_validation():
    with pytest.raises(ValueError):
        ContactDetectionConfig(stall_eps=0.0)
    with pytest.raises(ValueError):
        ContactDetectionConfig(stall_window=0)
    with pytest.raises(ValueError):
        ContactDetectionConfig(min_close=0.0)


def reference_detect(a, cfg=ContactDetectionConfig()):
    # independent loop-free restatement of the rule
    a = list(map(float, a))
    end = len(a) - 1
    for t in range(len(a)):
        closed = (a[0] - a[t]) >= cfg.min_close
        stalled = all(
            a[t] - a[min(t + k, end)] < cfg.stall_eps for k in range(1, cfg.stall_window + 1)
        )
        if closed and stalled:
            return t
    return None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40))
def test_detect_matches_reference(apertures):
    want = reference_detect(apertures)
    if want is None:
        with pytest.raises(NoContactFound):
            detect_contact(apertures)
    else:
        assert detect_contact(apertures) == want


# --- labeling ---------------------------------------------------------------

def closing_episode(seed=0, n=12, task=Task.PICK, contact=None):
    """Camera translates while the gripper closes, stalls at frame 5."""
    rng = np.random.default_rng(seed)
    apers = [1.0, 0.9, 0.75, 0.6, 0.45, 0.35] + [0.35] * (n - 6)
    frames = []
    for i in range(n):
        frames.append(
            make_frame(
                i,
                trans=rng.normal(scale=0.05, size=3),
                rotvec=rng.normal(scale=0.1, size=3),
                aper=apers[i],
                rng=rng,
            )
        )
    return make_episode(frames, task=task, contact=contact)


def test_label_sets_contact_and_anchors():
    e = label_anchors(closing_episode(), gripper=TIP)
    assert e.contact_frame == 5
    assert all(f.anchor is not None for f in e.frames)
    for t, f in enumerate(e.frames):
        assert f.anchor.frozen == (t >= 5)
    for f in e.frames[5:]:
        np.testing.assert_array_equal(f.anchor.point, TIP.tip_offset)


def test_label_stationary_camera():
    frames = [
        make_frame(i, trans=(0.1, 0.2, 0.3), aper=a)
        for i, a in enumerate([1.0, 0.7, 0.4, 0.4, 0.4, 0.4])
    ]
    e = label_anchors(make_episode(frames), gripper=TIP)
    for f in e.frames:
        np.testing.assert_allclose(f.anchor.point, TIP.tip_offset, atol=1e-12)


def test_label_camera_retreat_along_z():
    # camera backs off 0.1 m along its own -z after... before contact:
    # at frame 0 the camera sits 0.1 m behind its contact pose, so the
    # anchor appears 0.1 m deeper
    frames = [
        make_frame(0, trans=(0, 0, -0.1), aper=1.0),
        make_frame(1, trans=(0, 0, 0), aper=0.7),
        make_frame(2, trans=(0, 0, 0), aper=0.4),
        make_frame(3, trans=(0, 0, 0), aper=0.4),
    ]
    e = label_anchors(make_episode(frames), gripper=TIP)
    assert e.contact_frame == 2
    np.testing.assert_allclose(
        e.frames[0].anchor.point, TIP.tip_offset + np.array([0, 0, 0.1]), atol=1e-12
    )


def test_label_world_frame_constancy():
    e = label_anchors(closing_episode(seed=4), gripper=TIP)
    c = e.contact_frame
    world_c = transform_point(e.frames[c].pose, TIP.tip_offset)
    for t in range(c):
        world_t = transform_point(e.frames[t].pose, e.frames[t].anchor.point)
        np.testing.assert_allclose(world_t, world_c, atol=1e-9)


def test_label_close_task_uses_recorded_contact():
    e = closing_episode(task=Task.CLOSE, contact=2)
    out = label_anchors(e, gripper=TIP)
    assert out.contact_frame == 2
    assert out.frames[2].anchor.frozen


def test_label_close_task_without_contact_fails():
    e = closing_episode(task=Task.CLOSE, contact=None)
    with pytest.raises(NoContactFound):
        label_anchors(e, gripper=TIP)


def test_label_commutes_with_mirroring():
    e = closing_episode(seed=9)
    lm = label_anchors(mirror_episode(e), gripper=GripperGeometry(mirror_point(TIP.tip_offset)))
    ml = label_anchors(e, gripper=TIP)
    assert lm.contact_frame == ml.contact_frame
    for f_lm, f_ml in zip(lm.frames, ml.frames):
        np.testing.assert_allclose(
            f_lm.anchor.point, mirror_point(f_ml.anchor.point), atol=1e-9
        )


def test_label_commutes_with_filtering():
    # closing steps exceed the aperture threshold, so contact frames survive
    e = closing_episode(seed=13)
    label_then_filter = filter_static(label_anchors(e, gripper=TIP))
    filter_then_label = label_anchors(filter_static(e), gripper=TIP)
    assert [f.index for f in label_then_filter.frames] == [
        f.index for f in filter_then_label.frames
    ]
    assert label_then_filter.contact_frame == filter_then_label.contact_frame
    for a, b in zip(label_then_filter.frames, filter_then_label.frames):
        np.testing.assert_allclose(a.anchor.point, b.anchor.point, atol=1e-9)
        assert a.anchor.frozen == b.anchor.frozen
