"""Geometry unit tests.

Oracles: 4x4 homogeneous matrices and scipy.spatial.transform.Rotation.
Property tests pin the group axioms and the anchor/mirror invariants.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cap.geometry import (
    AnchorFrame,
    BehindCamera,
    CameraIntrinsics,
    ContactAnchor,
    GeometryError,
    NonPositiveDepth,
    OutOfBounds,
    RigidTransform,
    compose,
    deproject,
    mirror_point,
    mirror_transform,
    project,
    propagate_anchor,
    transform_point,
)

RNG = np.random.default_rng(20260822)


def random_transform(rng=RNG) -> RigidTransform:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return RigidTransform(q, rng.normal(scale=0.5, size=3))


def transforms(seed) -> RigidTransform:
    rng = np.random.default_rng(seed)
    return random_transform(rng)


K = CameraIntrinsics(fx=200.0, fy=200.0, cx=111.5, cy=111.5, width=224, height=224)


# --- constructors and validation -------------------------------------------

def test_identity_is_noop():
    p = np.array([0.3, -0.2, 1.4])
    assert np.array_equal(RigidTransform.identity().transform_point(p), p)


def test_quaternion_is_renormalized():
    t = RigidTransform(np.array([1.0, 0.0, 0.0, 1e-8]), np.zeros(3))
    assert abs(np.linalg.norm(t.quat) - 1.0) < 1e-15


def test_bad_quaternion_rejected():
    with pytest.raises(GeometryError):
        RigidTransform(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(np.array([np.nan, 0, 0, 0]), np.zeros(3))


def test_arrays_are_write_protected():
    t = RigidTransform.identity()
    with pytest.raises(ValueError):
        t.trans[0] = 1.0


# --- matrix oracle -----------------------------------------------------------

def test_compose_matches_matrix_product():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        a, b = random_transform(rng), random_transform(rng)
        got = compose(a, b).as_matrix()
        want = a.as_matrix() @ b.as_matrix()
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_quat_matches_scipy():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = random_transform(rng)
        # scipy uses (x, y, z, w) order
        want = Rotation.from_quat(np.roll(t.quat, -1)).as_matrix()
        np.testing.assert_allclose(t.rotation_matrix(), want, atol=1e-12)


def test_rotvec_round_trip_matches_scipy():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        r = rng.normal(scale=1.2, size=3)
        t = RigidTransform.from_rotvec(r)
        want = Rotation.from_rotvec(r).as_matrix()
        np.testing.assert_allclose(t.rotation_matrix(), want, atol=1e-12)
        # the inverse map is canonical (angle in [0, pi]); vectors below pi
        # round-trip exactly, longer ones to an equivalent rotation
        back = t.rotvec()
        if np.linalg.norm(r) < math.pi:
            np.testing.assert_allclose(back, r, atol=1e-9)
        else:
            np.testing.assert_allclose(
                Rotation.from_rotvec(back).as_matrix(), want, atol=1e-9
            )


def test_from_matrix_round_trip():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = random_transform(rng)
        u = RigidTransform.from_matrix(t.as_matrix())
        assert t.allclose(u, atol=1e-12)


# --- group axioms as property tests -----------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_compose_associative(sa, sb, sc):
    a, b, c = transforms(sa), transforms(sb), transforms(sc)
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    assert left.allclose(right, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_inverse_round_trip(seed):
    t = transforms(seed)
    assert compose(t, t.inverse()).allclose(RigidTransform.identity(), atol=1e-12)
    assert compose(t.inverse(), t).allclose(RigidTransform.identity(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_transform_point_matches_matrix(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    p = rng.normal(size=3)
    want = (t.as_matrix() @ np.append(p, 1.0))[:3]
    np.testing.assert_allclose(transform_point(t, p), want, atol=1e-12)


# --- camera ------------------------------------------------------------------

def test_deproject_formula():
    a = deproject(K, 111.5, 111.5, 2.0)
    np.testing.assert_allclose(a.point, [0, 0, 2.0], atol=1e-15)
    a = deproject(K, 211.5, 61.5, 1.0)
    np.testing.assert_allclose(a.point, [0.5, -0.25, 1.0], atol=1e-12)
    assert a.frame is AnchorFrame.CAMERA and not a.frozen


def test_deproject_rejects_bad_inputs():
    with pytest.raises(NonPositiveDepth):
        deproject(K, 10, 10, 0.0)
    with pytest.raises(NonPositiveDepth):
        deproject(K, 10, 10, -0.5)
    with pytest.raises(OutOfBounds):
        deproject(K, 224, 10, 1.0)
    with pytest.raises(OutOfBounds):
        deproject(K, 10, -1, 1.0)


def test_project_rejects_behind_camera():
    with pytest.raises(BehindCamera):
        project(K, [0.0, 0.0, 0.0])
    with pytest.raises(BehindCamera):
        project(K, [0.1, 0.1, -1.0])


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.0, 223.999),
    st.floats(0.0, 223.999),
    st.floats(0.05, 10.0),
)
def test_project_deproject_round_trip(u, v, d):
    p = deproject(K, u, v, d).point
    uu, vv = project(K, p)
    assert abs(uu - u) < 1e-6 and abs(vv - v) < 1e-6


# --- anchor propagation ------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_propagated_anchor_marks_same_world_point(sa, sb, sp):
    a_ref, a_t = transforms(sa), transforms(sb)
    rng = np.random.default_rng(sp)
    anchor = ContactAnchor(rng.normal(size=3))
    moved = propagate_anchor(a_t, a_ref, anchor)
    w_ref = transform_point(a_ref, anchor.point)
    w_t = transform_point(a_t, moved.point)
    np.testing.assert_allclose(w_t, w_ref, atol=1e-9)


def test_propagate_identity_is_noop():
    anchor = ContactAnchor([0.1, 0.2, 0.9])
    t = random_transform(np.random.default_rng(7))
    out = propagate_anchor(t, t, anchor)
    np.testing.assert_allclose(out.point, anchor.point, atol=1e-12)


def test_frozen_anchor_is_returned_verbatim():
    anchor = ContactAnchor([0.1, 0.2, 0.9], frozen=True)
    a, b = transforms(1), transforms(2)
    assert propagate_anchor(a, b, anchor) is anchor


def test_propagate_rejects_world_frame():
    anchor = ContactAnchor([0, 0, 1], frame=AnchorFrame.WORLD)
    with pytest.raises(GeometryError):
        propagate_anchor(transforms(1), transforms(2), anchor)


# --- mirror ------------------------------------------------------------------

def test_mirror_point():
    np.testing.assert_array_equal(mirror_point([0.3, -0.2, 1.0]), [-0.3, -0.2, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_mirror_is_involution(seed):
    t = transforms(seed)
    assert mirror_transform(mirror_transform(t)).allclose(t, atol=0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_mirror_rotation_stays_proper(seed):
    t = transforms(seed)
    m = mirror_transform(t)
    assert abs(np.linalg.det(m.rotation_matrix()) - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_mirror_commutes_with_action(st_, sp):
    # mirror(T) applied to mirror(p) == mirror(T applied to p)
    t = transforms(st_)
    rng = np.random.default_rng(sp)
    p = rng.normal(size=3)
    left = transform_point(mirror_transform(t), mirror_point(p))
    right = mirror_point(transform_point(t, p))
    np.testing.assert_allclose(left, right, atol=1e-12)


def test_mirror_conjugation_matches_matrix_oracle():
    m = np.diag([-1.0, 1.0, 1.0, 1.0])
    for seed in range(30):
        t = transforms(seed)
        want = m @ t.as_matrix() @ m
        got = mirror_transform(t).as_matrix()
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_mirror_exactness_bitwise():
    # conjugation must be sign-exact: only sign flips, no arithmetic
    t = transforms(99)
    m = mirror_transform(t)
    assert m.quat[0] == t.quat[0] and m.quat[1] == t.quat[1]
    assert m.quat[2] == -t.quat[2] and m.quat[3] == -t.quat[3]
    assert m.trans[0] == -t.trans[0]
    assert m.trans[1] == t.trans[1] and m.trans[2] == t.trans[2]
