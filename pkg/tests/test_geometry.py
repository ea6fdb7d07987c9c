import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainview.geometry import (
    ALL_MOTIONS, Answer, AnswerNotAMotion, CameraPose, Intrinsics, InvalidAnchor, InvalidPose,
    Motion, MotionConfig, SwitchTo, apply_action, compose, inverse, inverse_action, look_at,
    project, unproject,
)
from chainview.scene_io import ScenePointCloud

from oracles import inv4, mat4, matmul4, project_h, rot_axis_angle


def random_pose(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = rot_axis_angle(axis, rng.uniform(-math.pi, math.pi))
    return CameraPose(np.array(rot), rng.uniform(-5, 5, size=3))


poses = st.builds(
    lambda seed: random_pose(np.random.default_rng(seed)),
    st.integers(min_value=0, max_value=2**32 - 1),
)


def test_identity_compose_is_noop():
    p = random_pose(np.random.default_rng(1))
    assert compose(CameraPose.identity(), p).allclose(p, 1e-12)


def test_compose_matches_matrix_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        expect = matmul4(mat4(a.rotation, a.translation), mat4(b.rotation, b.translation))
        np.testing.assert_allclose(compose(a, b).matrix(), np.array(expect), atol=1e-9)


def test_inverse_matches_matrix_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = random_pose(rng)
        expect = inv4(mat4(p.rotation, p.translation))
        np.testing.assert_allclose(inverse(p).matrix(), np.array(expect), atol=1e-9)


def test_inverse_simple_cases():
    assert inverse(CameraPose.identity()).allclose(CameraPose.identity(), 0)
    t = CameraPose(np.eye(3), np.array([1.0, -2.0, 3.5]))
    np.testing.assert_array_equal(inverse(t).translation, [-1.0, 2.0, -3.5])


@settings(max_examples=200, deadline=None)
@given(poses)
def test_compose_with_inverse_is_identity(p):
    assert compose(p, inverse(p)).allclose(CameraPose.identity(), 1e-9)


@settings(max_examples=200, deadline=None)
@given(poses, st.sampled_from(ALL_MOTIONS))
def test_every_motion_has_inverse(p, motion):
    cfg = MotionConfig()
    back = apply_action(apply_action(p, motion, cfg), inverse_action(motion), cfg)
    assert back.allclose(p, 1e-9)


def test_move_forward_from_origin_matches_oracle():
    # world origin looking along +z: camera-to-world rotation is the identity
    p = CameraPose.identity()
    new = apply_action(p, Motion.MOVE_FORWARD, MotionConfig(step_m=0.3))
    delta = mat4(np.eye(3), (0, 0, 0.3))
    expect = matmul4(mat4(np.eye(3), (0, 0, 0)), delta)
    np.testing.assert_allclose(new.matrix(), np.array(expect), atol=1e-12)
    np.testing.assert_allclose(new.center, [0.0, 0.0, 0.3], atol=1e-12)


def test_translation_directions_are_camera_local():
    p = look_at((0, 0, 1), (1, 0, 1))  # looking along world +x, z up
    cfg = MotionConfig(step_m=1.0)
    np.testing.assert_allclose(apply_action(p, Motion.MOVE_FORWARD, cfg).center, [1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(apply_action(p, Motion.MOVE_RIGHT, cfg).center, [0, -1, 1], atol=1e-12)
    np.testing.assert_allclose(apply_action(p, Motion.MOVE_UP, cfg).center, [0, 0, 2], atol=1e-12)


def test_rotation_senses():
    p = look_at((0, 0, 1), (1, 0, 1))
    cfg = MotionConfig(yaw_deg=90, pitch_deg=90)
    # yaw left turns the view toward world +y (left of +x with z up)
    np.testing.assert_allclose(apply_action(p, Motion.YAW_LEFT, cfg).forward, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(apply_action(p, Motion.YAW_RIGHT, cfg).forward, [0, -1, 0], atol=1e-12)
    np.testing.assert_allclose(apply_action(p, Motion.PITCH_UP, cfg).forward, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(apply_action(p, Motion.PITCH_DOWN, cfg).forward, [0, 0, -1], atol=1e-12)
    # rolling leaves the viewing direction alone
    np.testing.assert_allclose(apply_action(p, Motion.ROLL_CW, cfg).forward, [1, 0, 0], atol=1e-12)


def test_full_yaw_turn_returns_to_start():
    p = random_pose(np.random.default_rng(3))
    cfg = MotionConfig(yaw_deg=30)
    q = p
    for _ in range(12):
        q = apply_action(q, Motion.YAW_LEFT, cfg)
    np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-6)


def test_switch_to_returns_anchor_exactly():
    rng = np.random.default_rng(4)
    anchors = [random_pose(rng) for _ in range(3)]
    out = apply_action(random_pose(rng), SwitchTo(2), MotionConfig(), None, anchors)
    assert out is anchors[2] or out == anchors[2]
    with pytest.raises(InvalidAnchor):
        apply_action(anchors[0], SwitchTo(3), MotionConfig(), None, anchors)


def test_answer_is_not_a_motion():
    with pytest.raises(AnswerNotAMotion):
        apply_action(CameraPose.identity(), Answer("red"))


def test_clamping_is_idempotent():
    scene = ScenePointCloud(np.array([[-1.0, -1, -1], [1, 1, 1]]), np.zeros((2, 3)))
    cfg = MotionConfig(step_m=0.4, clamp_margin_m=0.5)
    p = CameraPose.identity()
    for _ in range(10):
        p = apply_action(p, Motion.MOVE_FORWARD, cfg, scene)
        assert p.center[2] <= 1.5 + 1e-12
    assert p.center[2] == pytest.approx(1.5)
    again = apply_action(p, Motion.MOVE_FORWARD, cfg, scene)
    assert again.center[2] == pytest.approx(1.5)


def test_world_vertical_switch():
    p = look_at((0, 0, 1), (1, 0, 0))  # pitched down
    cfg = MotionConfig(step_m=0.5, vertical="world")
    np.testing.assert_allclose(apply_action(p, Motion.MOVE_UP, cfg).center, [0, 0, 1.5], atol=1e-12)
    local = apply_action(p, Motion.MOVE_UP, MotionConfig(step_m=0.5)).center
    assert abs(local[0]) > 0.1


def test_rotation_drift_over_long_chains():
    rng = np.random.default_rng(11)
    cfg = MotionConfig(yaw_deg=17, pitch_deg=23, roll_deg=29)
    p = CameraPose.identity()
    for i in rng.integers(0, len(ALL_MOTIONS), size=10_000):
        p = apply_action(p, ALL_MOTIONS[i], cfg)
    assert abs(np.linalg.det(p.rotation) - 1) < 1e-9
    np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-9)


def test_project_principal_ray_and_behind():
    k = Intrinsics.from_fov(640, 480, 60)
    p = random_pose(np.random.default_rng(5))
    u, v, d = project(p.center + p.forward * 2.5, p, k)
    assert (u, v) == pytest.approx((k.cx, k.cy), abs=1e-9)
    assert d == pytest.approx(2.5)
    assert project(p.center - p.forward, p, k) is None
    assert project(p.center, p, k) is None


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(6)
    k = Intrinsics.from_fov(640, 480, 70)
    hits = 0
    for _ in range(200):
        p = random_pose(rng)
        pt = p.center + p.rotation @ np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 4)])
        got = project(pt, p, k)
        u, v, d = project_h(pt, mat4(p.rotation, p.translation), k.fx, k.fy, k.cx, k.cy)
        if 0 <= u < k.width and 0 <= v < k.height:
            hits += 1
            assert got is not None
            assert abs(got[0] - u) < 0.5 and abs(got[1] - v) < 0.5
            assert got[2] == pytest.approx(d, abs=1e-9)
        else:
            assert got is None
    assert hits > 50


def test_unproject_roundtrip():
    rng = np.random.default_rng(9)
    k = Intrinsics.from_fov(320, 240, 60)
    for _ in range(100):
        p = random_pose(rng)
        u, v, d = rng.uniform(0, 320), rng.uniform(0, 240), rng.uniform(0.1, 10)
        x = unproject(u, v, d, p, k)
        got = project(x, p, k)
        assert got is not None
        np.testing.assert_allclose(unproject(*got, p, k), x, atol=1e-6)


def test_invalid_pose_and_intrinsics():
    with pytest.raises(InvalidPose):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidPose):
        CameraPose(np.eye(3), np.array([0.0, np.nan, 0.0]))
    with pytest.raises(ValueError):
        Intrinsics(-1, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 10, 0, 10, 10)


def test_pose_serializes_row_major():
    p = CameraPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert p.to_list() == [1, 0, 0, 1, 0, 1, 0, 2, 0, 0, 1, 3, 0, 0, 0, 1]
    assert CameraPose.from_matrix(np.array(p.to_list()).reshape(4, 4)) == p


def test_motion_verbs_unique():
    verbs = [m.verb for m in Motion]
    assert len(set(verbs)) == 12
    assert all(m.inverse.inverse is m for m in Motion)
