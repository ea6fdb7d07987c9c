import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainview.agent import (
    AgentSettings, LoopBudget, frame_observation, Termination, run_baseline, run_cov, run_cov_loop, run_episode,
    run_no_selection, replay_trajectory,
)
from chainview.fixtures import cube_cloud, orbit_poses
from chainview.gateway import ScriptedBackend, TransportFailure
from chainview.geometry import CameraPose, Intrinsics, MotionConfig
from chainview.prompts import budget_nudge_text
from chainview.renderer import Observation, Provenance, RenderSettings
from chainview.scene_io import Episode, FrameRecord

from oracles import mat4, matmul4, rot_axis_angle

K = Intrinsics.from_fov(48, 36, 60.0)
FAST = AgentSettings(render=RenderSettings(splat_radius_px=0, birds_eye_resolution=48), ratio=1)
SCENE = cube_cloud(9)


def episode(n=12, tmp=Path("/nonexistent")):
    frames = tuple(FrameRecord(i, tmp / f"{i}.png", p, K)
                   for i, p in enumerate(orbit_poses((0, 0), 2.0, 1.0, n, target_height=0.0)))
    return Episode("ep", tmp / "scene.ply", frames, "What color is the cube?", "red")


def with_budget(min_steps=0, max_steps=12, **kw):
    return AgentSettings(**{**FAST.__dict__, "budget": LoopBudget(min_steps, max_steps), **kw})


def cov_entries(result):
    return [e for e in result.transcripts if e["stage"] == "cov"]


def test_scripted_chain_and_pose_oracle():
    backend = ScriptedBackend(["SELECT: 2, 5", "ACTION: move forward", "ACTION: yaw left",
                               "ANSWER: a red chair"])
    ep = episode()
    # a wide margin keeps scene clamping out of the oracle comparison
    cfg = MotionConfig(clamp_margin_m=10.0)
    r = run_cov(ep, backend, with_budget(motion=cfg), SCENE)
    assert r.selected_anchor_ids == [2, 5]
    assert r.step_count == 2 and r.termination is Termination.ANSWERED
    assert r.answer == "a red chair"
    # oracle: start at anchor 2, post-multiply a forward step then a yaw about camera -y
    start = ep.frames[2].pose
    m0 = mat4(start.rotation, start.translation)
    m1 = matmul4(m0, mat4(np.eye(3), (0, 0, cfg.step_m)))
    m2 = matmul4(m1, mat4(rot_axis_angle((0, -1, 0), math.radians(cfg.yaw_deg)), (0, 0, 0)))
    for (_, pose), expect in zip(r.trajectory, [m1, m2]):
        np.testing.assert_allclose(pose.matrix(), np.array(expect), atol=1e-9)
    assert r.request_count == 4


def test_immediate_answer():
    r = run_cov(episode(), ScriptedBackend(["SELECT: 0", "ANSWER: red"]), FAST, SCENE)
    assert r.step_count == 0 and r.termination is Termination.ANSWERED
    assert r.trajectory == []


def test_budget_nudge_once():
    backend = ScriptedBackend(["SELECT: 0", "ANSWER: red", "ACTION: move forward",
                               "ACTION: yaw left", "ACTION: move left", "ANSWER: red"])
    r = run_cov(episode(), backend, with_budget(3), SCENE)
    assert r.step_count == 3 and r.termination is Termination.ANSWERED
    assert r.flags["nudges"] == 1 and r.flags["discarded_answers"] == ["red"]
    nudge = budget_nudge_text(0, 3)
    assert json.dumps(r.transcripts).count(json.dumps(nudge)[1:-1]) == 1


def test_parse_failures_force_answer():
    backend = ScriptedBackend(["SELECT: 0", "hmm", "still thinking", "ANSWER: red"])
    r = run_cov(episode(), backend, FAST, SCENE)
    assert r.termination is Termination.PARSE_FORCED and r.answer == "red"
    assert r.flags["parse_failures"] == 2
    assert cov_entries(r)[-1]["note"] == "parse_forced"


def test_step_cap_forces_answer():
    backend = ScriptedBackend(["SELECT: 0", "ACTION: move forward", "ACTION: move forward",
                               "ANSWER: red"])
    r = run_cov(episode(), backend, with_budget(0, 2), SCENE)
    assert r.termination is Termination.STEP_CAP_FORCED
    assert r.step_count == 2 and r.answer == "red"
    assert cov_entries(r)[-1]["note"] == "step_cap"


def test_switch_to_lands_on_anchor():
    backend = ScriptedBackend(["SELECT: 4, 7", "ACTION: move up", "ACTION: switch to view 1",
                               "ANSWER: red"])
    ep = episode()
    r = run_cov(ep, backend, FAST, SCENE)
    assert r.trajectory[1][1] == ep.frames[7].pose
    # the anchor's own image is reused instead of a fresh render
    assert r.observations[1].label == "frame 7"
    anchor = frame_observation(ep.frames[7], SCENE, FAST.render)
    assert np.array_equal(r.observations[1].image, anchor.image)


def test_selection_fallback():
    r = run_cov(episode(), ScriptedBackend(["no idea", "none of them", "ANSWER: red"]),
                with_budget(k_max=3), SCENE)
    assert r.selected_anchor_ids == [0, 1, 2]
    assert r.flags["fallback_selection"] is True


def test_selection_indices_follow_subsampling():
    ep = episode(120)
    s = AgentSettings(**{**FAST.__dict__, "ratio": 10})
    r = run_episode(ep, ScriptedBackend(["SELECT: 2, 5", "ANSWER: red"]), "cov", s, SCENE)
    assert r.selected_anchor_ids == [2, 5]
    assert r.anchor_frame_ids == [20, 50]
    assert r.start_pose == ep.frames[20].pose


def test_baseline_sends_every_frame():
    backend = ScriptedBackend(["chair"])
    r = run_baseline(episode(), backend, FAST, SCENE)
    assert r.answer == "chair" and r.step_count == 0 and r.request_count == 1
    images = [p for m in backend.requests[0] for p in m.parts if hasattr(p, "data")]
    assert len(images) == 12


def test_no_selection_matches_full_selection_loop():
    script = ["ACTION: move forward", "ACTION: switch to view 3", "ANSWER: red"]
    ns = run_no_selection(episode(), ScriptedBackend(script), with_budget(k_max=12), SCENE)
    full = run_cov(episode(), ScriptedBackend(["SELECT: " + ", ".join(map(str, range(12)))] + script),
                   with_budget(k_max=12), SCENE)
    assert len(ns.anchor_poses) == 12
    assert all(e["stage"] != "view_select" for e in ns.transcripts)
    strip = [{k: v for k, v in e.items() if k != "index"} for e in cov_entries(ns)]
    assert strip == [{k: v for k, v in e.items() if k != "index"} for e in cov_entries(full)]
    assert ns.to_json()["trajectory"] == full.to_json()["trajectory"]


def test_determinism():
    script = ["SELECT: 1, 3", "ACTION: move forward", "ACTION: pitch down", "ANSWER: red"]
    a = run_episode(episode(), ScriptedBackend(script), "cov", FAST, SCENE)
    b = run_episode(episode(), ScriptedBackend(script), "cov", FAST, SCENE)
    assert a.to_json() == b.to_json()
    assert a.transcripts == b.transcripts


def test_backend_failure_becomes_failed_result():
    class Broken:
        model_name = "broken"

        def complete(self, messages):
            raise TransportFailure("connection reset")

    r = run_episode(episode(), Broken(), "cov", FAST, SCENE)
    assert r.termination is Termination.FAILED and r.failed
    assert "TransportFailure" in r.error


def anchors(n):
    poses = orbit_poses((0, 0), 2.0, 1.0, n, target_height=0.0)
    img = np.zeros((36, 48, 3))
    return [Observation(img, p, 0, Provenance.ANCHOR_FRAME) for p in poses]


replies = st.lists(st.one_of(
    st.sampled_from(["ACTION: move forward", "ACTION: yaw left", "ACTION: roll clockwise",
                     "ACTION: move down", "ACTION: switch to view 1", "ANSWER: red", "gibberish"])),
    min_size=0, max_size=30)


@settings(max_examples=60, deadline=None)
@given(replies, st.integers(0, 5), st.integers(1, 7))
def test_budget_law_and_pose_replay(script, min_steps, extra):
    budget = LoopBudget(min_steps, max(1, min_steps) + extra - 1)
    s = AgentSettings(**{**FAST.__dict__, "budget": budget})
    script = script + ["ANSWER: red"] * (budget.max_steps * 3 + 4)
    anc = anchors(2)
    r = run_cov_loop(episode(), anc, ScriptedBackend(script), s)
    if r.termination is Termination.ANSWERED:
        assert r.step_count >= min_steps
    assert r.step_count <= budget.max_steps
    poses = replay_trajectory(r.start_pose, [a for a, _ in r.trajectory], r.anchor_poses, s.motion)
    for got, (_, logged) in zip(poses, r.trajectory):
        assert got.allclose(logged, 1e-9)


def test_loop_needs_anchors():
    with pytest.raises(ValueError):
        run_cov_loop(episode(), [], ScriptedBackend([]), FAST)


def test_budget_validation():
    with pytest.raises(ValueError):
        LoopBudget(-1)
    with pytest.raises(ValueError):
        LoopBudget(5, 3)
    assert CameraPose.identity() == CameraPose.identity()
