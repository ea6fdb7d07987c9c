"""Coarse-to-fine episode runner: view selection, then the action-observation loop."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import ChainViewError
from .gateway import Backend, BackendFailure, ChatMessage, count_images, message_to_log
from .geometry import (
    Action, CameraPose, DEFAULT_INTRINSICS, MotionConfig, SwitchTo, apply_action,
)
from .prompts import (
    K_MAX, PromptSet, answer_now_text, budget_nudge_text, default_prompts, parse_retry_text,
    render_baseline_prompt, render_cov_step_prompt, render_view_select_prompt,
    render_view_select_retry,
)
from .protocol import (
    Final, ProtocolError, parse_selection, parse_step,
)
from .renderer import (
    Observation, Provenance, RenderSettings, render_birds_eye, render_view,
)
from .scene_io import Episode, FrameRecord, ScenePointCloud, subsample_frames

log = logging.getLogger(__name__)


class EpisodeFailure(ChainViewError):
    def __init__(self, episode_id: str, cause: Exception):
        super().__init__(f"episode {episode_id}: {type(cause).__name__}: {cause}")
        self.episode_id = episode_id
        self.cause = cause


class ContextViolation(ChainViewError):
    pass


class Termination(str, Enum):
    ANSWERED = "Answered"
    STEP_CAP_FORCED = "StepCapForced"
    PARSE_FORCED = "ParseForced"
    FAILED = "Failed"


@dataclass(frozen=True)
class LoopBudget:
    min_steps: int = 0
    max_steps: int = 12
    max_parse_retries: int = 1
    # premature answers tolerated before the loop gives up on budget forcing
    max_nudges: Optional[int] = None

    def __post_init__(self):
        if self.min_steps < 0:
            raise ValueError("min_steps must be >= 0")
        if self.max_steps < max(1, self.min_steps):
            raise ValueError("max_steps must be >= max(1, min_steps)")
        if self.max_parse_retries < 0:
            raise ValueError("max_parse_retries must be >= 0")

    @property
    def nudge_limit(self) -> int:
        return self.max_steps if self.max_nudges is None else self.max_nudges


@dataclass(frozen=True)
class AgentSettings:
    budget: LoopBudget = LoopBudget()
    motion: MotionConfig = MotionConfig()
    render: RenderSettings = RenderSettings()
    k_max: int = K_MAX
    ratio: int = 10
    framing: str = "interleaved"
    max_images: Optional[int] = None
    selection_lenient: bool = False
    rerender_anchors: bool = False
    stamp_frames: bool = True
    prompts: Optional[PromptSet] = None

    @property
    def prompt_set(self) -> PromptSet:
        return self.prompts or default_prompts()


@dataclass(frozen=True)
class Turn:
    """One assistant reply plus the user turn that answered it."""

    reply: str
    kind: str  # observation | nudge | retry | answer_now
    text: str = ""
    step: int = 0
    action_verb: str = ""
    observation: Optional[Observation] = None


@dataclass
class AgentContext:
    question: str
    anchors: list
    anchor_frame_ids: list
    birds_eye: Observation
    current_pose: CameraPose
    steps: list = field(default_factory=list)  # [(StepDecision, Observation)]
    turns: list = field(default_factory=list)
    active_anchor: int = 0

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def check(self) -> None:
        last = self.steps[-1][1].pose if self.steps else None
        expected = last if last is not None else self.anchors[self.active_anchor].pose
        if self.current_pose != expected:
            raise ContextViolation("current pose does not match the latest observation")


@dataclass
class EpisodeResult:
    episode_id: str
    mode: str
    answer: str
    termination: Termination
    step_count: int = 0
    trajectory: list = field(default_factory=list)  # [(Action, CameraPose)]
    start_pose: Optional[CameraPose] = None
    anchor_poses: list = field(default_factory=list)
    selected_anchor_ids: list = field(default_factory=list)
    anchor_frame_ids: list = field(default_factory=list)
    transcripts: list = field(default_factory=list)
    wall_time_s: float = 0.0
    request_count: int = 0
    flags: dict = field(default_factory=dict)
    error: Optional[str] = None
    observations: list = field(default_factory=list, repr=False)  # one per step
    birds_eye: Optional[Observation] = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.termination is Termination.FAILED

    def to_json(self) -> dict:
        """Deterministic record (no wall-clock fields)."""
        return {
            "episode_id": self.episode_id,
            "mode": self.mode,
            "answer": self.answer,
            "termination": self.termination.value,
            "step_count": self.step_count,
            "selected_anchor_ids": list(self.selected_anchor_ids),
            "anchor_frame_ids": list(self.anchor_frame_ids),
            "start_pose": self.start_pose.to_list() if self.start_pose is not None else None,
            "anchor_poses": [p.to_list() for p in self.anchor_poses],
            "trajectory": [{"action": a.verb, "pose": p.to_list()} for a, p in self.trajectory],
            "request_count": self.request_count,
            "flags": self.flags,
            "error": self.error,
        }


class Transcript:
    """Append-only request log; each entry keeps only messages new since the previous call."""

    def __init__(self, sink: Optional[Callable[[dict], None]] = None):
        self.entries: list[dict] = []
        self._sink = sink
        self._last: dict[str, list] = {}

    def record(self, stage: str, messages: Sequence[ChatMessage], response: str,
               note: Optional[str] = None) -> dict:
        prev = self._last.get(stage, [])
        if prev and list(messages[: len(prev)]) == prev:
            new, reset = list(messages[len(prev):]), False
        else:
            new, reset = list(messages), True
        entry = {
            "index": len(self.entries),
            "stage": stage,
            "reset": reset,
            "messages": [message_to_log(m) for m in new],
            "response": response,
        }
        if note:
            entry["note"] = note
        self._last[stage] = list(messages) + [ChatMessage.text("assistant", response)]
        self.entries.append(entry)
        if self._sink is not None:
            self._sink(entry)
        return entry


def _call(backend: Backend, messages, stage: str, transcript: Transcript, counter: list,
          note: Optional[str] = None) -> str:
    counter[0] += 1
    reply = backend.complete(messages)
    transcript.record(stage, messages, reply, note)
    return reply


def subsampled(episode: Episode, ratio: int) -> Episode:
    if ratio < 1:
        raise ValueError("subsample ratio must be >= 1")
    return dataclasses.replace(episode, frames=tuple(subsample_frames(episode.frames, ratio)))


def frame_observation(frame: FrameRecord, scene: Optional[ScenePointCloud] = None,
                      render: RenderSettings = RenderSettings(), rerender: bool = False) -> Observation:
    """The anchor photograph for ``frame``; re-rendered on request or when the file is absent."""
    label = f"frame {frame.frame_id}"
    if not rerender and Path(frame.image_path).is_file():
        return Observation.from_file(frame.image_path, frame.pose, 0, Provenance.ANCHOR_FRAME, label)
    if scene is None:
        raise FileNotFoundError(f"missing frame image {frame.image_path}")
    obs = render_view(scene, frame.pose, frame.intrinsics, render)
    obs.label = label
    return obs


# --------------------------------------------------------------------------
# coarse stage


@dataclass
class Selection:
    indices: list
    anchors: list
    fallback: bool = False
    lenient: bool = False
    failures: int = 0


def select_views(episode: Episode, backend: Backend, k_max: int = K_MAX,
                 settings: AgentSettings = AgentSettings(), scene: Optional[ScenePointCloud] = None,
                 transcript: Optional[Transcript] = None, counter: Optional[list] = None,
                 frames: Optional[Sequence[Observation]] = None) -> Selection:
    """Ask the model for question-relevant frames.

    Indices refer to the episode's (already subsampled) frame list. After one
    corrective retry, an unreadable reply falls back to the first ``k_max``
    frames.
    """
    transcript = transcript or Transcript()
    counter = counter if counter is not None else [0]
    prompts = settings.prompt_set
    if frames is None:
        frames = [frame_observation(f, scene, settings.render, settings.rerender_anchors)
                  for f in episode.frames]
    messages = render_view_select_prompt(episode.question, frames, k_max, prompts,
                                         stamp=settings.stamp_frames)
    failures = 0
    decision = None
    for attempt in range(2):
        reply = _call(backend, messages, "view_select", transcript, counter)
        try:
            decision = parse_selection(reply, len(frames), k_max, lenient=settings.selection_lenient)
            break
        except ProtocolError as exc:
            failures += 1
            log.info("selection parse failure (%s): %s", episode.episode_id, exc)
            messages = list(messages) + [
                ChatMessage.text("assistant", reply),
                render_view_select_retry(str(exc), len(frames), prompts),
            ]
    if decision is None:
        log.warning("FallbackSelection for %s", episode.episode_id)
        indices = list(range(min(k_max, len(frames))))
        return Selection(indices, [frames[i] for i in indices], fallback=True, failures=failures)
    indices = list(decision.indices)
    return Selection(indices, [frames[i] for i in indices], lenient=decision.lenient,
                     failures=failures)


# --------------------------------------------------------------------------
# fine stage


def _forced_answer(reply: str, anchor_count: int) -> str:
    try:
        d = parse_step(reply, anchor_count)
        if isinstance(d.decision, Final):
            return d.decision.answer
    except ProtocolError:
        pass
    marker = reply.upper().rfind("ANSWER:")
    if marker >= 0:
        return reply[marker + len("ANSWER:"):].strip()
    return ""


def run_cov_loop(episode: Episode, anchors: Sequence[Observation], backend: Backend,
                 settings: AgentSettings = AgentSettings(),
                 scene: Optional[ScenePointCloud] = None,
                 anchor_frame_ids: Optional[Sequence[int]] = None,
                 anchor_intrinsics: Optional[Sequence] = None,
                 transcript: Optional[Transcript] = None,
                 counter: Optional[list] = None) -> EpisodeResult:
    """Iterate think -> act -> observe until the model answers or the budget ends."""
    if not anchors:
        raise ValueError("the CoV loop needs at least one anchor view")
    bounds = scene  # None disables clamping
    scene = scene if scene is not None else ScenePointCloud.empty()
    transcript = transcript or Transcript()
    counter = counter if counter is not None else [0]
    budget, prompts = settings.budget, settings.prompt_set
    anchor_frame_ids = list(anchor_frame_ids if anchor_frame_ids is not None
                            else range(len(anchors)))
    anchor_intrinsics = list(anchor_intrinsics or [DEFAULT_INTRINSICS] * len(anchors))
    anchor_poses = [a.pose for a in anchors]

    ctx = AgentContext(
        question=episode.question,
        anchors=list(anchors),
        anchor_frame_ids=anchor_frame_ids,
        birds_eye=render_birds_eye(scene, settings.render.birds_eye_resolution, settings.render),
        current_pose=anchor_poses[0],
    )
    trajectory: list = []
    flags = {"parse_failures": 0, "nudges": 0, "discarded_answers": [], "evictions": 0}
    retries_here = 0
    prev_messages: Optional[list] = None
    answer, termination = "", None

    def prompt() -> list:
        nonlocal prev_messages
        msgs = render_cov_step_prompt(ctx, budget.min_steps, budget.max_steps, prompts,
                                      settings.framing, settings.max_images)
        if settings.max_images is not None:
            total = count_images(render_cov_step_prompt(ctx, budget.min_steps, budget.max_steps,
                                                        prompts, settings.framing, None))
            flags["evictions"] = max(flags["evictions"], total - settings.max_images)
        if (settings.framing == "interleaved" and not flags["evictions"]
                and prev_messages is not None and msgs[: len(prev_messages)] != prev_messages):
            raise ContextViolation("context is no longer a prefix of its successor")
        ctx.check()
        prev_messages = msgs
        return msgs

    while termination is None:
        messages = prompt()
        reply = _call(backend, messages, "cov", transcript, counter)
        try:
            decision = parse_step(reply, len(anchors))
        except ProtocolError as exc:
            flags["parse_failures"] += 1
            retries_here += 1
            if retries_here > budget.max_parse_retries:
                ctx.turns.append(Turn(reply, "answer_now", answer_now_text(budget.max_steps, prompts)))
                forced = _call(backend, prompt(), "cov", transcript, counter, note="parse_forced")
                answer, termination = _forced_answer(forced, len(anchors)), Termination.PARSE_FORCED
                break
            ctx.turns.append(Turn(reply, "retry", parse_retry_text(str(exc), exc.span, prompts)))
            continue

        if isinstance(decision.decision, Final):
            if ctx.step_count < budget.min_steps:
                if flags["nudges"] < budget.nudge_limit:
                    flags["nudges"] += 1
                    flags["discarded_answers"].append(decision.decision.answer)
                    ctx.turns.append(Turn(reply, "nudge",
                                          budget_nudge_text(ctx.step_count, budget.min_steps, prompts)))
                    continue
                # the model refuses to explore; keep its answer but do not call it Answered
                answer, termination = decision.decision.answer, Termination.STEP_CAP_FORCED
                break
            answer, termination = decision.decision.answer, Termination.ANSWERED
            break

        retries_here = 0
        action = decision.decision.action
        new_pose = apply_action(ctx.current_pose, action, settings.motion, bounds, anchor_poses)
        step = ctx.step_count + 1
        if isinstance(action, SwitchTo):
            ctx.active_anchor = action.anchor_index
        if isinstance(action, SwitchTo) and not settings.rerender_anchors:
            src = anchors[action.anchor_index]
            obs = Observation(src.image, new_pose, step, src.provenance, src.label, dict(src._encoded))
        else:
            obs = render_view(scene, new_pose, anchor_intrinsics[ctx.active_anchor],
                              settings.render, step_index=step)
        ctx.steps.append((decision, obs))
        ctx.current_pose = new_pose
        trajectory.append((action, new_pose))
        ctx.turns.append(Turn(reply, "observation", step=step, action_verb=action.verb,
                              observation=obs))
        if ctx.step_count >= budget.max_steps:
            final_msgs = prompt() + [ChatMessage.text("user", answer_now_text(budget.max_steps, prompts))]
            forced = _call(backend, final_msgs, "cov", transcript, counter, note="step_cap")
            answer, termination = _forced_answer(forced, len(anchors)), Termination.STEP_CAP_FORCED

    return EpisodeResult(
        episode_id=episode.episode_id,
        mode="cov",
        answer=answer,
        termination=termination,
        step_count=ctx.step_count,
        trajectory=trajectory,
        start_pose=anchor_poses[0],
        anchor_poses=anchor_poses,
        anchor_frame_ids=anchor_frame_ids,
        transcripts=transcript.entries,
        request_count=counter[0],
        flags=flags,
        observations=[obs for _, obs in ctx.steps],
        birds_eye=ctx.birds_eye,
    )


def run_baseline(episode: Episode, backend: Backend, settings: AgentSettings = AgentSettings(),
                 scene: Optional[ScenePointCloud] = None,
                 transcript: Optional[Transcript] = None) -> EpisodeResult:
    """Single pass over all (subsampled) frames, no camera control."""
    transcript = transcript or Transcript()
    counter = [0]
    frames = [frame_observation(f, scene, settings.render, settings.rerender_anchors)
              for f in episode.frames]
    messages = render_baseline_prompt(episode.question, frames, settings.prompt_set)
    reply = _call(backend, messages, "baseline", transcript, counter)
    answer = _forced_answer(reply, 1) or reply.strip()
    return EpisodeResult(
        episode_id=episode.episode_id, mode="baseline", answer=answer,
        termination=Termination.ANSWERED, transcripts=transcript.entries,
        request_count=counter[0], anchor_frame_ids=[f.frame_id for f in episode.frames],
    )


def run_cov(episode: Episode, backend: Backend, settings: AgentSettings = AgentSettings(),
            scene: Optional[ScenePointCloud] = None,
            transcript: Optional[Transcript] = None) -> EpisodeResult:
    """Both stages: select anchors, then explore from the first one."""
    transcript = transcript or Transcript()
    counter = [0]
    frames = [frame_observation(f, scene, settings.render, settings.rerender_anchors)
              for f in episode.frames]
    sel = select_views(episode, backend, settings.k_max, settings, scene, transcript, counter,
                       frames=frames)
    chosen = [episode.frames[i] for i in sel.indices]
    result = run_cov_loop(
        episode, sel.anchors, backend, settings, scene,
        anchor_frame_ids=[f.frame_id for f in chosen],
        anchor_intrinsics=[f.intrinsics for f in chosen],
        transcript=transcript, counter=counter,
    )
    result.selected_anchor_ids = list(sel.indices)
    result.flags["fallback_selection"] = sel.fallback
    result.flags["selection_lenient"] = sel.lenient
    result.flags["selection_failures"] = sel.failures
    return result


def run_no_selection(episode: Episode, backend: Backend, settings: AgentSettings = AgentSettings(),
                     scene: Optional[ScenePointCloud] = None,
                     transcript: Optional[Transcript] = None) -> EpisodeResult:
    """Ablation: skip the coarse stage, every subsampled frame is an anchor."""
    anchors = [frame_observation(f, scene, settings.render, settings.rerender_anchors)
               for f in episode.frames]
    result = run_cov_loop(
        episode, anchors, backend, settings, scene,
        anchor_frame_ids=[f.frame_id for f in episode.frames],
        anchor_intrinsics=[f.intrinsics for f in episode.frames],
        transcript=transcript,
    )
    result.mode = "no-selection"
    result.selected_anchor_ids = list(range(len(anchors)))
    return result


MODES = {
    "baseline": run_baseline,
    "cov": run_cov,
    "no-selection": run_no_selection,
}


def run_episode(episode: Episode, backend: Backend, mode: str = "cov",
                settings: AgentSettings = AgentSettings(),
                scene: Optional[ScenePointCloud] = None,
                transcript: Optional[Transcript] = None) -> EpisodeResult:
    """Subsample, run ``mode``; backend failures become a failed result instead of raising."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    transcript = transcript or Transcript()
    ep = subsampled(episode, settings.ratio)
    t0 = time.perf_counter()
    try:
        result = MODES[mode](ep, backend, settings, scene, transcript)
    except BackendFailure as exc:
        log.error("episode %s failed: %s", episode.episode_id, exc)
        result = EpisodeResult(
            episode_id=episode.episode_id, mode=mode, answer="",
            termination=Termination.FAILED, transcripts=transcript.entries,
            request_count=len(transcript.entries),
            error=f"{type(exc).__name__}: {exc}",
        )
    result.mode = mode
    result.wall_time_s = time.perf_counter() - t0
    return result


def replay_trajectory(start: CameraPose, actions: Sequence[Action], anchors: Sequence[CameraPose],
                      motion: MotionConfig = MotionConfig(),
                      scene: Optional[ScenePointCloud] = None) -> list[CameraPose]:
    poses, pose = [], start
    for a in actions:
        pose = apply_action(pose, a, motion, scene, anchors)
        poses.append(pose)
    return poses
