"""Versioned prompt templates and the message builders for each agent stage."""

from __future__ import annotations

import hashlib
import io
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

from PIL import Image, ImageDraw

from ..errors import ChainViewError
from ..gateway import ChatMessage, ImagePart, TextPart, TooManyImages
from ..renderer import Observation

if TYPE_CHECKING:
    from ..agent import AgentContext

DEFAULT_VERSION = "v1"
K_MAX = 6
NO_ANSWER = "(no answer)"


class TemplateError(ChainViewError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def placeholders(self) -> list[str]:
        return [f for _, f, _, _ in string.Formatter().parse(self.text) if f]

    def render(self, **bindings) -> str:
        needed = set(self.placeholders)
        missing = needed - bindings.keys()
        if missing:
            raise TemplateError(f"template {self.name!r} missing bindings {sorted(missing)}")
        unused = bindings.keys() - needed
        if unused:
            raise TemplateError(f"template {self.name!r} got unused bindings {sorted(unused)}")
        for k, v in bindings.items():
            if v is None or (isinstance(v, str) and not v.strip()):
                raise TemplateError(f"template {self.name!r}: binding {k!r} is empty")
        return self.text.format(**bindings).rstrip("\n")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


class PromptSet:
    """All templates of one version, loaded from ``prompts/<version>/*.txt``."""

    def __init__(self, templates: dict[str, PromptTemplate], version: str):
        self.templates = templates
        self.version = version

    @classmethod
    def load(cls, version: str = DEFAULT_VERSION, directory=None) -> "PromptSet":
        if directory is not None:
            files = {p.stem: p.read_text(encoding="utf-8") for p in Path(directory).glob("*.txt")}
            version = str(directory)
        else:
            root = resources.files("chainview.prompts").joinpath(version)
            if not root.is_dir():
                raise TemplateError(f"unknown prompt set version {version!r}")
            files = {Path(e.name).stem: e.read_text(encoding="utf-8")
                     for e in root.iterdir() if e.name.endswith(".txt")}
        if not files:
            raise TemplateError(f"no templates found for {version!r}")
        return cls({k: PromptTemplate(k, v) for k, v in files.items()}, version)

    def __getitem__(self, name: str) -> PromptTemplate:
        try:
            return self.templates[name]
        except KeyError:
            raise TemplateError(f"prompt set {self.version!r} has no template {name!r}") from None

    def render(self, name: str, **bindings) -> str:
        return self[name].render(**bindings)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.templates):
            h.update(name.encode() + b"\0" + self.templates[name].text.encode() + b"\0")
        return h.hexdigest()


_DEFAULT: Optional[PromptSet] = None


def default_prompts() -> PromptSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptSet.load()
    return _DEFAULT


def stamped_png(obs: Observation, label: str) -> bytes:
    """PNG of ``obs`` with ``label`` drawn in the top-left corner."""
    key = f"stamp:{label}"
    if key not in obs._encoded:
        with Image.open(io.BytesIO(obs.png_bytes())) as im:
            im = im.convert("RGB")
            draw = ImageDraw.Draw(im)
            box = draw.textbbox((3, 2), label)
            draw.rectangle((0, 0, box[2] + 3, box[3] + 3), fill=(0, 0, 0))
            draw.text((3, 2), label, fill=(255, 255, 0))
            buf = io.BytesIO()
            im.save(buf, format="PNG", optimize=False, compress_level=6)
        obs._encoded[key] = buf.getvalue()
    return obs._encoded[key]


def image_part(obs: Observation, stamp: Optional[str] = None) -> ImagePart:
    return ImagePart(stamped_png(obs, stamp) if stamp else obs.png_bytes(), "image/png")


# --------------------------------------------------------------------------
# baseline and view selection


def render_baseline_prompt(question: str, frames: Sequence[Observation],
                           prompts: Optional[PromptSet] = None) -> list[ChatMessage]:
    prompts = prompts or default_prompts()
    if not frames:
        raise ValueError("baseline prompt needs at least one frame")
    parts: list = []
    for i, obs in enumerate(frames):
        parts.append(TextPart(f"Frame {i}:"))
        parts.append(image_part(obs))
    parts.append(TextPart(prompts.render("baseline_user", question=question)))
    return [
        ChatMessage.text("system", prompts.render("baseline", frame_count=len(frames))),
        ChatMessage("user", parts),
    ]


def render_view_select_prompt(question: str, frames: Sequence[Observation], k_max: int = K_MAX,
                              prompts: Optional[PromptSet] = None, max_images: Optional[int] = None,
                              stamp: bool = True) -> list[ChatMessage]:
    """Selection request: every frame attached and labelled ``Frame <i>``."""
    prompts = prompts or default_prompts()
    if not frames:
        raise ValueError("view selection needs at least one frame")
    if max_images is not None and len(frames) > max_images:
        raise TooManyImages(
            f"{len(frames)} frames exceed the backend limit of {max_images}; subsample first"
        )
    system = prompts.render("view_select", frame_count=len(frames),
                            last_index=len(frames) - 1, k_max=k_max)
    parts: list = []
    for i, obs in enumerate(frames):
        parts.append(TextPart(f"Frame {i}:"))
        parts.append(image_part(obs, f"Frame {i}" if stamp else None))
    parts.append(TextPart(prompts.render("view_select_user", question=question)))
    return [ChatMessage.text("system", system), ChatMessage("user", parts)]


def render_view_select_retry(error: str, frame_count: int,
                             prompts: Optional[PromptSet] = None) -> ChatMessage:
    prompts = prompts or default_prompts()
    return ChatMessage.text(
        "user", prompts.render("view_select_retry", error=error, last_index=frame_count - 1)
    )


# --------------------------------------------------------------------------
# CoV loop


def budget_clause(min_steps: int, max_steps: int, prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    if min_steps > 0:
        return prompts.render("cov_budget_min", min_steps=min_steps, max_steps=max_steps)
    return prompts.render("cov_budget_max", max_steps=max_steps)


def cov_system_text(anchor_count: int, min_steps: int, max_steps: int,
                    prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    anchor_range = "0" if anchor_count == 1 else f"0..{anchor_count - 1}"
    return prompts.render("cov_step", anchor_range=anchor_range,
                          budget_clause=budget_clause(min_steps, max_steps, prompts))


def _initial_parts(context: "AgentContext", prompts: PromptSet) -> list:
    legend = "\n".join(
        f"  View {i}: frame {fid}" for i, fid in enumerate(context.anchor_frame_ids)
    )
    parts: list = [TextPart(prompts.render(
        "cov_context", question=context.question, anchor_count=len(context.anchors),
        anchor_legend=legend,
    ))]
    for i, obs in enumerate(context.anchors):
        parts.append(TextPart(f"View {i}:"))
        parts.append(image_part(obs))
    parts.append(TextPart("Bird's-eye view of the entire scene:"))
    parts.append(image_part(context.birds_eye))
    parts.append(TextPart("You are now at View 0."))
    return parts


def _followup_parts(turn, prompts: PromptSet) -> list:
    if turn.kind == "observation":
        head = prompts.render("cov_observation", step=turn.step, action=turn.action_verb)
        return [TextPart(head), image_part(turn.observation)]
    return [TextPart(turn.text)]


def _evict(messages: list[ChatMessage], cap: int, protected: int) -> tuple[list[ChatMessage], int]:
    """Replace the oldest rendered images by a text stub until at most ``cap`` remain.

    The first ``protected`` images (anchors + bird's-eye) are never evicted.
    """
    total = sum(len(m.images) for m in messages)
    excess = total - cap
    if excess <= 0:
        return messages, 0
    out, seen, evicted = [], 0, 0
    for m in messages:
        parts = []
        for p in m.parts:
            if isinstance(p, ImagePart):
                seen += 1
                if seen > protected and evicted < excess:
                    parts.append(TextPart("[older observation removed to respect the image limit]"))
                    evicted += 1
                    continue
            parts.append(p)
        out.append(ChatMessage(m.role, parts))
    return out, evicted


def render_cov_step_prompt(context: "AgentContext", min_steps: int, max_steps: int,
                           prompts: Optional[PromptSet] = None, framing: str = "interleaved",
                           max_images: Optional[int] = None) -> list[ChatMessage]:
    """Full message list for the next step: C_t plus all exchanged turns.

    ``interleaved`` framing gives one user turn per observation, so the list
    for step t is a prefix of the list for step t+1. ``single-shot`` packs
    everything into a single user message.
    """
    prompts = prompts or default_prompts()
    system = ChatMessage.text(
        "system", cov_system_text(len(context.anchors), min_steps, max_steps, prompts)
    )
    initial = _initial_parts(context, prompts)
    if framing == "interleaved":
        messages = [system, ChatMessage("user", initial)]
        for turn in context.turns:
            messages.append(ChatMessage.text("assistant", turn.reply))
            messages.append(ChatMessage("user", _followup_parts(turn, prompts)))
    elif framing == "single-shot":
        parts = list(initial)
        for turn in context.turns:
            parts.append(TextPart(f"Your previous reply:\n{turn.reply}"))
            parts.extend(_followup_parts(turn, prompts))
        messages = [system, ChatMessage("user", parts)]
    else:
        raise ValueError(f"unknown framing {framing!r}")
    if max_images is not None:
        messages, _ = _evict(messages, max_images, len(context.anchors) + 1)
    return messages


def budget_nudge_text(step_count: int, min_steps: int, prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    return prompts.render("cov_budget_nudge", step_count=step_count, min_steps=min_steps)


def answer_now_text(max_steps: int, prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    return prompts.render("cov_answer_now", max_steps=max_steps)


def parse_retry_text(error: str, span: str, prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    return prompts.render("cov_parse_retry", error=error, span=span or "(empty)")


# --------------------------------------------------------------------------
# judge


def render_judge_prompt(question: str, ground_truth: str, extra_answers: Sequence[str],
                        prediction: str, prompts: Optional[PromptSet] = None,
                        include_extras: bool = True,
                        category: Optional[str] = None) -> list[ChatMessage]:
    prompts = prompts or default_prompts()
    extras = "; ".join(a for a in extra_answers if a.strip()) if include_extras else ""
    user = prompts.render(
        "judge_user",
        question=question,
        ground_truth=ground_truth.strip() or NO_ANSWER,
        extra_answers=extras or "(none)",
        prediction=prediction.strip() or NO_ANSWER,
    )
    if category and category.strip():
        user = prompts.render("judge_category", category=category.strip()) + "\n" + user
    return [ChatMessage.text("system", prompts.render("judge")), ChatMessage.text("user", user)]


def judge_retry_text(prompts: Optional[PromptSet] = None) -> str:
    prompts = prompts or default_prompts()
    return prompts.render("judge_retry")
