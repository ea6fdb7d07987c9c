"""Deterministic stand-in models used by the offline fixture suite."""

from __future__ import annotations

import re
from typing import Sequence

from .gateway import ChatMessage, FunctionBackend
from .metrics import em_at_1


def _steps_observed(messages: Sequence[ChatMessage]) -> int:
    """User turns after the opening one that carry an image, i.e. new observations."""
    users = [m for m in messages if m.role == "user"]
    return sum(1 for m in users[1:] if m.images)


def hidden_object_backend(answer: str, reveal_after: int = 3,
                          decoy: str = "I cannot find it") -> FunctionBackend:
    """A model that only "sees" the target after ``reveal_after`` camera moves.

    It tries to answer at every opportunity (so it explores only when budget
    forcing rejects an answer) and answers correctly iff it has received at
    least ``reveal_after`` new observations. View selection always picks
    frame 0.
    """

    def reply(messages: Sequence[ChatMessage]) -> str:
        system = messages[0].text_content if messages[0].role == "system" else ""
        if "SELECT:" in system:
            return "SELECT: 0"
        seen = _steps_observed(messages)
        last, prev = messages[-1], messages[-2] if len(messages) > 1 else None
        followup = last.role == "user" and not last.images and len(
            [m for m in messages if m.role == "user"]) > 1
        forced = followup and prev is not None and prev.role == "user"
        if followup and not forced:
            return "THINK: I was asked to keep looking.\nACTION: move forward"
        if seen >= reveal_after:
            return f"THINK: now the target is in view.\nANSWER: {answer}"
        return f"THINK: nothing relevant is visible.\nANSWER: {decoy}"

    return FunctionBackend(reply, model_name=f"hidden-object-k{reveal_after}")


_FIELD = re.compile(r"^(Answer|Other acceptable answers|Response):[ \t]*(.*)$", re.MULTILINE)


def rule_judge_backend() -> FunctionBackend:
    """Judge returning 5 when the response matches an acceptable answer after normalization, else 1."""

    def reply(messages: Sequence[ChatMessage]) -> str:
        fields = dict(_FIELD.findall(messages[-1].text_content))
        for m in reversed(messages):
            found = dict(_FIELD.findall(m.text_content))
            if "Response" in found:
                fields = found
                break
        gt = fields.get("Answer", "")
        extras = [e.strip() for e in fields.get("Other acceptable answers", "").split(";")
                  if e.strip() and e.strip() != "(none)"]
        pred = fields.get("Response", "")
        return "5" if em_at_1(pred, gt, extras) else "1"

    return FunctionBackend(reply, model_name="rule-judge")
