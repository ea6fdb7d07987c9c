"""Parsing model replies into view selections, camera actions and scores.

Reply grammar (line oriented, case-insensitive markers)::

    THINK: free text, may continue on following lines
    ACTION: <verb>            or    ANSWER: <text>

Selections use a ``SELECT: i, j, ...`` line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .errors import ChainViewError
from .geometry import Action, Answer, Motion, SwitchTo


class ProtocolError(ChainViewError):
    """Parse failure; ``span`` is the offending text, quoted back in retry prompts."""

    def __init__(self, message: str, span: str = ""):
        super().__init__(message)
        self.span = span


class Unparseable(ProtocolError):
    pass


class UnknownVerb(ProtocolError):
    pass


class IndexOutOfRange(ProtocolError):
    def __init__(self, index: int, limit: int, span: str = ""):
        super().__init__(f"index {index} outside 0..{limit - 1}", span)
        self.index = index


class EmptySelection(ProtocolError):
    pass


class OutOfRange(ProtocolError):
    pass


@dataclass(frozen=True)
class Act:
    action: Union[Motion, SwitchTo]


@dataclass(frozen=True)
class Final:
    answer: str


@dataclass(frozen=True)
class StepDecision:
    decision: Union[Act, Final]
    thought: Optional[str] = None

    @property
    def is_final(self) -> bool:
        return isinstance(self.decision, Final)


@dataclass(frozen=True)
class SelectionDecision:
    indices: tuple
    lenient: bool = False


# --------------------------------------------------------------------------
# synonym table

_CANONICAL = {
    "MoveForward": Motion.MOVE_FORWARD,
    "MoveBackward": Motion.MOVE_BACKWARD,
    "MoveLeft": Motion.MOVE_LEFT,
    "MoveRight": Motion.MOVE_RIGHT,
    "MoveUp": Motion.MOVE_UP,
    "MoveDown": Motion.MOVE_DOWN,
    "YawLeft": Motion.YAW_LEFT,
    "YawRight": Motion.YAW_RIGHT,
    "PitchUp": Motion.PITCH_UP,
    "PitchDown": Motion.PITCH_DOWN,
    "RollCW": Motion.ROLL_CW,
    "RollCCW": Motion.ROLL_CCW,
    "SwitchTo": SwitchTo,
}


def _norm_verb(text: str) -> str:
    text = text.lower().replace("_", " ").replace("-", " ")
    text = re.sub(r"[^a-z0-9 ]+", " ", text)
    return " ".join(text.split())


class SynonymTable:
    def __init__(self, mapping: dict):
        self.forms: dict[str, object] = {}
        for surface, canonical in mapping.items():
            if canonical not in _CANONICAL:
                raise ValueError(f"unknown canonical verb {canonical!r}")
            self.forms[_norm_verb(surface)] = _CANONICAL[canonical]
        for m in Motion:
            self.forms.setdefault(m.verb, m)
        for name, target in _CANONICAL.items():
            self.forms.setdefault(name.lower(), target)
        self.squashed = {k.replace(" ", ""): v for k, v in self.forms.items()}

    @classmethod
    def load(cls, path=None) -> "SynonymTable":
        if path is None:
            text = resources.files("chainview").joinpath("data/synonyms.tsv").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"synonym line {lineno}: expected surface<TAB>Canonical")
            surface, canonical = line.split("\t", 1)
            mapping[surface.strip()] = canonical.strip()
        return cls(mapping)

    def lookup(self, verb_text: str) -> tuple[object, Optional[int]]:
        """Resolve a verb phrase to a Motion or the SwitchTo class (+ index)."""
        norm = _norm_verb(verb_text)
        words = norm.split()
        index = None
        if words and words[-1].isdigit():
            index = int(words[-1])
            words = words[:-1]
        phrase = " ".join(words)
        target = self.forms.get(phrase) or self.squashed.get(phrase.replace(" ", ""))
        if target is None:
            # longest known prefix on a word boundary ("move forward a bit")
            for cut in range(len(words) - 1, 0, -1):
                head = " ".join(words[:cut])
                target = self.forms.get(head)
                if target is not None:
                    if target is SwitchTo and index is None:
                        rest = [w for w in words[cut:] if w.isdigit()]
                        index = int(rest[0]) if rest else None
                    break
        if target is None:
            raise UnknownVerb(f"unknown action verb {verb_text.strip()!r}", verb_text.strip())
        return target, index


@lru_cache(maxsize=1)
def default_synonyms() -> SynonymTable:
    return SynonymTable.load()


def accepted_verbs() -> list[str]:
    """Canonical verbs every prompt must list (SwitchTo shown as 'switch to view')."""
    return [m.verb for m in Motion] + ["switch to view"]


# --------------------------------------------------------------------------
# step replies

_MARKER = re.compile(r"^[\s>*#_`-]*(THINK|ACTION|ANSWER)[\s*_`]*:[\s*_`]*(.*)$", re.IGNORECASE)


def _split_markers(text: str) -> list[tuple[str, str]]:
    """[(marker, body)] in order; continuation lines join the preceding body."""
    blocks: list[list] = []
    for line in text.splitlines():
        m = _MARKER.match(line)
        if m:
            blocks.append([m.group(1).upper(), [m.group(2)]])
        elif blocks:
            blocks[-1][1].append(line)
    return [(k, "\n".join(v).strip()) for k, v in blocks]


def _clean(s: str) -> str:
    return s.strip().strip("`*\"' ").strip()


def parse_step(text, anchor_count: int, synonyms: Optional[SynonymTable] = None) -> StepDecision:
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    synonyms = synonyms or default_synonyms()
    blocks = _split_markers(text)
    thoughts = [body for kind, body in blocks if kind == "THINK" and body]
    thought = "\n".join(thoughts) if thoughts else None
    decision = next(((k, b) for k, b in blocks if k in ("ACTION", "ANSWER")), None)
    if decision is None:
        raise Unparseable("no ACTION: or ANSWER: line found", text.strip()[:200])
    kind, body = decision
    if kind == "ANSWER":
        answer = _clean(body)
        if not answer:
            raise Unparseable("ANSWER: is empty", body)
        return StepDecision(Final(answer), thought)

    verb = _clean(body.splitlines()[0] if body else "")
    if re.match(r"answer\b", verb, re.IGNORECASE):
        answer = _clean(re.sub(r"^answer\s*:?", "", verb, flags=re.IGNORECASE))
        if not answer:
            raise Unparseable("answer action without text", verb)
        return StepDecision(Final(answer), thought)
    if not verb:
        raise UnknownVerb("ACTION: has no verb", body)
    target, index = synonyms.lookup(verb)
    if target is SwitchTo:
        if index is None:
            raise UnknownVerb("view switch needs a view index", verb)
        if not 0 <= index < anchor_count:
            raise IndexOutOfRange(index, anchor_count, verb)
        return StepDecision(Act(SwitchTo(index)), thought)
    return StepDecision(Act(target), thought)


def render_decision(decision: StepDecision) -> str:
    """Inverse of :func:`parse_step` for canonical forms."""
    lines = []
    if decision.thought:
        lines.append(f"THINK: {decision.thought}")
    d = decision.decision
    if isinstance(d, Final):
        lines.append(f"ANSWER: {d.answer}")
    else:
        lines.append(f"ACTION: {d.action.verb}")
    return "\n".join(lines)


def parse_action_verb(verb: str, anchor_count: int = 10**9) -> Action:
    """Parse a bare canonical verb, as logged in trajectories."""
    if verb.startswith("answer "):
        return Answer(verb[len("answer "):])
    decision = parse_step(f"ACTION: {verb}", anchor_count)
    return decision.decision.action


# --------------------------------------------------------------------------
# selections

_SELECT = re.compile(r"^[\s>*#_`-]*select[\s*_`]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_INT = re.compile(r"(?<![\w.])\d+(?![\w]|\.\d)")


def _dedup(values) -> list[int]:
    seen, out = set(), []
    for v in values:
        if v not in seen:
            seen.add(v)
            out.append(v)
    return out


def parse_selection(text, frame_count: int, k_max: int, lenient: bool = False) -> SelectionDecision:
    """Extract frame indices from the first ``SELECT:`` line.

    In lenient mode a reply without a ``SELECT:`` line falls back to every
    in-range integer in the text. Results are deduplicated in order and
    truncated to ``k_max``.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    m = _SELECT.search(text)
    if m is not None:
        span = m.group(1)
        values = _dedup(int(x) for x in _INT.findall(span))
        if not values:
            raise EmptySelection("SELECT: lists no frame indices", span.strip())
        for v in values:
            if not 0 <= v < frame_count:
                raise IndexOutOfRange(v, frame_count, span.strip())
        return SelectionDecision(tuple(values[:k_max]), lenient=False)
    if not lenient:
        raise Unparseable("no SELECT: line found", text.strip()[:200])
    values = _dedup(v for v in (int(x) for x in _INT.findall(text)) if 0 <= v < frame_count)
    if not values:
        raise EmptySelection("no frame indices found in reply", text.strip()[:200])
    return SelectionDecision(tuple(values[:k_max]), lenient=True)


# --------------------------------------------------------------------------
# judge scores


def parse_judge_score(text) -> int:
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    m = _INT.search(text)
    if m is None:
        raise Unparseable("judge reply holds no integer score", text.strip()[:200])
    value = int(m.group(0))
    if not 1 <= value <= 5:
        raise OutOfRange(f"judge score {value} outside 1..5", m.group(0))
    return value
