"""Answer scoring: judge-based LLM-Match plus EM@1, BLEU-4, ROUGE-L and CIDEr."""

from __future__ import annotations

import math
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ChainViewError
from .gateway import Backend, ChatMessage
from .prompts import PromptSet, judge_retry_text, render_judge_prompt
from .protocol import ProtocolError, parse_judge_score


class MetricError(ChainViewError):
    pass


class EmptyInput(MetricError):
    pass


class OutOfRange(MetricError):
    pass


class CorpusTooSmall(UserWarning):
    pass


# --------------------------------------------------------------------------
# LLM-Match


def llm_match(gammas: Sequence[int]) -> float:
    """Mean of (gamma - 1) / 4 over all questions, as a percentage."""
    if not gammas:
        raise EmptyInput("llm_match needs at least one score")
    for g in gammas:
        if g not in (1, 2, 3, 4, 5) or isinstance(g, bool):
            raise OutOfRange(f"judge score {g!r} outside 1..5")
    # summing integers first keeps [3, 5, 1] -> 50.0 exact
    return sum(g - 1 for g in gammas) * 100.0 / (4 * len(gammas))


@dataclass
class JudgeOutcome:
    gamma: int
    failed: bool = False
    raw: list = field(default_factory=list)


def judge(question: str, ground_truth: str, extras: Sequence[str], prediction: str,
          backend: Backend, prompts: Optional[PromptSet] = None,
          include_extras: bool = True, category: Optional[str] = None) -> JudgeOutcome:
    """Ask a judge model for a 1-5 score; two unreadable replies give gamma=1, flagged."""
    messages = render_judge_prompt(question, ground_truth, extras, prediction, prompts,
                                   include_extras, category)
    raw = []
    for _ in range(2):
        reply = backend.complete(messages)
        raw.append(reply)
        try:
            return JudgeOutcome(parse_judge_score(reply), False, raw)
        except ProtocolError:
            messages = list(messages) + [
                ChatMessage.text("assistant", reply),
                ChatMessage.text("user", judge_retry_text(prompts)),
            ]
    return JudgeOutcome(1, True, raw)


# --------------------------------------------------------------------------
# text normalization

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_ARTICLE = re.compile(r"^(a|an|the)\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, strip ASCII punctuation, collapse whitespace, drop a leading article."""
    s = _PUNCT.sub("", text.lower())
    s = " ".join(s.split())
    return _ARTICLE.sub("", s)


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def em_at_1(prediction: str, ground_truth: str, extras: Sequence[str] = ()) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(r) for r in (ground_truth, *extras)))


# --------------------------------------------------------------------------
# BLEU-4


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(prediction: str, references: Sequence[str]) -> float:
    """Sentence BLEU-4: uniform weights, clipped counts, brevity penalty.

    Orders n >= 2 with zero matches use add-one smoothing (m+1)/(c+1).
    """
    cand = tokenize(prediction)
    refs = [tokenize(r) for r in references]
    if not cand or not refs:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        counts = ngram_counts(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngram_counts(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = sum(counts.values())
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        elif matches == 0:
            p = 1.0 / (total + 1)
        else:
            p = matches / total
        log_p += 0.25 * math.log(p)
    c = len(cand)
    # closest reference length, ties to the shorter
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


# --------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, references: Sequence[str], beta: float = 1.2) -> float:
    cand = tokenize(prediction)
    best = 0.0
    for ref in references:
        r = tokenize(ref)
        if not cand or not r:
            continue
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        prec, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)
        best = max(best, f)
    return best


# --------------------------------------------------------------------------
# CIDEr


def _tfidf(tokens: Sequence[str], n: int, idf) -> tuple[dict, float]:
    counts = ngram_counts(tokens, n)
    vec = {g: c * idf(g) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_scores(predictions: Sequence[str], references: Sequence[Sequence[str]],
                 n_max: int = 4) -> list[float]:
    """Per-item CIDEr (x10 scale), IDF taken over the corpus of reference sets.

    For each reference, TF-IDF cosines are averaged over the n-gram orders
    that occur in the candidate or that reference (orders too long for both
    short strings are skipped, so identical short answers score 10). The
    per-reference values are then averaged. A corpus of fewer than two items
    falls back to uniform IDF (warning).
    """
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not predictions:
        return []
    cands = [tokenize(p) for p in predictions]
    refsets = [[tokenize(r) for r in refs] for refs in references]
    n_docs = len(refsets)
    uniform = n_docs < 2
    if uniform:
        warnings.warn("CIDEr corpus has fewer than 2 items; using uniform IDF", CorpusTooSmall)
    df: Counter = Counter()
    for refs in refsets:
        seen = set()
        for r in refs:
            for n in range(1, n_max + 1):
                seen.update(ngram_counts(r, n))
        df.update(seen)
    log_n = math.log(n_docs)

    def idf(g) -> float:
        return 1.0 if uniform else log_n - math.log(max(1.0, df[g]))

    scores = []
    for cand, refs in zip(cands, refsets):
        if not refs:
            scores.append(0.0)
            continue
        total = 0.0
        for r in refs:
            orders = range(1, min(n_max, max(len(cand), len(r))) + 1)
            per_n = []
            for n in orders:
                cv, cn = _tfidf(cand, n, idf)
                rv, rn = _tfidf(r, n, idf)
                dot = sum(v * rv.get(g, 0.0) for g, v in cv.items())
                cos = dot / (cn * rn) if cn > 0 and rn > 0 else 0.0
                per_n.append(cos)
            total += sum(per_n) / len(per_n) if per_n else 0.0
        scores.append(10.0 * total / len(refs))
    return scores


def cider(predictions: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    scores = cider_scores(predictions, references)
    return sum(scores) / len(scores) if scores else 0.0


# --------------------------------------------------------------------------
# reports


@dataclass
class QuestionScore:
    episode_id: str
    gamma: Optional[int]
    em: int
    bleu4: float
    rouge_l: float
    cider: float
    judge_failed: bool = False
    failed: bool = False

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id, "gamma": self.gamma, "em": self.em,
            "bleu4": self.bleu4, "rouge_l": self.rouge_l, "cider": self.cider,
            "meteor": None, "judge_failed": self.judge_failed, "failed": self.failed,
        }


def aggregate(rows: Sequence[QuestionScore]) -> dict:
    n = len(rows)
    gammas = [r.gamma for r in rows if r.gamma is not None]

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return {
        "llm_match_pct": llm_match(gammas) if gammas else None,
        "em_pct": 100.0 * mean([r.em for r in rows]) if n else 0.0,
        "bleu4": mean([r.bleu4 for r in rows]),
        "rouge_l": mean([r.rouge_l for r in rows]),
        "cider": mean([r.cider for r in rows]),
        "meteor": None,
    }


@dataclass
class ScoreReport:
    per_question: list
    aggregate: dict
    n: int

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "aggregate": self.aggregate,
            "per_question": [r.to_json() for r in self.per_question],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ScoreReport":
        rows = [QuestionScore(**{k: v for k, v in r.items() if k != "meteor"})
                for r in data["per_question"]]
        return cls(rows, data["aggregate"], data["n"])

    def is_consistent(self, tol: float = 1e-9) -> bool:
        """Aggregates equal a recomputation from the per-question rows."""
        again = aggregate(self.per_question)
        for k, v in self.aggregate.items():
            w = again[k]
            if (v is None) != (w is None):
                return False
            if v is not None and abs(v - w) > tol:
                return False
        return self.n == len(self.per_question)


def build_report(items: Sequence[dict], gammas: Optional[dict] = None,
                 judge_failures: Optional[set] = None) -> ScoreReport:
    """Score ``items`` ({episode_id, prediction, ground_truth, extra_answers, failed}).

    Failed episodes score zero everywhere (gamma=1).
    """
    gammas = gammas or {}
    judge_failures = judge_failures or set()
    preds = [("" if it.get("failed") else it["prediction"]) for it in items]
    refs = [[it["ground_truth"], *it.get("extra_answers", [])] for it in items]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CorpusTooSmall)
        ciders = cider_scores(preds, refs) if items else []
    rows = []
    for it, pred, ref, c in zip(items, preds, refs, ciders):
        failed = bool(it.get("failed"))
        eid = it["episode_id"]
        rows.append(QuestionScore(
            episode_id=eid,
            gamma=1 if failed else gammas.get(eid),
            em=0 if failed else em_at_1(pred, ref[0], ref[1:]),
            bleu4=0.0 if failed else bleu4(pred, ref),
            rouge_l=0.0 if failed else rouge_l(pred, ref),
            cider=0.0 if failed else c,
            judge_failed=eid in judge_failures,
            failed=failed,
        ))
    return ScoreReport(rows, aggregate(rows), len(rows))


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def format_table(columns: dict, metric: str = "llm_match_pct") -> str:
    """Aligned text table: method rows x model columns, one metric per cell.

    ``columns`` maps model name -> {method name -> aggregate dict}.
    """
    models = list(columns)
    methods: list[str] = []
    for per_method in columns.values():
        for m in per_method:
            if m not in methods:
                methods.append(m)
    header = ["Method", *models]
    rows = [[m, *(_fmt(columns[model].get(m, {}).get(metric)) for model in models)]
            for m in methods]
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))) for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
