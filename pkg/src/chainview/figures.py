"""Report figures (matplotlib, Agg backend, written straight to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_scaling(rows: Sequence[dict], path) -> Path:
    """LLM-Match and mean steps taken versus the minimum-step setting."""
    xs = [r["min_steps"] for r in rows]
    ys = [r["llm_match_pct"] if r["llm_match_pct"] is not None else float("nan") for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(xs, ys, marker="o", color="tab:blue", label="LLM-Match")
    ax.set_xlabel("minimum action steps")
    ax.set_ylabel("LLM-Match (%)")
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(xs, [r["mean_steps"] for r in rows], marker="s", ls="--", color="tab:orange",
             label="mean steps")
    ax2.set_ylabel("mean steps taken")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_step_distribution(distributions: dict, path) -> Path:
    """Episodes per step count, one bar group per minimum-step setting."""
    settings = list(distributions)
    steps = sorted({d["step_count"] for v in distributions.values() for d in v})
    fig, ax = plt.subplots(figsize=(5.5, 3.5), dpi=100)
    width = 0.8 / max(1, len(settings))
    for i, key in enumerate(settings):
        counts = {d["step_count"]: d["count"] for d in distributions[key]}
        xs = [s + (i - (len(settings) - 1) / 2) * width for s in steps]
        ax.bar(xs, [counts.get(s, 0) for s in steps], width=width, label=f"min {key}")
    ax.set_xlabel("steps taken")
    ax.set_ylabel("episodes")
    ax.set_xticks(steps)
    if settings:
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_report(report: dict, path) -> Path:
    """Per-question judge scores and aggregate text metrics for one run."""
    rows = report["per_question"]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2), dpi=100)
    gammas = [r["gamma"] for r in rows if r["gamma"] is not None]
    a1.hist(gammas, bins=[0.5, 1.5, 2.5, 3.5, 4.5, 5.5], rwidth=0.8, color="tab:blue")
    a1.set_xlabel("judge score")
    a1.set_ylabel("questions")
    a1.set_xticks([1, 2, 3, 4, 5])
    agg = report["aggregate"]
    names = ["em_pct", "bleu4", "rouge_l", "cider"]
    vals = [agg[n] * (100 if n in ("bleu4", "rouge_l") else 1) if n != "cider" else agg[n] * 10
            for n in names]
    a2.bar(["EM@1 %", "BLEU-4 x100", "ROUGE-L x100", "CIDEr x10"], vals, color="tab:gray")
    a2.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
