"""Batch runs over episode manifests: run, score, sweep and trajectory export.

Run directory layout::

    <out_dir>/<run_id>/
        config.json  report.json  report.txt  report.png  judge_cache.jsonl  judge_log.jsonl
        <episode_id>/result.json  timing.json  transcript.jsonl  trajectory.json
                     birds_eye.png  steps/<t>.png  steps/<t>.json
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import figures
from .agent import (
    AgentSettings, EpisodeResult, Termination, Transcript, run_episode,
)
from .config import Config
from .errors import ChainViewError, ConfigError
from .gateway import (
    Backend, BackendFailure, OpenAIBackend, RecordReplayBackend, ScriptedBackend,
    ScriptExhausted,
)
from .geometry import CameraPose, Intrinsics
from .metrics import ScoreReport, build_report, format_table, judge
from .mocks import hidden_object_backend, rule_judge_backend
from .protocol import parse_action_verb
from .renderer import BirdsEyeMapping, birds_eye_mapping, save_observation
from .scene_io import Episode, ScenePointCloud, load_episode, load_point_cloud

log = logging.getLogger(__name__)


class MissingTrajectory(ChainViewError):
    pass


def write_json(path: Path, data) -> None:
    """Atomic write (tmp + rename) of deterministic JSON."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class SceneCache:
    """Loads each scene file once; returned clouds are immutable and shared."""

    def __init__(self):
        self._scenes: dict[Path, ScenePointCloud] = {}
        self._lock = threading.Lock()

    def get(self, path) -> ScenePointCloud:
        path = Path(path).resolve()
        with self._lock:
            if path not in self._scenes:
                self._scenes[path] = load_point_cloud(path)
            return self._scenes[path]


# --------------------------------------------------------------------------
# backends from config


class BackendFactory:
    def __init__(self, config: Config, mode: str):
        self.config = config
        self.mode = mode
        self.kind = config["backend.kind"]
        self._shared: Optional[Backend] = None
        self._script = None
        if self.kind == "scripted":
            if not config["backend.script"]:
                raise ConfigError("backend.kind = 'scripted' needs backend.script")
            path = config.resolve(config["backend.script"])
            try:
                self._script = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot load script {path}: {exc}") from exc
        elif self.kind not in ("openai", "hidden-object", "replay"):
            raise ConfigError(f"unknown backend.kind {self.kind!r}")
        if self.kind == "replay" and not config["backend.replay"]:
            raise ConfigError("backend.kind = 'replay' needs backend.replay (or --replay)")

    def _base(self, episode: Episode) -> Backend:
        if self.kind == "scripted":
            entry = self._script.get(episode.episode_id)
            if entry is None:
                raise ConfigError(f"script has no entry for episode {episode.episode_id!r}")
            if isinstance(entry, dict):
                entry = entry.get(self.mode, [])
            return ScriptedBackend(entry)
        if self.kind == "hidden-object":
            return hidden_object_backend(episode.ground_truth, self.config["backend.reveal_after"],
                                         self.config["backend.decoy"])
        if self._shared is None:
            if self.kind == "replay":
                self._shared = RecordReplayBackend(self.config.resolve(self.config["backend.replay"]),
                                                   "replay", model_name=self.config["backend.model"],
                                                   temperature=self.config["backend.temperature"])
            else:
                self._shared = OpenAIBackend(self.config.backend_config())
        return self._shared

    def for_episode(self, episode: Episode) -> Backend:
        backend = self._base(episode)
        if self.config["backend.replay"] and self.kind != "replay":
            return RecordReplayBackend(self.config.resolve(self.config["backend.replay"]), "replay",
                                       model_name=backend.model_name,
                                       temperature=backend.temperature)
        if self.config["backend.record"]:
            return RecordReplayBackend(self.config.resolve(self.config["backend.record"]), "record",
                                       inner=backend)
        return backend


def make_judge(config: Config) -> Optional[Backend]:
    kind = config["eval.judge"]
    if kind == "none":
        return None
    if kind == "rule":
        return rule_judge_backend()
    if kind == "backend":
        return OpenAIBackend(config.judge_backend_config())
    raise ConfigError(f"unknown eval.judge {kind!r}; expected rule, backend or none")


# --------------------------------------------------------------------------
# one episode


def _relative(path, base) -> str:
    """Portable path string: relative to the config directory, '/'-separated."""
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def trajectory_record(result: EpisodeResult, intrinsics: Optional[Intrinsics],
                      mapping: Optional[BirdsEyeMapping]) -> dict:
    return {
        "episode_id": result.episode_id,
        "start_pose": result.start_pose.to_list() if result.start_pose is not None else None,
        "anchor_poses": [p.to_list() for p in result.anchor_poses],
        "poses": [p.to_list() for _, p in result.trajectory],
        "actions": [a.verb for a, _ in result.trajectory],
        "intrinsics": intrinsics.to_dict() if intrinsics is not None else None,
        "birds_eye": None if mapping is None else {
            "center": list(mapping.center), "extent": mapping.extent,
            "resolution": mapping.resolution, "up_axis": mapping.up_axis,
        },
    }


def execute_episode(episode_path: Path, config: Config, mode: str, run_dir: Path,
                    factory: BackendFactory, scenes: SceneCache,
                    settings: AgentSettings) -> EpisodeResult:
    episode = load_episode(episode_path, strict=config["run.strict_images"])
    ep_dir = run_dir / episode.episode_id
    if ep_dir.exists():
        shutil.rmtree(ep_dir)
    ep_dir.mkdir(parents=True)
    transcript_file = open(ep_dir / "transcript.jsonl", "a", encoding="utf-8")

    def sink(entry: dict) -> None:
        transcript_file.write(json.dumps(entry, sort_keys=True) + "\n")
        transcript_file.flush()

    try:
        scene = scenes.get(episode.scene_path)
        backend = factory.for_episode(episode)
        result = run_episode(episode, backend, mode, settings, scene, Transcript(sink))
    finally:
        transcript_file.close()

    mapping = None
    if result.birds_eye is not None:
        save_observation(result.birds_eye, ep_dir, "birds_eye")
        mapping = birds_eye_mapping(scene, result.birds_eye.width, settings.render.up_axis)
    for t, obs in enumerate(result.observations, start=1):
        save_observation(obs, ep_dir / "steps", str(t))
    frames = {f.frame_id: f for f in episode.frames}
    first_k = None
    if result.anchor_frame_ids and result.anchor_frame_ids[0] in frames:
        first_k = frames[result.anchor_frame_ids[0]].intrinsics
    write_json(ep_dir / "trajectory.json", trajectory_record(result, first_k, mapping))

    record = result.to_json()
    record.update({
        "question": episode.question,
        "ground_truth": episode.ground_truth,
        "extra_answers": list(episode.extra_answers),
        "category": episode.category,
        "scene": _relative(episode.scene_path, config.base_dir),
        "episode_path": _relative(episode_path, config.base_dir),
        "min_steps": settings.budget.min_steps,
        "max_steps": settings.budget.max_steps,
    })
    write_json(ep_dir / "timing.json", {"wall_time_s": result.wall_time_s,
                                        "finished_at": time.time()})
    write_json(ep_dir / "result.json", record)
    return result


# --------------------------------------------------------------------------
# run


@dataclass
class RunSummary:
    run_dir: Path
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    report: Optional[ScoreReport] = None


def default_run_id(mode: str) -> str:
    return time.strftime("%Y%m%d-%H%M%S") + f"-{mode}"


def run(config: Config, mode: str = "cov", run_id: Optional[str] = None, force: bool = False,
        workers: Optional[int] = None, judge_backend: Optional[Backend] = None,
        score: bool = True) -> RunSummary:
    """Execute every episode under ``mode``; finished episodes are skipped unless ``force``."""
    if mode not in ("baseline", "cov", "no-selection"):
        raise ConfigError(f"unknown mode {mode!r}")
    run_dir = config.resolve(config["run.out_dir"]) / (run_id or default_run_id(mode))
    run_dir.mkdir(parents=True, exist_ok=True)
    settings = config.agent_settings()
    paths = config.episode_paths()
    factory = BackendFactory(config, mode)
    scenes = SceneCache()
    write_json(run_dir / "config.json", {"mode": mode, "config": config.to_dict()})

    summary = RunSummary(run_dir)
    todo = []
    for p in paths:
        ep_id = json.loads(Path(p).read_text(encoding="utf-8")).get("episode_id", Path(p).stem)
        if (run_dir / str(ep_id) / "result.json").exists() and not force:
            summary.skipped.append(ep_id)
        else:
            todo.append(p)

    def one(p):
        return execute_episode(p, config, mode, run_dir, factory, scenes, settings)

    n_workers = workers or config["run.workers"]
    if n_workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(one, todo))
    else:
        results = [one(p) for p in todo]
    for r in results:
        summary.executed.append(r.episode_id)
        if r.failed:
            summary.failed.append(r.episode_id)
    for ep_dir in sorted(d for d in run_dir.iterdir() if (d / "result.json").exists()):
        rec = json.loads((ep_dir / "result.json").read_text())
        if rec["termination"] == Termination.FAILED.value and rec["episode_id"] not in summary.failed:
            summary.failed.append(rec["episode_id"])
    if score:
        summary.report = score_run(run_dir, config, judge_backend)
    return summary


# --------------------------------------------------------------------------
# scoring


def _judge_key(question: str, gt: str, extras: Sequence[str], prediction: str,
               category: Optional[str] = None) -> str:
    blob = json.dumps([question, gt, list(extras), prediction, category], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class JudgeCache:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.entries[rec["hash"]] = rec

    def get(self, key: str) -> Optional[dict]:
        with self._lock:
            return self.entries.get(key)

    def put(self, key: str, gamma: int, failed: bool) -> None:
        with self._lock:
            rec = {"hash": key, "gamma": gamma, "failed": failed}
            self.entries[key] = rec
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")


def load_results(run_dir: Path) -> list[dict]:
    out = []
    for d in sorted(Path(run_dir).iterdir()):
        f = d / "result.json"
        if d.is_dir() and f.exists():
            out.append(json.loads(f.read_text(encoding="utf-8")))
    return out


def step_histogram(results: Sequence[dict]) -> dict:
    counts = Counter(r["step_count"] for r in results if r["termination"] != "Failed")
    return {str(k): counts[k] for k in sorted(counts)}


def score_run(run_dir, config: Config, judge_backend: Optional[Backend] = None) -> ScoreReport:
    """(Re)judge every answer in ``run_dir`` and write report.json / report.txt."""
    run_dir = Path(run_dir)
    judge_backend = judge_backend if judge_backend is not None else make_judge(config)
    include_extras = config["eval.include_extras"]
    include_category = config["eval.include_category"]
    prompts = config.prompt_set()
    cache = JudgeCache(run_dir / "judge_cache.jsonl")
    results = load_results(run_dir)
    items, gammas, judge_failures = [], {}, set()
    judge_log = run_dir / "judge_log.jsonl"
    calls = 0
    for rec in results:
        failed = rec["termination"] == Termination.FAILED.value
        items.append({
            "episode_id": rec["episode_id"], "prediction": rec["answer"],
            "ground_truth": rec["ground_truth"], "extra_answers": rec["extra_answers"],
            "failed": failed,
        })
        if failed or judge_backend is None:
            continue
        extras = rec["extra_answers"] if include_extras else []
        category = rec.get("category") if include_category else None
        key = _judge_key(rec["question"], rec["ground_truth"], extras, rec["answer"], category)
        hit = cache.get(key)
        if hit is None:
            calls += 1
            try:
                outcome = judge(rec["question"], rec["ground_truth"], extras, rec["answer"],
                                judge_backend, prompts, include_extras, category)
            except BackendFailure as exc:
                log.error("judge failed for %s: %s", rec["episode_id"], exc)
                gammas[rec["episode_id"]] = 1
                judge_failures.add(rec["episode_id"])
                continue
            with open(judge_log, "a", encoding="utf-8") as f:
                f.write(json.dumps({"episode_id": rec["episode_id"], "hash": key,
                                    "replies": outcome.raw, "gamma": outcome.gamma}) + "\n")
            cache.put(key, outcome.gamma, outcome.failed)
            hit = {"gamma": outcome.gamma, "failed": outcome.failed}
        gammas[rec["episode_id"]] = hit["gamma"]
        if hit["failed"]:
            judge_failures.add(rec["episode_id"])
    report = build_report(items, gammas, judge_failures)
    mode = results[0]["mode"] if results else None
    payload = report.to_json()
    payload.update({
        "mode": mode,
        "failed": [r["episode_id"] for r in results if r["termination"] == "Failed"],
        "step_histogram": step_histogram(results),
        "judge": getattr(judge_backend, "model_name", None),
    })
    write_json(run_dir / "report.json", payload)
    (run_dir / "report.txt").write_text(
        format_table({"run": {mode or "run": report.aggregate}}, "llm_match_pct") + "\n", "utf-8"
    )
    figures.plot_report(payload, run_dir / "report.png")
    score_run.last_judge_calls = calls
    return report


score_run.last_judge_calls = 0


# --------------------------------------------------------------------------
# sweep


def sweep(config: Config, min_steps_list: Sequence[int], sweep_id: Optional[str] = None,
          force: bool = False, workers: Optional[int] = None,
          judge_backend: Optional[Backend] = None, plots: bool = True) -> dict:
    """Run cov mode once per minimum-step setting; writes sweep.json/.csv/.txt and figures."""
    sweep_id = sweep_id or default_run_id("sweep")
    root = config.resolve(config["run.out_dir"]) / sweep_id
    root.mkdir(parents=True, exist_ok=True)
    rows, histograms, distributions = [], {}, {}
    for n in min_steps_list:
        max_steps = max(config["budget.max_steps"], n, 1)
        cfg = config.with_overrides({
            "budget.min_steps": n,
            "budget.max_steps": max_steps,
            "run.out_dir": str(root),
        })
        summary = run(cfg, "cov", run_id=f"min_steps_{n}", force=force, workers=workers,
                      judge_backend=judge_backend)
        results = load_results(summary.run_dir)
        agg = summary.report.aggregate
        answered = [r for r in results if r["termination"] == "Answered"]
        rows.append({
            "min_steps": n,
            "max_steps": max_steps,
            "n": summary.report.n,
            "llm_match_pct": agg["llm_match_pct"],
            "em_pct": agg["em_pct"],
            "bleu4": agg["bleu4"],
            "rouge_l": agg["rouge_l"],
            "cider": agg["cider"],
            "mean_steps": float(np.mean([r["step_count"] for r in results])) if results else 0.0,
            "answered_below_min": sum(1 for r in answered if r["step_count"] < n),
            "failed": len(summary.failed),
            "run_dir": summary.run_dir.name,
        })
        histograms[str(n)] = step_histogram(results)
        by_q = {q.episode_id: q for q in summary.report.per_question}
        per_step: dict[int, list] = {}
        for r in results:
            per_step.setdefault(r["step_count"], []).append(by_q[r["episode_id"]])
        distributions[str(n)] = [
            {
                "step_count": s,
                "count": len(qs),
                "em_pct": 100.0 * sum(q.em for q in qs) / len(qs),
                "llm_match_pct": (sum((q.gamma - 1) for q in qs if q.gamma is not None) * 25.0
                                  / len([q for q in qs if q.gamma is not None])
                                  if any(q.gamma is not None for q in qs) else None),
            }
            for s, qs in sorted(per_step.items())
        ]
    payload = {"rows": rows, "step_histogram": histograms, "step_distribution": distributions}
    write_json(root / "sweep.json", payload)
    columns = ["min_steps", "n", "llm_match_pct", "em_pct", "bleu4", "rouge_l", "cider",
               "mean_steps", "answered_below_min", "failed"]
    with open(root / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    (root / "sweep.txt").write_text(sweep_table(rows) + "\n", encoding="utf-8")
    if plots:
        figures.plot_scaling(rows, root / "scaling.png")
        figures.plot_step_distribution(distributions, root / "step_distribution.png")
    payload["dir"] = str(root)
    return payload


def sweep_table(rows: Sequence[dict]) -> str:
    """Aligned text table, one row per minimum-step setting."""
    header = ["Method", "LLM-Match", "EM@1", "BLEU-4", "ROUGE-L", "CIDEr", "mean steps"]
    body = []
    for r in rows:
        lm = "-" if r["llm_match_pct"] is None else f"{r['llm_match_pct']:.2f}"
        body.append([f"CoV-{r['min_steps']}", lm, f"{r['em_pct']:.2f}", f"{r['bleu4']:.4f}",
                     f"{r['rouge_l']:.4f}", f"{r['cider']:.4f}", f"{r['mean_steps']:.2f}"])
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in
                       enumerate(zip(line, widths))) for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# trajectory export

FRUSTUM_DEPTH_M = 0.5


def _frustum_outline(pose: CameraPose, k: Intrinsics, mapping: BirdsEyeMapping,
                     depth: float = FRUSTUM_DEPTH_M) -> np.ndarray:
    """Top-down polygon (apex, left far corner, right far corner) in pixel coordinates."""
    corners = []
    for u in (0.0, float(k.width)):
        ray = np.array([(u - k.cx) / k.fx, 0.0, 1.0])
        corners.append(pose.rotation @ (ray * depth) + pose.translation)
    pts = np.vstack([pose.translation, *corners])
    return mapping.world_to_pixel(pts)


def _poly(points: np.ndarray) -> str:
    return " ".join(f"{x:.3f},{y:.3f}" for x, y in points)


def trajectory_svg(traj: dict, birds_eye_png: Optional[bytes] = None) -> str:
    be = traj.get("birds_eye")
    if not be:
        raise MissingTrajectory("trajectory has no bird's-eye mapping (baseline run?)")
    mapping = BirdsEyeMapping(tuple(be["center"]), be["extent"], be["resolution"], be["up_axis"])
    k = Intrinsics(**traj["intrinsics"]) if traj.get("intrinsics") else Intrinsics.from_fov(640, 480)
    res = mapping.resolution
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{res}" height="{res}" viewBox="0 0 {res} {res}">',
    ]
    if birds_eye_png is not None:
        import base64
        data = base64.b64encode(birds_eye_png).decode("ascii")
        out.append(f'<image x="0" y="0" width="{res}" height="{res}" '
                   f'xlink:href="data:image/png;base64,{data}"/>')
    for i, m in enumerate(traj["anchor_poses"]):
        poly = _frustum_outline(CameraPose.from_matrix(m), k, mapping)
        out.append(f'<polygon class="anchor" data-anchor="{i}" points="{_poly(poly)}" '
                   f'fill="none" stroke="#ffd400" stroke-width="1.5"/>')
    poses = [traj["start_pose"], *traj["poses"]] if traj["poses"] else []
    centers = []
    for t, m in enumerate(poses):
        pose = CameraPose.from_matrix(m)
        poly = _frustum_outline(pose, k, mapping)
        centers.append(poly[0])
        label = "start" if t == 0 else escape(traj["actions"][t - 1])
        out.append(f'<polygon class="frustum" data-step="{t}" data-action="{label}" '
                   f'points="{_poly(poly)}" fill="none" stroke="#ff3030" stroke-width="1.5"/>')
        out.append(f'<circle class="apex" data-step="{t}" cx="{poly[0][0]:.3f}" '
                   f'cy="{poly[0][1]:.3f}" r="2" fill="#ff3030"/>')
    if len(centers) > 1:
        out.append(f'<polyline class="path" points="{_poly(np.array(centers))}" '
                   f'fill="none" stroke="#30a0ff" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_trajectory(run_dir, episode_id: str, fmt: str = "svg", out_path=None) -> Path:
    ep_dir = Path(run_dir) / episode_id
    traj_file = ep_dir / "trajectory.json"
    if not traj_file.exists():
        raise MissingTrajectory(f"no trajectory.json for {episode_id} in {run_dir}")
    traj = json.loads(traj_file.read_text(encoding="utf-8"))
    if fmt == "json":
        out_path = Path(out_path or ep_dir / "trajectory_export.json")
        write_json(out_path, traj)
        return out_path
    if fmt != "svg":
        raise ConfigError(f"unknown export format {fmt!r}")
    png = ep_dir / "birds_eye.png"
    svg = trajectory_svg(traj, png.read_bytes() if png.exists() else None)
    out_path = Path(out_path or ep_dir / "trajectory.svg")
    out_path.write_text(svg, encoding="utf-8")
    return out_path


def replay_logged_poses(traj: dict, motion) -> list[CameraPose]:
    """Recompute logged poses from the start pose and the action names."""
    from .agent import replay_trajectory
    anchors = [CameraPose.from_matrix(m) for m in traj["anchor_poses"]]
    actions = [parse_action_verb(a, len(anchors)) for a in traj["actions"]]
    return replay_trajectory(CameraPose.from_matrix(traj["start_pose"]), actions, anchors, motion)


class TranscriptReplayBackend(Backend):
    """Answers with the logged responses of ``transcript.jsonl``, in order."""

    name = "transcript-replay"

    def __init__(self, entries: Sequence[dict]):
        super().__init__()
        self._responses = [e["response"] for e in entries]
        self._pos = 0

    @classmethod
    def from_file(cls, path) -> "TranscriptReplayBackend":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])

    def complete(self, messages) -> str:
        self._bump()
        if self._pos >= len(self._responses):
            raise ScriptExhausted("transcript has no more responses")
        self._pos += 1
        return self._responses[self._pos - 1]


def replay_episode_dir(ep_dir, config: Config) -> EpisodeResult:
    """Re-run an episode from its transcript alone, without writing anything."""
    ep_dir = Path(ep_dir)
    rec = json.loads((ep_dir / "result.json").read_text(encoding="utf-8"))
    episode = load_episode(config.resolve(rec["episode_path"]), strict=config["run.strict_images"])
    settings = config.agent_settings()
    budget = dataclasses.replace(settings.budget, min_steps=rec["min_steps"],
                                 max_steps=rec["max_steps"])
    settings = dataclasses.replace(settings, budget=budget)
    backend = TranscriptReplayBackend.from_file(ep_dir / "transcript.jsonl")
    return run_episode(episode, backend, rec["mode"], settings, load_point_cloud(episode.scene_path))

