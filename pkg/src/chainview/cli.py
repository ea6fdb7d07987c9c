"""``cov`` command line: run | sweep | score | render | export-traj | make-fixtures.

Exit codes: 0 success, 1 some episodes failed, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .config import Config
from .errors import ChainViewError, ConfigError
from .geometry import DEFAULT_INTRINSICS, CameraPose, Intrinsics, InvalidPose
from .renderer import RenderSettings, render_birds_eye, render_view
from .scene_io import ScenePointCloud, load_point_cloud

log = logging.getLogger("chainview")


def _floats(text: str, n: int, what: str) -> list[float]:
    parts = text.replace(",", " ").split()
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{what}: not a list of numbers: {text!r}") from exc
    if len(values) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(values)}")
    return values


def parse_pose(text: str) -> CameraPose:
    """``identity`` or 16 row-major floats of a camera-to-world matrix."""
    if text.strip().lower() == "identity":
        return CameraPose.identity()
    values = _floats(text, 16, "--pose")
    try:
        return CameraPose.from_matrix([values[i:i + 4] for i in range(0, 16, 4)])
    except InvalidPose as exc:
        raise ConfigError(f"--pose: {exc}") from exc


def parse_intrinsics(text: Optional[str]) -> Intrinsics:
    """``fx,fy,cx,cy,width,height`` or ``WIDTHxHEIGHT@FOV``."""
    if not text:
        return DEFAULT_INTRINSICS
    try:
        if "x" in text and "@" in text:
            size, fov = text.split("@")
            w, h = size.split("x")
            return Intrinsics.from_fov(int(w), int(h), float(fov))
        fx, fy, cx, cy, w, h = _floats(text, 6, "--intrinsics")
        return Intrinsics(fx, fy, cx, cy, int(w), int(h))
    except ValueError as exc:
        raise ConfigError(f"--intrinsics: {exc}") from exc


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    overrides = {
        "budget.min_steps": getattr(args, "min_steps", None),
        "budget.max_steps": getattr(args, "max_steps", None),
        "run.ratio": getattr(args, "ratio", None),
        "backend.endpoint": getattr(args, "backend_endpoint", None),
        "backend.model": getattr(args, "model", None),
        "backend.replay": getattr(args, "replay", None),
        "run.workers": getattr(args, "workers", None),
    }
    if overrides["backend.replay"] is not None:
        overrides["backend.replay"] = str(Path(overrides["backend.replay"]).resolve())
    return cfg.with_overrides(overrides)


def _print_report(report_json: Path) -> None:
    data = json.loads(report_json.read_text(encoding="utf-8"))
    agg = data["aggregate"]
    name = data.get("mode") or "run"
    metrics = ("llm_match_pct", "em_pct", "bleu4", "rouge_l", "cider")
    print("\t".join(("method",) + metrics))
    print("\t".join([name] + ["-" if agg[m] is None else f"{agg[m]:.4f}" for m in metrics]))


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = harness.run(cfg, args.mode, run_id=args.run_id, force=args.force,
                          workers=args.workers)
    print(f"run directory: {summary.run_dir}")
    print(f"executed {len(summary.executed)}, skipped {len(summary.skipped)}, "
          f"failed {len(summary.failed)}")
    if (summary.run_dir / "report.json").exists():
        _print_report(summary.run_dir / "report.json")
    for ep in summary.failed:
        print(f"FAILED {ep}", file=sys.stderr)
    return 1 if summary.failed else 0


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part or ".." in part:
            lo, hi = part.replace("..", "-").split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty step list {text!r}")
    return out


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    payload = harness.sweep(cfg, args.steps, sweep_id=args.run_id, force=args.force,
                            workers=args.workers)
    root = Path(payload["dir"])
    print(f"sweep directory: {root}")
    print((root / "sweep.txt").read_text(encoding="utf-8"), end="")
    print((root / "sweep.csv").read_text(encoding="utf-8"), end="")
    return 1 if any(r["failed"] for r in payload["rows"]) else 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"not a run directory: {run_dir}")
    harness.score_run(run_dir, cfg)
    print(f"judge calls: {harness.score_run.last_judge_calls}")
    _print_report(run_dir / "report.json")
    return 0


def cmd_render(args) -> int:
    scene = load_point_cloud(args.scene) if args.scene else ScenePointCloud.empty()
    settings = RenderSettings(splat_radius_px=args.splat_radius, up_axis=args.up_axis)
    if args.birds_eye:
        obs = render_birds_eye(scene, args.resolution, settings)
    else:
        obs = render_view(scene, parse_pose(args.pose), parse_intrinsics(args.intrinsics), settings)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(obs.png_bytes())
    print(out)
    return 0


def cmd_export(args) -> int:
    path = harness.export_trajectory(args.run_dir, args.episode, args.format, args.output)
    print(path)
    return 0


def cmd_fixtures(args) -> int:
    from .fixtures import build_fixture_suite
    out = build_fixture_suite(args.out_dir, kind=args.kind, min_steps=args.min_steps or 0)
    print(out / "config.toml")
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--min-steps", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--ratio", type=int, help="frame subsample ratio")
    p.add_argument("--backend-endpoint")
    p.add_argument("--model")
    p.add_argument("--replay", help="replay model responses from this cache (no network)")
    p.add_argument("--force", action="store_true", help="re-run finished episodes")
    p.add_argument("--workers", type=int)
    p.add_argument("--run-id")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cov", description="Embodied QA runner with model-driven camera exploration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every episode of the manifest")
    _common(p)
    p.add_argument("--mode", choices=["baseline", "cov", "no-selection"], default="cov")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run cov mode once per minimum-step value")
    _common(p)
    p.add_argument("--steps", type=_int_list, default=list(range(1, 8)),
                   help="minimum-step values, e.g. 0-4 or 1,3,5")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="(re)judge a run directory")
    p.add_argument("run_dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="render one view or the bird's-eye view to PNG")
    p.add_argument("scene", nargs="?", help=".ply or .npz point cloud (omit for empty)")
    p.add_argument("--pose", default="identity", help="'identity' or 16 row-major floats")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy,w,h or WxH@FOV")
    p.add_argument("--birds-eye", action="store_true")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--splat-radius", type=int, default=2)
    p.add_argument("--up-axis", choices=["z", "y"], default="z")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-traj", help="export a logged trajectory as SVG or JSON")
    p.add_argument("run_dir")
    p.add_argument("episode")
    p.add_argument("--format", choices=["svg", "json"], default="svg")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("make-fixtures", help="write the offline fixture suite")
    p.add_argument("out_dir")
    p.add_argument("--kind", choices=["scripted", "hidden-object"], default="scripted")
    p.add_argument("--min-steps", type=int)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ChainViewError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
